#include "reusegate/commands.hpp"

#include "reusegate/format.hpp"
#include "reusegate/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

namespace reusegate {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

DatasetSummary evaluate_dataset(const Model<float>& model, const std::vector<VideoInput<float>>& videos,
                                const EvalOptions& opts) {
  if (videos.empty()) throw std::invalid_argument("no videos to evaluate");
  DatasetSummary s;
  for (const auto& v : videos) s.videos.push_back(evaluate_video(model, v, opts));
  const double n = double(s.videos.size());
  for (const auto& v : s.videos) {
    s.j += v.j / n;
    s.f += v.f / n;
    s.reuse += v.reuse / n;
    s.flop_ratio += v.flop_ratio() / n;
  }
  s.jf = jf_mean(s.j, s.f);
  return s;
}

namespace {

ordered_json gate_json(const EvalOptions& opts) {
  ordered_json c;
  c["mode"] = to_string(opts.gate.mode);
  c["tau"] = opts.gate.tau;
  c["tau2"] = opts.gate.tau2 ? ordered_json(*opts.gate.tau2) : ordered_json(nullptr);
  c["ft_steps"] = opts.tracker.fine_tune_steps;
  c["refresh"] = opts.tracker.refresh;
  return c;
}

double object_flop_ratio(const ObjectResult& o, std::uint64_t full_cost) {
  std::uint64_t used = 0;
  for (const auto& r : o.records) used += r.flops;
  return o.records.empty() ? 0.0 : double(used) / double(full_cost * o.records.size());
}

}  // namespace

std::string eval_report_json(const DatasetSummary& s, const EvalOptions& opts) {
  ordered_json doc;
  doc["config"] = gate_json(opts);
  doc["videos"] = ordered_json::array();
  for (const auto& v : s.videos) {
    ordered_json jv;
    jv["name"] = v.name;
    jv["J"] = v.j;
    jv["F"] = v.f;
    jv["JF"] = v.jf;
    jv["reuse_rate"] = v.reuse;
    jv["flops"] = v.flops;
    jv["full_flops"] = v.full_flops;
    jv["flop_ratio"] = v.flop_ratio();
    jv["objects"] = ordered_json::array();
    for (const auto& o : v.objects) {
      ordered_json jo;
      jo["object"] = o.object_id;
      jo["J"] = o.j;
      jo["F"] = o.f;
      jo["JF"] = o.jf;
      jo["reuse_rate"] = o.reuse;
      jv["objects"].push_back(jo);
    }
    doc["videos"].push_back(jv);
  }
  ordered_json agg;
  agg["videos"] = s.videos.size();
  agg["J"] = s.j;
  agg["F"] = s.f;
  agg["JF"] = s.jf;
  agg["reuse_rate"] = s.reuse;
  agg["flop_ratio"] = s.flop_ratio;
  doc["aggregate"] = agg;
  return doc.dump(2) + "\n";
}

std::string decisions_jsonl(const DatasetSummary& s) {
  std::ostringstream os;
  for (const auto& v : s.videos) {
    std::vector<const DecisionRecord*> recs;
    for (const auto& o : v.objects)
      for (const auto& r : o.records) recs.push_back(&r);
    std::stable_sort(recs.begin(), recs.end(), [](auto* a, auto* b) {
      return std::pair(a->frame_index, a->object_id) < std::pair(b->frame_index, b->object_id);
    });
    for (const DecisionRecord* r : recs) {
      ordered_json j;
      j["video"] = v.name;
      j["frame"] = r->frame_index;
      j["object"] = r->object_id;
      j["p_gate"] = r->p_gate;
      j["decision"] = to_string(r->decision);
      j["flops"] = r->flops;
      os << j.dump() << '\n';
    }
  }
  return os.str();
}

std::string reuse_csv(const DatasetSummary& s) {
  std::ostringstream os;
  os << "video,object,frames,reuse_rate,flop_ratio\n";
  for (const auto& v : s.videos) {
    const std::uint64_t frames = v.objects.empty() ? 0 : v.objects.front().records.size();
    const std::uint64_t full_cost = frames && !v.objects.empty() ? v.full_flops / (frames * v.objects.size()) : 0;
    for (const auto& o : v.objects) {
      os << v.name << ',' << o.object_id << ',' << o.records.size() << ',' << format_double(o.reuse) << ','
         << format_double(full_cost ? object_flop_ratio(o, full_cost) : 0.0) << '\n';
    }
    os << v.name << ",all," << frames * v.objects.size() << ',' << format_double(v.reuse) << ','
       << format_double(v.flop_ratio()) << '\n';
  }
  return os.str();
}

std::string flop_report_csv(const DatasetSummary& s) {
  std::ostringstream os;
  os << "video,path,layer,flops\n";
  for (const auto& v : s.videos) {
    for (const auto& [key, flops] : v.ledger.per_layer()) {
      os << v.name << ',' << key.second << ',' << key.first << ',' << flops << '\n';
    }
  }
  return os.str();
}

GateConfig ablation_gate(double tau, GateMode mode, std::optional<double> tau2) {
  GateConfig g;
  g.tau = tau;
  g.mode = mode;
  if (mode == GateMode::fusion) {
    if (tau >= 1.0) {
      g.mode = GateMode::dynamic;  // no valid tau2 above 1; the band is empty anyway
    } else {
      g.tau2 = tau2 && *tau2 > tau && *tau2 <= 1.0 ? *tau2 : (tau + 1.0) / 2.0;
    }
  }
  g.validate();
  return g;
}

namespace {

struct EvalFlags {
  std::string checkpoint;
  std::vector<std::string> videos;
  double tau = 0.7;
  std::optional<double> tau2;
  std::string mode = "dynamic";
  std::string out = "eval_out";
  int ft_steps = 0;
  std::string refresh = "off";
};

Model<float> load_model(const std::string& path) { return Model<float>::from_checkpoint(load_checkpoint(path)); }

std::vector<VideoInput<float>> load_inputs(const std::vector<std::string>& dirs) {
  std::vector<VideoInput<float>> out;
  for (const auto& d : dirs) out.push_back(to_video_input<float>(load_video(d)));
  return out;
}

EvalOptions eval_options(const EvalFlags& f) {
  EvalOptions o;
  o.gate.tau = f.tau;
  o.gate.tau2 = f.tau2;
  o.gate.mode = parse_gate_mode(f.mode);
  o.gate.validate();
  o.tracker.fine_tune_steps = f.ft_steps;
  o.tracker.refresh = f.refresh == "on";
  return o;
}

int cmd_train(const std::string& config_path, const std::string& out, std::optional<std::uint64_t> seed,
              std::string log_path, std::ostream& os) {
  if (!fs::exists(config_path)) throw input_error("config file not found: " + config_path);
  ExperimentConfig cfg = parse_experiment_config(read_text_file(config_path));
  if (seed) cfg.train.seed = *seed;
  if (log_path.empty()) log_path = out + ".log.jsonl";
  if (fs::path(log_path).has_parent_path()) fs::create_directories(fs::path(log_path).parent_path());
  std::ofstream log(log_path, std::ios::binary);
  if (!log) throw std::runtime_error("cannot write " + log_path);

  Model<float> model(cfg.model, cfg.train.seed);
  const long every = std::max(1L, cfg.train.steps / 20);
  train(model, cfg.train, cfg.synth, &log, [&](const StepStats& st) {
    if (st.step % every == 0 || st.step + 1 == cfg.train.steps) {
      os << "step " << st.step << " loss " << st.loss << " p_gate " << st.mean_p_gate << " reuse "
         << st.reuse_fraction << "\n";
    }
  });
  Checkpoint ck = model.to_checkpoint();
  ck.meta["train.seed"] = std::to_string(cfg.train.seed);
  ck.meta["train.steps"] = std::to_string(cfg.train.steps);
  save_checkpoint(out, ck);
  os << "wrote " << out << " and " << log_path << "\n";
  return kExitOk;
}

int cmd_eval(const EvalFlags& f, std::ostream& os) {
  const EvalOptions opts = eval_options(f);
  const Model<float> model = load_model(f.checkpoint);
  const DatasetSummary s = evaluate_dataset(model, load_inputs(f.videos), opts);
  const fs::path dir(f.out);
  write_text_file(dir / "report.json", eval_report_json(s, opts));
  write_text_file(dir / "decisions.jsonl", decisions_jsonl(s));
  write_text_file(dir / "reuse.csv", reuse_csv(s));
  write_text_file(dir / "flops.csv", flop_report_csv(s));
  os << "J " << format_double(s.j) << " F " << format_double(s.f) << " JF " << format_double(s.jf) << " reuse_rate "
     << format_double(s.reuse) << " flop_ratio " << format_double(s.flop_ratio) << "\n";
  return kExitOk;
}

int cmd_ablate(const EvalFlags& f, const std::vector<double>& taus, const std::vector<std::string>& modes,
               std::ostream& os) {
  if (taus.empty() || modes.empty()) throw std::invalid_argument("ablate needs at least one tau and one mode");
  for (double t : taus) {
    if (!(t >= 0 && t <= 1)) throw std::invalid_argument("tau values must lie in [0, 1]");
  }
  const Model<float> model = load_model(f.checkpoint);
  const auto videos = load_inputs(f.videos);
  std::ostringstream csv;
  csv << "tau,mode,J,F,JF,reuse_rate,flop_ratio\n";
  std::vector<SvgPoint> points;
  for (double tau : taus) {
    for (const auto& m : modes) {
      EvalOptions opts = eval_options(f);
      opts.gate = ablation_gate(tau, parse_gate_mode(m), f.tau2);
      const DatasetSummary s = evaluate_dataset(model, videos, opts);
      csv << format_double(tau) << ',' << m << ',' << format_double(s.j) << ',' << format_double(s.f) << ','
          << format_double(s.jf) << ',' << format_double(s.reuse) << ',' << format_double(s.flop_ratio) << '\n';
      points.push_back({s.flop_ratio, s.jf, m, "tau=" + format_double(tau)});
      os << "tau " << format_double(tau) << " mode " << m << " JF " << format_double(s.jf) << " flop_ratio "
         << format_double(s.flop_ratio) << "\n";
    }
  }
  const fs::path dir(f.out);
  write_text_file(dir / "ablation.csv", csv.str());
  write_text_file(dir / "ablation.svg", svg_scatter("J&F vs compute", "FLOPs relative to full path", "J&F", points));
  return kExitOk;
}

int cmd_histogram(const std::vector<std::string>& dirs, double bin_width, const std::string& out, std::ostream& os) {
  if (!(bin_width > 0 && bin_width <= 1)) throw std::invalid_argument("--bin-width must lie in (0, 1]");
  std::vector<double> ious;
  for (const auto& d : dirs) {
    const VideoOnDisk v = load_video(d);
    if (v.labels.size() < 2) throw input_error(d + ": needs at least 2 ground-truth masks");
    std::set<int> ids;
    for (const auto& l : v.labels) ids.insert(l.labels.begin(), l.labels.end());
    ids.erase(0);
    for (int id : ids) {
      std::vector<BinaryMask> masks;
      for (const auto& l : v.labels) masks.push_back(l.object_mask(id));
      const auto c = consecutive_ious(masks);
      ious.insert(ious.end(), c.begin(), c.end());
    }
  }
  if (ious.empty()) throw input_error("no labelled objects found");
  const IoUHistogram h = make_histogram(ious, bin_width);
  const fs::path dir(out);
  std::ostringstream csv;
  write_histogram_csv(csv, h);
  write_text_file(dir / "histogram.csv", csv.str());
  std::vector<SvgBar> bars;
  for (std::size_t i = 0; i < h.bins(); ++i) {
    char label[48];
    std::snprintf(label, sizeof(label), "%.2g-%.2g", h.bin_lo(i), h.bin_hi(i));
    bars.push_back({label, h.fraction(i)});
  }
  write_text_file(dir / "histogram.svg",
                  svg_bar_chart("Consecutive-frame IoU", "IoU(t-1, t)", "fraction of pairs", bars));
  os << "pairs " << ious.size() << "\n";
  os << "fraction_iou_above_0.7 " << format_double(fraction_above(ious, 0.7)) << "\n";
  return kExitOk;
}

int cmd_synth(const std::string& config_path, const SynthConfig& overrides_base, const std::string& out, int count,
              std::uint64_t seed, const std::function<void(SynthConfig&)>& overrides, std::ostream& os) {
  SynthConfig sc = overrides_base;
  if (!config_path.empty()) {
    if (!fs::exists(config_path)) throw input_error("config file not found: " + config_path);
    sc = parse_experiment_config(read_text_file(config_path)).synth;
  }
  overrides(sc);
  sc.validate();
  if (count < 1) throw std::invalid_argument("--count must be at least 1");
  for (int i = 0; i < count; ++i) {
    const SynthSequence seq = synth_sequence(sc, mix_seed(seed, std::uint64_t(i)));
    VideoOnDisk v;
    v.frames = seq.frames;
    for (const auto& m : seq.masks) v.labels.push_back(label_map_from_mask(m));
    char name[32];
    std::snprintf(name, sizeof(name), "video_%04d", i);
    save_video(fs::path(out) / name, v);
  }
  os << "wrote " << count << " videos to " << out << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Reuse-gated video object segmentation"};
  app.require_subcommand(1);

  std::string config, checkpoint_out, log_path;
  std::optional<std::uint64_t> seed;
  auto* train_cmd = app.add_subcommand("train", "Train on synthetic sequences");
  train_cmd->add_option("--config", config, "JSON experiment config")->required();
  train_cmd->add_option("--out", checkpoint_out, "Checkpoint path")->required();
  train_cmd->add_option("--seed", seed, "Override train.seed");
  train_cmd->add_option("--log", log_path, "JSONL training log (default <out>.log.jsonl)");

  EvalFlags ef;
  auto add_eval_flags = [&](CLI::App* cmd, bool single_tau) {
    cmd->add_option("--checkpoint", ef.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
    cmd->add_option("videos", ef.videos, "Video directories")->required();
    if (single_tau) {
      cmd->add_option("--tau", ef.tau, "Reuse threshold")->check(CLI::Range(0.0, 1.0));
      cmd->add_option("--mode", ef.mode, "dynamic | always_full | copy | fusion")
          ->check(CLI::IsMember({"dynamic", "always_full", "copy", "fusion"}));
    }
    cmd->add_option("--tau2", ef.tau2, "Copy threshold for fusion mode");
    cmd->add_option("--out", ef.out, "Output directory");
    cmd->add_option("--ft-steps", ef.ft_steps, "Score-generator fine-tune steps on frame 0")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--refresh", ef.refresh, "Online score-generator refresh")->check(CLI::IsMember({"on", "off"}));
  };
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on videos");
  add_eval_flags(eval_cmd, true);

  std::vector<double> taus{0.5, 0.7, 0.9, 1.0};
  std::vector<std::string> modes{"dynamic", "copy", "fusion"};
  auto* ablate_cmd = app.add_subcommand("ablate", "Sweep tau and gate modes");
  add_eval_flags(ablate_cmd, false);
  ablate_cmd->add_option("--taus", taus, "Thresholds to sweep")->delimiter(',');
  ablate_cmd->add_option("--modes", modes, "Modes to sweep")->delimiter(',')
      ->check(CLI::IsMember({"dynamic", "always_full", "copy", "fusion"}));

  std::vector<std::string> hist_videos;
  double bin_width = 0.1;
  std::string hist_out = "histogram_out";
  auto* hist_cmd = app.add_subcommand("histogram", "Consecutive-frame IoU histogram of ground truth");
  hist_cmd->add_option("videos", hist_videos, "Video directories")->required();
  hist_cmd->add_option("--bin-width", bin_width, "Histogram bin width");
  hist_cmd->add_option("--out", hist_out, "Output directory");

  std::string synth_config, synth_out;
  int synth_count = 1, seq_len = 8;
  std::uint64_t synth_seed = 0;
  std::optional<int> vmin, vmax, size_min, size_max, distractors;
  std::optional<double> static_prob;
  bool axis_aligned = false;
  std::string shapes;
  auto* synth_cmd = app.add_subcommand("synth", "Write synthetic videos to disk");
  synth_cmd->add_option("--config", synth_config, "JSON config (synth section used)");
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();
  synth_cmd->add_option("--count", synth_count, "Number of videos");
  synth_cmd->add_option("--seed", synth_seed, "Base seed");
  synth_cmd->add_option("--seq-len", seq_len, "Frames per video");
  synth_cmd->add_option("--velocity-min", vmin);
  synth_cmd->add_option("--velocity-max", vmax);
  synth_cmd->add_option("--size-min", size_min);
  synth_cmd->add_option("--size-max", size_max);
  synth_cmd->add_option("--static-probability", static_prob);
  synth_cmd->add_option("--distractors", distractors);
  synth_cmd->add_option("--shapes", shapes, "square, disk or square,disk");
  synth_cmd->add_flag("--axis-aligned", axis_aligned);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitInput;
  }

  try {
    if (*train_cmd) return cmd_train(config, checkpoint_out, seed, log_path, out);
    if (*eval_cmd) return cmd_eval(ef, out);
    if (*ablate_cmd) return cmd_ablate(ef, taus, modes, out);
    if (*hist_cmd) return cmd_histogram(hist_videos, bin_width, hist_out, out);
    if (*synth_cmd) {
      return cmd_synth(synth_config, SynthConfig{}, synth_out, synth_count, synth_seed,
                       [&](SynthConfig& sc) {
                         sc.seq_len = seq_len;
                         if (vmin) sc.velocity_min = *vmin;
                         if (vmax) sc.velocity_max = *vmax;
                         if (size_min) sc.size_min = *size_min;
                         if (size_max) sc.size_max = *size_max;
                         if (static_prob) sc.static_probability = *static_prob;
                         if (distractors) sc.distractor_count = *distractors;
                         if (axis_aligned) sc.axis_aligned = true;
                         if (!shapes.empty()) {
                           sc.shapes.clear();
                           for (const auto& s : split(shapes, ',')) {
                             if (s == "square") sc.shapes.push_back(ShapeKind::square);
                             else if (s == "disk") sc.shapes.push_back(ShapeKind::disk);
                             else throw std::invalid_argument("unknown shape '" + s + "'");
                           }
                         }
                       },
                       out);
    }
  } catch (const NonFiniteLoss& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  }
  return kExitInput;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"reusegate"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(int(argv.size()), argv.data(), out, err);
}

}  // namespace reusegate
