#pragma once

#include "reusegate/io.hpp"
#include "reusegate/pipeline.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace reusegate {

enum ExitCode : int { kExitOk = 0, kExitInput = 2, kExitNumeric = 3 };

/// Unweighted means over videos.
struct DatasetSummary {
  std::vector<VideoResult> videos;
  double j = 0, f = 0, jf = 0, reuse = 0, flop_ratio = 0;
};

DatasetSummary evaluate_dataset(const Model<float>& model, const std::vector<VideoInput<float>>& videos,
                                const EvalOptions& opts);

/// JSON report: config, per-video and per-object breakdown, aggregate.
std::string eval_report_json(const DatasetSummary& summary, const EvalOptions& opts);

/// One JSON line per (frame, object) decision.
std::string decisions_jsonl(const DatasetSummary& summary);

/// video,object,frames,reuse_rate,flop_ratio
std::string reuse_csv(const DatasetSummary& summary);

/// video,path,layer,flops
std::string flop_report_csv(const DatasetSummary& summary);

/// Fusion needs tau2 > tau: an explicit tau2 is used when it is valid,
/// otherwise the midpoint of [tau, 1]. At tau = 1 every mode is the full path.
GateConfig ablation_gate(double tau, GateMode mode, std::optional<double> tau2);

/// Entry point for the `reusegate` executable: train, eval, ablate,
/// histogram, synth.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace reusegate
