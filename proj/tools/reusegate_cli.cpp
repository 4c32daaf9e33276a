#include "reusegate/commands.hpp"

#include <iostream>

int main(int argc, char** argv) { return reusegate::run_cli(argc, argv, std::cout, std::cerr); }
