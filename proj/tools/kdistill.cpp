#include <iostream>

#include "kd/commands.hpp"

int main(int argc, char** argv) { return kd::cli::run_cli(argc, argv, std::cout, std::cerr); }
