#include <iostream>

#include "amoesim/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return amoesim::run_cli(args, std::cout, std::cerr);
}
