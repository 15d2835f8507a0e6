#include <iostream>
#include <string>
#include <vector>

#include "mikecoco/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return mikecoco::cli::run(args, std::cout, std::cerr);
}
