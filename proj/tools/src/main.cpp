#include <iostream>

#include "egf_tools/cli.hpp"

int main(int argc, char** argv) {
  return egf::tools::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
