#include <iostream>

#include "defgen/cli.hpp"

int main(int argc, char** argv) {
  return defgen::cli::run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
