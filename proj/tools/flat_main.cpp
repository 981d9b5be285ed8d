#include <iostream>

#include "flat/cli.hpp"

int main(int argc, char** argv) {
  return flat::run_cli(argc, argv, std::cin, std::cout, std::cerr);
}
