#include <iostream>

#include "shala/commands.hpp"

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  return shala::run_cli(argc, argv, std::cout, std::cerr);
}
