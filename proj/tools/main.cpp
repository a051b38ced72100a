#include <iostream>

#include "agglo/tensor.hpp"
#include "cli.hpp"

int main(int argc, char** argv) {
  agglo::retain_freed_memory();
  return agglo::cli::run(argc, argv, std::cout, std::cerr);
}
