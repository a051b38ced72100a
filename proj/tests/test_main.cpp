#define DOCTEST_CONFIG_IMPLEMENT
#include "agglo/tensor.hpp"
#include "doctest.h"

int main(int argc, char** argv) {
  agglo::retain_freed_memory();
  doctest::Context ctx(argc, argv);
  return ctx.run();
}
