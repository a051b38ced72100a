#pragma once

#include <cstdlib>
#include <string>

// Character corpus used by training tests: $AGGLO_TEXT8 if set, otherwise
// the stand-in generated at build time.
inline std::string test_corpus_path() {
  if (const char* env = std::getenv("AGGLO_TEXT8"); env != nullptr && *env != '\0') return env;
  return AGGLO_TEST_CORPUS;
}
