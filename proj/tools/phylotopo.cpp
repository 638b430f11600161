#include <malloc.h>

#include <iostream>

#include "phylotopo/cli.hpp"

int main(int argc, char** argv) {
  // Keep freed training buffers in the heap instead of returning them to the kernel every step.
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return phylotopo::cli::dispatch({argv + 1, argv + argc}, std::cout, std::cerr);
}
