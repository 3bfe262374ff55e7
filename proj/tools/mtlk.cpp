#include <malloc.h>

#include <iostream>

#include "mtlk/commands.hpp"

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
  return mtlk::run_cli(argc, argv, std::cout, std::cerr);
}
