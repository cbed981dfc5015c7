#include "nmfnet/cli.hpp"
#include "nmfnet/runtime.hpp"

int main(int argc, char** argv) {
  nmfnet::tune_allocator();
  return nmfnet::cli::run(argc, argv);
}
