#include <string>
#include <vector>

#include "phpav/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return phpav::cli_main(args);
}
