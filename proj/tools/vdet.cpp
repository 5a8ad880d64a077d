#include <string>
#include <vector>

#include "vdet/cli.hpp"

int main(int argc, char** argv) {
  return vdet::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
