#include <string>
#include <vector>

#include "robustctl/cli.hpp"

int main(int argc, char** argv) {
  return rctl::run(std::vector<std::string>(argv + 1, argv + argc));
}
