#include <vector>
#include <string>

#include "hgvt/analysis.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return hgvt::cli_dispatch(args);
}
