#include <iostream>

#include "flowgate/cli.hpp"

int main(int argc, char** argv) {
  return flowgate::run_cli({argv + 1, argv + argc}, std::cout, std::cerr);
}
