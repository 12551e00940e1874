#include <iostream>

#include "robustclf/cli.hpp"

int main(int argc, char** argv) { return robustclf::run_cli(argc, argv, std::cout, std::cerr); }
