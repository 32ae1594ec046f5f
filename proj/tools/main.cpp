#include <iostream>

#include "deltascope/cli.hpp"

int main(int argc, char** argv) { return deltascope::run_cli(argc, argv, std::cout, std::cerr); }
