#include <iostream>

#include "specmerge/cli.hpp"

int main(int argc, char **argv) { return specmerge::cli::run(argc, argv, std::cout, std::cerr); }
