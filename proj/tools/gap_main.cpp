#include <iostream>

#include "gap/cli.hpp"

int main(int argc, char** argv) { return gap::cli::run(argc, argv, std::cout, std::cerr); }
