#include <iostream>

#include "diffvar/cli.hpp"

int main(int argc, char** argv) { return diffvar::cli::main(argc, argv, std::cout, std::cerr); }
