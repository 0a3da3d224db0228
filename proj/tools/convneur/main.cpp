#include "cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return convneur::cli::run(argc, argv, std::cout, std::cerr); }
