#include <iostream>

#include "cli.hpp"

int main(int argc, char** argv) { return cnncert::cli::run(argc, argv, std::cout, std::cerr); }
