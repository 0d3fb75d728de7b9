#include <iostream>

#include "dybnn/cli.hpp"

int main(int argc, char** argv) { return dybnn::cli::run(argc, argv, std::cout, std::cerr); }
