#include <iostream>

#include "segadv/cli.hpp"

int main(int argc, char** argv) { return segadv::cli::run(argc, argv, std::cout, std::cerr); }
