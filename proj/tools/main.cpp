#include <iostream>

#include "evln/cli.hpp"

int main(int argc, char** argv) { return evln::run_cli(argc, argv, std::cout, std::cerr); }
