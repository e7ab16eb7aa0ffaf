#include <iostream>

#include "wstab/cli.hpp"

int main(int argc, char** argv) { return wstab::run_cli(argc, argv, std::cout, std::cerr); }
