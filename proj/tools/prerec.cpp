#include <iostream>

#include "prerec/cli.hpp"

int main(int argc, char** argv) { return prerec::cli::run(argc, argv, std::cout, std::cerr); }
