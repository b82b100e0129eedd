#include <iostream>

#include "nlsg/cli.hpp"

int main(int argc, char** argv) { return nlsg::run_cli(argc, argv, std::cout, std::cerr); }
