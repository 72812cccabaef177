#include "cnrf/cli.hpp"

#include <iostream>

int main(int argc, char** argv)
{
    return cnrf::run_cli(argc, argv, std::cout, std::cerr);
}
