#include <iostream>

#include "tnet/cli.hpp"

int main(int argc, char** argv) {
    return tnet::cli::run(argc, argv, std::cout, std::cerr);
}
