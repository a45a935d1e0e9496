#include "lorablend/commands.hpp"

#include <iostream>

int main(int argc, char** argv) {
    return lorablend::cli::run_cli(argc, argv, std::cout, std::cerr);
}
