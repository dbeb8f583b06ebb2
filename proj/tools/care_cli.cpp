#include "care/cli.hpp"

#include <iostream>

int main(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    return care::run_cli(std::move(args), std::cin, std::cout, std::cerr);
}
