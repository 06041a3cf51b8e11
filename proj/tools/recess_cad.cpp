#include <iostream>

#include "recess/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return recess::cli::dispatch(args, std::cout, std::cerr);
}
