#include <vector>

#include "care/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return care::cli::run(args);
}
