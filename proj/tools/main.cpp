#include <string>
#include <vector>

#include "weightzoo/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return weightzoo::cli::run(args);
}
