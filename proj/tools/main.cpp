#include <string>
#include <vector>

#include "xfake_cli/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return xfake::cli::run_command(args);
}
