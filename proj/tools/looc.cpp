#include "looc/cli.hpp"

int main(int argc, char** argv) { return looc::cli::run(argc, argv); }
