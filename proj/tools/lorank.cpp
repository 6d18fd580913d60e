#include "lorank/cli.hpp"

int main(int argc, char** argv) { return lorank::cli_main(argc, argv); }
