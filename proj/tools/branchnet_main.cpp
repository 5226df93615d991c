#include "branchtopo/cli.hpp"

int main(int argc, char** argv) { return branchtopo::cli::run_cli(argc, argv); }
