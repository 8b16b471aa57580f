#include "cli.hpp"

int main(int argc, char** argv) { return mkfa::run_cli(argc, argv); }
