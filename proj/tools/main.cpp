#include "produce/cli.hpp"

int main(int argc, char** argv) { return produce::run_cli(argc, argv); }
