#include "repe/cli.hpp"

int main(int argc, char** argv) { return repe::cli_main(argc, argv); }
