#include "cap/cli.hpp"

int main(int argc, char** argv) { return cap::cli_main(argc, argv); }
