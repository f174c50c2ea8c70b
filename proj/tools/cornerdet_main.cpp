#include "cornerdet/cli.hpp"

int main(int argc, char** argv) { return cornerdet::cli_main(argc, argv); }
