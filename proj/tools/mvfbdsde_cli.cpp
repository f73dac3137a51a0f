#include "mvfbdsde/cli.hpp"

int main(int argc, char** argv) { return mvfb::cli_main(argc, argv); }
