#include "mugs/cli.hpp"

int main(int argc, char** argv) { return mugs::cli_main(argc, argv); }
