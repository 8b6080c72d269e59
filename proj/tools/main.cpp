#include "cli.hpp"

int main(int argc, char** argv) { return ucil::cli::run(argc, argv); }
