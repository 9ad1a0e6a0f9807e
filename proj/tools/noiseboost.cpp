#include "nb/cli.hpp"

int main(int argc, char** argv) { return nb::cli::run_main(argc, argv); }
