#include "cli_app.hpp"

int main(int argc, char** argv) { return exmap::cli::run_cli(argc, argv); }
