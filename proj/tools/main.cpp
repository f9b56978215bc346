#include "cli.hpp"

int main(int argc, char** argv) { return spinectx::cli::run_cli(argc, argv); }
