#include "esimft/cli.hpp"

int main(int argc, char** argv) { return esimft::run_cli(argc, argv); }
