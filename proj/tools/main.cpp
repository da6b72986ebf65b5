#include "fieldprobe/cli.hpp"

int main(int argc, char** argv) { return fieldprobe::run_cli(argc, argv); }
