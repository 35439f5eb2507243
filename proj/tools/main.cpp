#include "deften/cli.hpp"

int main(int argc, char** argv) { return deften::run_cli(argc, argv); }
