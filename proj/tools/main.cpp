#include "evalnet/cli.hpp"

int main(int argc, char** argv) { return evalnet::run_cli(argc, argv); }
