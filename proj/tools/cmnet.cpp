#include "cmnet/cli.hpp"

int main(int argc, char** argv) { return cmnet::run_cli(argc, argv); }
