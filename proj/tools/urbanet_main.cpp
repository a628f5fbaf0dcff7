#include "urbanet/cli.hpp"

int main(int argc, char** argv) { return urbanet::run_cli(argc, argv); }
