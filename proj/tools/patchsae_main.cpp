#include "patchsae/cli.hpp"

int main(int argc, char** argv) { return patchsae::run_cli(argc, argv); }
