#include "iqvic/commands.hpp"

int main(int argc, char** argv) { return iqvic::run_cli(argc, argv); }
