#include "cesaa/commands.hpp"

int main(int argc, char** argv) { return cesaa::cli_main(argc, argv); }
