#include "stressvit/cli.hpp"

int main(int argc, char** argv) { return stressvit::cli::main_entry(argc, argv); }
