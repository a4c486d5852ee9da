#include "tsgm/cli.hpp"

int main(int argc, char** argv) { return tsgm::cli::main_entry(argc, argv); }
