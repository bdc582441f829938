#include "miam/cli.hpp"

int main(int argc, char** argv) { return miam::cli::run(argc, argv); }
