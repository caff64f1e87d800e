#include "mdsnn/cli.hpp"

int main(int argc, char** argv) { return mdsnn::cli::run(argc, argv); }
