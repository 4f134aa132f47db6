#include "pandora/cli.hpp"

int main(int argc, char** argv) { return pandora::cli::dispatch(argc, argv); }
