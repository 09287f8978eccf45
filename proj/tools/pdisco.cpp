#include "pdisco/cli.hpp"

int main(int argc, char** argv) { return pdisco::cli::dispatch(argc, argv); }
