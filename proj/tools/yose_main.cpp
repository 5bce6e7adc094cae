#include "yose/cli.hpp"

int main(int argc, char** argv) { return yose::cli::dispatch(argc, argv); }
