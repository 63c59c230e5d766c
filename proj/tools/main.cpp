#include "cli.hpp"

int main(int argc, char** argv) { return xmodal::cli::dispatch(argc, argv); }
