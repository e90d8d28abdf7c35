#include <iostream>

#include "osm/cli/app.hpp"

int main(int argc, char** argv) { return osm::cli::run_cli(argc, argv, std::cout, std::cerr); }
