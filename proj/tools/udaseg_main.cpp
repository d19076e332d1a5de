#include "udaseg/cli.hpp"

int main(int argc, char** argv) { return udaseg::run(argc, argv); }
