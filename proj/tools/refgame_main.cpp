#include "refgame/io.hpp"

int main(int argc, char** argv) { return refgame::io::run_main(argc, argv); }
