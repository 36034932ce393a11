#include "diperf/cli.h"

int main(int argc, char** argv) { return diperf::run_cli(argc, argv); }
