#include "fewshot/harness.hpp"

int main(int argc, char** argv) { return fewshot::cli_dispatch(argc, argv); }
