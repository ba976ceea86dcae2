// Copyright 2026 The pros-ucdr Authors
// SPDX-License-Identifier: Apache-2.0

#include "pros/cli.hpp"

int main(int argc, char** argv) { return pros::cli::run(argc, argv); }
