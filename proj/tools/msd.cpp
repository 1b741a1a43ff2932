// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

#include "msd/cli.hpp"

int main(int argc, char** argv)
{
    return msd::run_cli(argc, argv);
}
