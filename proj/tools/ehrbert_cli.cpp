// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#include "ehrbert/cli/app.hpp"

int main(int argc, char** argv) { return ehrbert::cli::run(argc, argv); }
