// Copyright (c) 2026 centermask-cpp authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>

int main() {
    std::puts("centermask CLI placeholder");
    return 0;
}
