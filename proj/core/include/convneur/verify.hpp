#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

namespace convneur {

struct SuiteResult {
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

struct VerifyOptions {
    std::vector<std::string> only;  // empty: every suite
    std::size_t seeds = 20;
    // Negative control: corrupt the backward rule of this op (e.g. "matmul").
    std::string broken_backward;
};

struct SuiteInfo {
    std::string name;
    std::string description;
};

std::vector<SuiteInfo> verify_suites();

// Throws UsageError if `only` names an unknown suite.
std::vector<SuiteResult> run_verification(const VerifyOptions& options);

}  // namespace convneur
