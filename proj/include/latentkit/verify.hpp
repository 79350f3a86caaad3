#pragma once

#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace latentkit {

enum class FaultMode { None, FlipClipDirection };

struct InvariantResult {
    bool pass = false;
    double observed = 0.0;
    double tolerance = 0.0;
    std::string detail;
};

struct InvariantEntry {
    std::string id;     // module.name
    std::string module; // scope key
    std::function<InvariantResult()> run;
};

const std::vector<InvariantEntry>& invariant_registry();

// Expected per-module entry counts; the registry-coverage invariant checks
// the registry against this table.
const std::map<std::string, int>& expected_invariant_counts();

// Runs every invariant in scope ("all" or a module name); prints one line per
// invariant; returns 0 when everything passes, 1 otherwise.
int run_verify(const std::string& scope, std::ostream& out, FaultMode fault = FaultMode::None);

} // namespace latentkit
