#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace osm::cli {

struct SuiteResult {
  std::string name;
  std::size_t instances = 0;
  double worst = 0.0;  // worst error observed
  double tolerance = 0.0;
  bool passed = false;
};

// Central-difference checks (eps 1e-5, 64-bit) of every tape primitive, the
// orthogonality loss, the hard-concrete gate, CTC and a composite Step 1 loss.
std::vector<SuiteResult> gradient_suite(int instances = 20, std::uint64_t seed = 7);

// Exhaustive-oracle checks: prefix selection, orthogonality closed form and
// brute-force CTC.
std::vector<SuiteResult> oracle_suite(std::uint64_t seed = 11);

// Prints one line per result; returns true when all passed.
bool print_results(std::ostream& os, const std::vector<SuiteResult>& results);

}  // namespace osm::cli
