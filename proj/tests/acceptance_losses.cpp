// Whole-loss gradient checks for the acceptance run; built against the
// double-precision library. Prints one "name checked max_err tol" line each.
#include <cstdio>
#include <type_traits>

#include "grad_suite.hpp"

static_assert(std::is_same_v<rmmnav::Scalar, double>, "link against rmmnav_f64");

int main() {
  bool ok = true;
  for (const auto& r : gradsuite::loss_checks()) {
    std::printf("%s|%d|%.3e|%.0e\n", r.name.c_str(), r.checked, r.max_err, r.tol);
    ok = ok && r.ok();
  }
  return ok ? 0 : 1;
}
