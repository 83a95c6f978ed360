// Acceptance gate: every criterion at full size, one line each.
#include <iostream>

#include "dkv/checks.hpp"
#include "dkv/model.hpp"

int main() {
  dkv::set_kernel_threads(1);
  const auto results = dkv::checks::run_all(dkv::checks::Sizes::full(), [](const auto& r) {
    std::cerr << "  finished [" << r.id << "] in " << r.seconds << "s\n";
  });
  return dkv::checks::print_table(results, std::cout) ? 0 : 1;
}
