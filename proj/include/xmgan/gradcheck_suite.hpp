#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

// Central-difference checks of every differentiable operation and of the full
// generator and discriminator losses, repeated over several seeds.
namespace xmgan {

struct GradcheckEntry {
  std::string name;
  double max_rel_error = 0.0;  // worst case over all seeds
  std::size_t checks = 0;
  std::size_t coordinates = 0;
  std::size_t kinks = 0;  // coordinates skipped because a kink lies within +-h
};

std::vector<GradcheckEntry> run_gradcheck_suite(std::size_t seeds = 10, double h = 1e-5,
                                                std::ostream* log = nullptr);

// One line per entry.
std::string format_gradcheck(const std::vector<GradcheckEntry>& entries);
double max_error(const std::vector<GradcheckEntry>& entries);

}  // namespace xmgan
