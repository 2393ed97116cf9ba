#pragma once

#include <cstdint>

namespace faqd::flops {

// Multiply counter for the instrumented FA/FFA kernels (the benchmark and
// verification paths). Kernels add their counts in bulk, so the counter does
// not perturb timing. Single training-loop process; not thread-safe across
// concurrent benchmark runs.
inline std::uint64_t& counter() {
  static std::uint64_t c = 0;
  return c;
}

inline void reset() { counter() = 0; }
inline void add(std::uint64_t n) { counter() += n; }
inline std::uint64_t count() { return counter(); }

// Closed-form multiply counts of the instrumented kernels. The exact-FA
// kernel spends (Ct + Cs) multiplies per affinity pair plus one square:
// Theta(N^2 C). The sketched kernel spends two matrix-vector products per
// feature map per sketch column plus N squares: Theta(k N C).
inline std::uint64_t fa_loss_multiplies(std::int64_t n, std::int64_t ct, std::int64_t cs) {
  return static_cast<std::uint64_t>(n) * static_cast<std::uint64_t>(n) *
         static_cast<std::uint64_t>(ct + cs + 1);
}

inline std::uint64_t ffa_loss_multiplies(std::int64_t n, std::int64_t ct, std::int64_t cs,
                                         std::int64_t k) {
  return static_cast<std::uint64_t>(k) * static_cast<std::uint64_t>(n) *
         static_cast<std::uint64_t>(2 * ct + 2 * cs + 1);
}

}  // namespace faqd::flops
