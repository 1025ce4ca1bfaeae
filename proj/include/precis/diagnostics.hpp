#pragma once

#include <atomic>
#include <cstddef>

namespace precis::diagnostics {

// Process-wide audit counters. Library code bumps them whenever it produces a
// result; test drivers read them to assert an invariant held across every
// run in the process, not just the ones a test inspected directly.
struct Counters {
    std::atomic<std::size_t> emRuns{0};
    std::atomic<std::size_t> emMonotonicityViolations{0};
    std::atomic<std::size_t> averagedEstimates{0};
    std::atomic<std::size_t> averagedNotPositiveDefinite{0};
    std::atomic<std::size_t> boundViolations{0};
};

inline Counters& counters() {
    static Counters c;
    return c;
}

/// Slack allowed between consecutive objective values before a run counts as non-monotone.
inline constexpr double kMonotonicitySlack = 1e-8;

}  // namespace precis::diagnostics
