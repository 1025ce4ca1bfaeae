#pragma once

// Reproducible random streams. Every draw in the toolkit comes from a
// substream keyed by (root seed, path...), e.g. (seed, iteration, row), so
// results do not depend on evaluation order or thread scheduling.

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace precis {

using Engine = std::mt19937_64;

/// Stable purpose tags for substream paths.
enum class Stream : std::uint64_t {
    Graph = 1,
    Clean = 2,
    Noise = 3,
    Impute = 4,
};

inline Engine substream(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
    std::vector<std::uint32_t> words;
    words.reserve(2 * (path.size() + 1));
    auto push = [&](std::uint64_t v) {
        words.push_back(static_cast<std::uint32_t>(v & 0xffffffffULL));
        words.push_back(static_cast<std::uint32_t>(v >> 32));
    };
    push(seed);
    for (auto p : path) push(p);
    std::seed_seq seq(words.begin(), words.end());
    return Engine(seq);
}

/// Standard normal draws from one engine.
class NormalStream {
public:
    explicit NormalStream(Engine engine) : engine_(std::move(engine)) {}

    double operator()() { return dist_(engine_); }
    double uniform() { return unif_(engine_); }

private:
    Engine engine_;
    std::normal_distribution<double> dist_{0.0, 1.0};
    std::uniform_real_distribution<double> unif_{0.0, 1.0};
};

}  // namespace precis
