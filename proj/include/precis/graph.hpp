#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "precis/error.hpp"

namespace precis {

/// Undirected simple graph on d nodes stored as a symmetric boolean matrix.
class Adjacency {
public:
    Adjacency() = default;
    explicit Adjacency(std::size_t d) : d_(d), bits_(d * d, 0) {}

    std::size_t dim() const noexcept { return d_; }

    bool operator()(std::size_t i, std::size_t j) const { return bits_[i * d_ + j] != 0; }

    void set(std::size_t i, std::size_t j, bool on = true) {
        if (i == j) throw InvalidArgument("Adjacency: self loops are not edges");
        if (i >= d_ || j >= d_) throw InvalidArgument("Adjacency: node index out of range");
        bits_[i * d_ + j] = bits_[j * d_ + i] = on ? 1 : 0;
    }

    std::size_t edge_count() const {
        std::size_t c = 0;
        for (std::size_t i = 0; i < d_; ++i)
            for (std::size_t j = i + 1; j < d_; ++j) c += bits_[i * d_ + j];
        return c;
    }

    std::size_t degree(std::size_t i) const {
        std::size_t c = 0;
        for (std::size_t j = 0; j < d_; ++j) c += bits_[i * d_ + j];
        return c;
    }

    /// Edges (i, j) with i < j in row-major order.
    std::vector<std::pair<std::size_t, std::size_t>> edges() const {
        std::vector<std::pair<std::size_t, std::size_t>> out;
        for (std::size_t i = 0; i < d_; ++i)
            for (std::size_t j = i + 1; j < d_; ++j)
                if (bits_[i * d_ + j]) out.emplace_back(i, j);
        return out;
    }

    friend bool operator==(const Adjacency&, const Adjacency&) = default;

private:
    std::size_t d_ = 0;
    std::vector<std::uint8_t> bits_;
};

}  // namespace precis
