#pragma once

// Binary active-position maps used by spike sparse convolution. A position is
// active when it is not masked; coarser resolutions are derived by
// any-coverage max-pooling so a coarse cell stays active if any covered
// fine-grained pixel is active.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <utility>
#include <vector>

namespace sfa::mim {

struct SparsityMap {
    int h = 0, w = 0;
    std::vector<std::uint8_t> active;  // row-major, 1 = unmasked

    SparsityMap() = default;
    SparsityMap(int h_, int w_, std::uint8_t fill = 1)
        : h(h_), w(w_), active(static_cast<std::size_t>(h_) * w_, fill) {}

    std::uint8_t at(int y, int x) const { return active[static_cast<std::size_t>(y) * w + x]; }
    std::uint8_t& at(int y, int x) { return active[static_cast<std::size_t>(y) * w + x]; }

    bool all_active() const {
        for (auto v : active)
            if (!v) return false;
        return true;
    }

    std::int64_t active_count() const {
        std::int64_t c = 0;
        for (auto v : active) c += v;
        return c;
    }

    SparsityMap downsample2() const {
        SparsityMap out((h + 1) / 2, (w + 1) / 2, 0);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (at(y, x)) out.at(y / 2, x / 2) = 1;
        return out;
    }
};

// Maps for every resolution a model touches, keyed by (h, w).
struct SparsityPyramid {
    std::map<std::pair<int, int>, SparsityMap> levels;

    static SparsityPyramid build(const SparsityMap& base, int num_levels) {
        SparsityPyramid p;
        SparsityMap cur = base;
        p.levels[{cur.h, cur.w}] = cur;
        for (int i = 1; i < num_levels; ++i) {
            cur = cur.downsample2();
            p.levels[{cur.h, cur.w}] = cur;
        }
        return p;
    }

    const std::vector<std::uint8_t>* at(int h, int w) const {
        auto it = levels.find({h, w});
        if (it == levels.end())
            throw std::runtime_error("SparsityPyramid: no map for resolution " + std::to_string(h) +
                                     "x" + std::to_string(w));
        return &it->second.active;
    }
};

}  // namespace sfa::mim
