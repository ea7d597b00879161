#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "voxrnn/errors.hpp"
#include "voxrnn/numerics.hpp"
#include "voxrnn/recurrent.hpp"
#include "voxrnn/rng.hpp"

namespace voxrnn {

/// Causal dot-product attention stack used only as the benchmark baseline.
/// Same width, depth, head count and feed-forward block as the recurrent
/// stack; no positional encoding; forward inference only.
struct AttentionLayer {
    std::vector<float> ln1, ln2;
    Matrix w_q, w_k, w_v, w_o, w_up, w_down;
};

struct AttentionParams {
    BlockConfig config;
    std::vector<AttentionLayer> layers;

    static AttentionParams init(const BlockConfig& c, SeededRng& rng, double scale = 0.02) {
        c.validate();
        AttentionParams p{c, {}};
        const std::size_t d = c.d_model;
        for (std::size_t l = 0; l < c.n_layers; ++l) {
            AttentionLayer layer{std::vector<float>(d, 1.0f), std::vector<float>(d, 1.0f),
                                 Matrix(d, d),
                                 Matrix(d, d),
                                 Matrix(d, d),
                                 Matrix(d, d),
                                 Matrix(d, c.ffn_dim()),
                                 Matrix(c.ffn_dim(), d)};
            for (Matrix* m : {&layer.w_q, &layer.w_k, &layer.w_v, &layer.w_o, &layer.w_up, &layer.w_down})
                for (auto& v : m->values()) v = static_cast<float>(rng.normal() * scale);
            p.layers.push_back(std::move(layer));
        }
        return p;
    }
};

/// Per-layer key/value rows for every position seen so far.
struct KvCache {
    std::vector<std::vector<float>> keys, values;
    std::size_t length = 0;

    explicit KvCache(const BlockConfig& c) : keys(c.n_layers), values(c.n_layers) {}

    std::size_t byte_size() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l < keys.size(); ++l) n += (keys[l].size() + values[l].size()) * sizeof(float);
        return n;
    }

    /// Drops positions >= len.
    void truncate(std::size_t len, std::size_t d_model) {
        if (len > length) throw parameter_error("KvCache::truncate: cannot grow");
        for (std::size_t l = 0; l < keys.size(); ++l) {
            keys[l].resize(len * d_model);
            values[l].resize(len * d_model);
        }
        length = len;
    }
};

namespace detail {

inline std::vector<float> project_row(std::span<const float> x, const Matrix& w) {
    std::vector<float> out(w.cols());
    kernel::matmul(x.data(), 1, x.size(), w.data(), w.cols(), out.data());
    return out;
}

} // namespace detail

/// Appends one position to the cache and returns the stack output for it.
inline std::vector<float> attention_step(const AttentionParams& p, std::span<const float> x, KvCache& cache) {
    const BlockConfig& c = p.config;
    const std::size_t d = c.d_model, nh = c.n_heads, n = c.head_dim();
    if (x.size() != d) throw shape_error("attention_step: input width " + std::to_string(x.size()) + " != " +
                                         std::to_string(d));
    std::vector<float> h(x.begin(), x.end()), xn(d), z(d);
    const std::size_t len = cache.length + 1;
    const double scale = 1.0 / std::sqrt(static_cast<double>(n));
    std::vector<double> score(len);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const AttentionLayer& L = p.layers[l];
        rms_norm_into<float>(h, L.ln1, kNormEps, xn);
        const auto q = detail::project_row(xn, L.w_q);
        const auto k = detail::project_row(xn, L.w_k);
        const auto v = detail::project_row(xn, L.w_v);
        cache.keys[l].insert(cache.keys[l].end(), k.begin(), k.end());
        cache.values[l].insert(cache.values[l].end(), v.begin(), v.end());
        const float* K = cache.keys[l].data();
        const float* V = cache.values[l].data();
        for (std::size_t hd = 0; hd < nh; ++hd) {
            const std::size_t off = hd * n;
            double mx = -INFINITY;
            for (std::size_t t = 0; t < len; ++t) {
                double s = 0.0;
                for (std::size_t j = 0; j < n; ++j)
                    s += static_cast<double>(q[off + j]) * static_cast<double>(K[t * d + off + j]);
                score[t] = s * scale;
                mx = std::max(mx, score[t]);
            }
            double total = 0.0;
            for (std::size_t t = 0; t < len; ++t) {
                score[t] = std::exp(score[t] - mx);
                total += score[t];
            }
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t t = 0; t < len; ++t) acc += score[t] * static_cast<double>(V[t * d + off + j]);
                z[off + j] = static_cast<float>(acc / total);
            }
        }
        const auto o = detail::project_row(z, L.w_o);
        for (std::size_t i = 0; i < d; ++i) h[i] += o[i];
        rms_norm_into<float>(h, L.ln2, kNormEps, xn);
        auto up = detail::project_row(xn, L.w_up);
        for (auto& u : up) u = u > 0.0f ? static_cast<float>(static_cast<double>(u) * u) : 0.0f;
        const auto down = detail::project_row(up, L.w_down);
        for (std::size_t i = 0; i < d; ++i) h[i] += down[i];
    }
    cache.length = len;
    return h;
}

} // namespace voxrnn
