#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "voxrnn/errors.hpp"
#include "voxrnn/numerics.hpp"
#include "voxrnn/rng.hpp"

namespace voxrnn {

struct BlockConfig {
    std::size_t d_model = 128;
    std::size_t n_heads = 4;
    std::size_t n_layers = 4;

    std::size_t head_dim() const { return d_model / n_heads; }
    std::size_t ffn_dim() const { return 4 * d_model; }

    // n_layers == 0 is accepted: an empty stack is the identity map.
    void validate() const {
        if (d_model == 0 || n_heads == 0)
            throw config_error("block config: d_model and n_heads must be >= 1");
        if (d_model % n_heads != 0)
            throw config_error("block config: d_model " + std::to_string(d_model) +
                               " is not divisible by n_heads " + std::to_string(n_heads));
    }

    friend bool operator==(const BlockConfig&, const BlockConfig&) = default;
};

inline constexpr double kKeyNormEps = 1e-6;
// Pre-activation ranges for the decay and in-context-rate gates. Inside these
// ranges exp(-exp(.)) and logistic(.) stay strictly inside (0,1) in f32.
inline constexpr double kDecayRawMin = -10.0;
inline constexpr double kDecayRawMax = 4.0;
inline constexpr double kRateRawLimit = 15.0;
// w_raw bias such that exp(-exp(bias)) == 0.9
inline const double kInitDecayBias = std::log(-std::log(0.9));

template <class T>
struct LayerParams {
    std::vector<T> ln1;
    std::vector<T> mu_time;
    basic_matrix<T> w_r, w_k, w_v, w_w;
    std::vector<T> bias_w;
    basic_matrix<T> w_a;
    std::vector<T> bias_a;
    basic_matrix<T> w_g;
    std::vector<T> ln_x;
    basic_matrix<T> w_o;
    std::vector<T> ln2;
    std::vector<T> mu_channel;
    basic_matrix<T> w_up, w_down;

    LayerParams() = default;
    explicit LayerParams(const BlockConfig& c)
        : ln1(c.d_model), mu_time(c.d_model), w_r(c.d_model, c.d_model),
          w_k(c.d_model, c.d_model), w_v(c.d_model, c.d_model), w_w(c.d_model, c.d_model),
          bias_w(c.d_model), w_a(c.d_model, c.d_model), bias_a(c.d_model),
          w_g(c.d_model, c.d_model), ln_x(c.d_model), w_o(c.d_model, c.d_model), ln2(c.d_model),
          mu_channel(c.d_model), w_up(c.d_model, c.ffn_dim()), w_down(c.ffn_dim(), c.d_model) {}

    /// Visits every tensor in checkpoint order as (name, span).
    template <class F>
    void visit(F&& f) {
        visit_impl(*this, f);
    }
    template <class F>
    void visit(F&& f) const {
        visit_impl(*this, f);
    }

    friend bool operator==(const LayerParams&, const LayerParams&) = default;

private:
    template <class Self, class F>
    static void visit_impl(Self& s, F& f) {
        f("ln1", std::span(s.ln1));
        f("mu_time", std::span(s.mu_time));
        f("w_r", s.w_r.values());
        f("w_k", s.w_k.values());
        f("w_v", s.w_v.values());
        f("w_w", s.w_w.values());
        f("bias_w", std::span(s.bias_w));
        f("w_a", s.w_a.values());
        f("bias_a", std::span(s.bias_a));
        f("w_g", s.w_g.values());
        f("ln_x", std::span(s.ln_x));
        f("w_o", s.w_o.values());
        f("ln2", std::span(s.ln2));
        f("mu_channel", std::span(s.mu_channel));
        f("w_up", s.w_up.values());
        f("w_down", s.w_down.values());
    }
};

template <class T>
struct BlockParams {
    BlockConfig config;
    std::vector<LayerParams<T>> layers;

    BlockParams() = default;
    /// Zero-initialised tensors of the right shapes.
    explicit BlockParams(const BlockConfig& c) : config(c), layers(c.n_layers, LayerParams<T>(c)) {
        c.validate();
    }

    static BlockParams init(const BlockConfig& c, SeededRng& rng, double scale = 0.02) {
        BlockParams p(c);
        for (auto& l : p.layers) {
            std::fill(l.ln1.begin(), l.ln1.end(), T(1));
            std::fill(l.ln2.begin(), l.ln2.end(), T(1));
            std::fill(l.ln_x.begin(), l.ln_x.end(), T(1));
            std::fill(l.mu_time.begin(), l.mu_time.end(), T(0.5));
            std::fill(l.mu_channel.begin(), l.mu_channel.end(), T(0.5));
            std::fill(l.bias_w.begin(), l.bias_w.end(), static_cast<T>(kInitDecayBias));
            for (auto* m : {&l.w_r, &l.w_k, &l.w_v, &l.w_w, &l.w_a, &l.w_g, &l.w_o, &l.w_up,
                            &l.w_down})
                for (auto& v : m->values()) v = static_cast<T>(rng.normal() * scale);
        }
        return p;
    }

    template <class F>
    void visit(F&& f) {
        for (std::size_t i = 0; i < layers.size(); ++i)
            layers[i].visit([&](const char* name, auto span) {
                f("layers." + std::to_string(i) + "." + name, span);
            });
    }
    template <class F>
    void visit(F&& f) const {
        for (std::size_t i = 0; i < layers.size(); ++i)
            layers[i].visit([&](const char* name, auto span) {
                f("layers." + std::to_string(i) + "." + name, span);
            });
    }

    template <class U>
    BlockParams<U> cast() const {
        BlockParams<U> out(config);
        std::vector<std::span<U>> dst;
        out.visit([&](const std::string&, std::span<U> s) { dst.push_back(s); });
        std::size_t i = 0;
        visit([&](const std::string&, std::span<const T> s) {
            std::transform(s.begin(), s.end(), dst[i++].begin(),
                           [](T v) { return static_cast<U>(v); });
        });
        return out;
    }

    friend bool operator==(const BlockParams&, const BlockParams&) = default;
};

/// Constant-size recurrent state: one head_dim x head_dim matrix per head plus
/// the two token-shift buffers per layer. Its size never depends on how many
/// tokens have been consumed.
template <class T>
struct RecurrentState {
    struct Layer {
        std::vector<T> wkv; // n_heads x head_dim x head_dim; rows index values, cols keys
        std::vector<T> shift_time;
        std::vector<T> shift_channel;
        friend bool operator==(const Layer&, const Layer&) = default;
    };

    BlockConfig config;
    std::vector<Layer> layers;

    RecurrentState() = default;
    explicit RecurrentState(const BlockConfig& c) : config(c) {
        c.validate();
        const std::size_t n = c.head_dim();
        layers.assign(c.n_layers, Layer{std::vector<T>(c.n_heads * n * n),
                                        std::vector<T>(c.d_model), std::vector<T>(c.d_model)});
    }

    std::size_t byte_size() const {
        std::size_t n = 0;
        for (const auto& l : layers)
            n += (l.wkv.size() + l.shift_time.size() + l.shift_channel.size()) * sizeof(T);
        return n;
    }

    bool finite() const {
        for (const auto& l : layers)
            if (!all_finite(l.wkv) || !all_finite(l.shift_time) || !all_finite(l.shift_channel))
                return false;
        return true;
    }

    friend bool operator==(const RecurrentState&, const RecurrentState&) = default;
};

// ---------------------------------------------------------------------------
// Single-token primitives

template <class T>
std::vector<T> token_shift(std::span<const T> x, std::span<const T> prev, std::span<const T> mu) {
    if (x.size() != prev.size() || x.size() != mu.size())
        throw shape_error("token_shift: lengths " + std::to_string(x.size()) + ", " +
                          std::to_string(prev.size()) + ", " + std::to_string(mu.size()));
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = static_cast<T>(static_cast<double>(mu[i]) * static_cast<double>(x[i]) +
                                (1.0 - static_cast<double>(mu[i])) * static_cast<double>(prev[i]));
    return out;
}

namespace detail {

template <class T>
void normalize_key(std::span<const T> k, std::span<T> khat) {
    double ss = 0.0;
    for (T v : k) ss += static_cast<double>(v) * static_cast<double>(v);
    const double denom = std::sqrt(ss) + kKeyNormEps;
    for (std::size_t j = 0; j < k.size(); ++j) khat[j] = static_cast<T>(static_cast<double>(k[j]) / denom);
}

/// S <- S (diag(w) - khat (a*khat)^T) + v k^T ; y = S r. S is n x n row-major.
template <class T>
void wkv_update(std::span<T> s, std::span<const T> w, std::span<const T> k,
                std::span<const T> khat, std::span<const T> v, std::span<const T> a,
                std::span<const T> r, std::span<T> y) {
    const std::size_t n = k.size();
    thread_local std::vector<double> sk;
    sk.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            acc += static_cast<double>(s[i * n + j]) * static_cast<double>(khat[j]);
        sk[i] = acc;
    }
    for (std::size_t i = 0; i < n; ++i) {
        const double vi = static_cast<double>(v[i]);
        T* srow = s.data() + i * n;
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double b = static_cast<double>(a[j]) * static_cast<double>(khat[j]);
            const double nv = static_cast<double>(srow[j]) * static_cast<double>(w[j]) -
                              sk[i] * b + vi * static_cast<double>(k[j]);
            srow[j] = static_cast<T>(nv);
            acc += static_cast<double>(srow[j]) * static_cast<double>(r[j]);
        }
        y[i] = static_cast<T>(acc);
    }
}

} // namespace detail

/// One delta-rule step for a single head. Updates `state` (n x n) in place
/// and returns y = S' r.
template <class T>
std::vector<T> wkv_step(std::span<T> state, std::span<const T> w, std::span<const T> k,
                        std::span<const T> v, std::span<const T> a, std::span<const T> r) {
    const std::size_t n = k.size();
    if (w.size() != n || v.size() != n || a.size() != n || r.size() != n || state.size() != n * n)
        throw shape_error("wkv_step: vectors must share head_dim " + std::to_string(n) +
                          " and state must be " + std::to_string(n) + "x" + std::to_string(n));
    for (std::size_t j = 0; j < n; ++j) {
        if (!(w[j] > T(0) && w[j] <= T(1)))
            throw parameter_error("wkv_step: decay w[" + std::to_string(j) + "] outside (0,1]");
        if (!(a[j] >= T(0) && a[j] <= T(1)))
            throw parameter_error("wkv_step: rate a[" + std::to_string(j) + "] outside [0,1]");
    }
    std::vector<T> khat(n), y(n);
    detail::normalize_key<T>(k, khat);
    detail::wkv_update<T>(state, w, k, khat, v, a, r, y);
    return y;
}

inline double decay_from_raw(double raw) {
    return std::exp(-std::exp(std::clamp(raw, kDecayRawMin, kDecayRawMax)));
}
inline double rate_from_raw(double raw) {
    return logistic(std::clamp(raw, -kRateRawLimit, kRateRawLimit));
}

// ---------------------------------------------------------------------------
// Sequence-level layer kernels

template <class T>
struct LayerCache {
    basic_matrix<T> x, xn1, xs_t, r, k, v, w_raw, a_raw, g, w, a, khat, y, o, z;
    basic_matrix<T> x1, xn2, xs_c, pre, hid;
    std::vector<double> inv1, inv2, inv_x; // inv_x: T x n_heads
    std::vector<T> s_prev;                 // T x n_heads x n x n
    std::vector<T> shift_time0, shift_channel0;
};

template <class T>
struct StackCache {
    std::vector<LayerCache<T>> layers;
    std::size_t length = 0;
    bool valid = false;
};

namespace detail {

template <class T>
basic_matrix<T> shift_rows(const basic_matrix<T>& xn, std::span<T> prev, std::span<const T> mu) {
    basic_matrix<T> xs(xn.rows(), xn.cols());
    for (std::size_t t = 0; t < xn.rows(); ++t) {
        const auto cur = xn.row(t);
        const std::span<const T> p = t == 0 ? std::span<const T>(prev) : xn.row(t - 1);
        auto out = xs.row(t);
        for (std::size_t i = 0; i < cur.size(); ++i)
            out[i] = static_cast<T>(static_cast<double>(mu[i]) * static_cast<double>(cur[i]) +
                                    (1.0 - static_cast<double>(mu[i])) * static_cast<double>(p[i]));
    }
    if (xn.rows() > 0) std::copy(xn.row(xn.rows() - 1).begin(), xn.row(xn.rows() - 1).end(), prev.begin());
    return xs;
}

template <class T>
basic_matrix<T> project(const basic_matrix<T>& x, const basic_matrix<T>& w) {
    basic_matrix<T> out(x.rows(), w.cols());
    kernel::matmul(x.data(), x.rows(), x.cols(), w.data(), w.cols(), out.data());
    return out;
}

template <class T>
basic_matrix<T> norm_rows(const basic_matrix<T>& x, std::span<const T> gain, std::vector<double>& inv) {
    basic_matrix<T> out(x.rows(), x.cols());
    inv.resize(x.rows());
    for (std::size_t t = 0; t < x.rows(); ++t) inv[t] = rms_norm_into<T>(x.row(t), gain, kNormEps, out.row(t));
    return out;
}

template <class T>
basic_matrix<T> time_mix_seq(const LayerParams<T>& p, const BlockConfig& c, const basic_matrix<T>& xn,
                             typename RecurrentState<T>::Layer& st, LayerCache<T>* cache) {
    const std::size_t len = xn.rows(), d = c.d_model, nh = c.n_heads, n = c.head_dim();
    if (cache) cache->shift_time0 = st.shift_time;
    basic_matrix<T> xs = shift_rows<T>(xn, st.shift_time, p.mu_time);
    basic_matrix<T> r = project(xs, p.w_r), k = project(xs, p.w_k), v = project(xs, p.w_v);
    basic_matrix<T> w_raw = project(xs, p.w_w), a_raw = project(xs, p.w_a), g = project(xs, p.w_g);
    basic_matrix<T> w(len, d), a(len, d), khat(len, d), y(len, d), o(len, d), z(len, d);
    for (std::size_t t = 0; t < len; ++t)
        for (std::size_t i = 0; i < d; ++i) {
            w_raw(t, i) = static_cast<T>(static_cast<double>(w_raw(t, i)) + static_cast<double>(p.bias_w[i]));
            a_raw(t, i) = static_cast<T>(static_cast<double>(a_raw(t, i)) + static_cast<double>(p.bias_a[i]));
            w(t, i) = static_cast<T>(decay_from_raw(static_cast<double>(w_raw(t, i))));
            a(t, i) = static_cast<T>(rate_from_raw(static_cast<double>(a_raw(t, i))));
        }
    std::vector<double> inv_x(len * nh);
    if (cache) cache->s_prev.resize(len * nh * n * n);
    for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t h = 0; h < nh; ++h) {
            const std::size_t off = h * n;
            std::span<T> s(st.wkv.data() + h * n * n, n * n);
            if (cache) std::copy(s.begin(), s.end(), cache->s_prev.begin() + (t * nh + h) * n * n);
            auto sub = [&](basic_matrix<T>& m) { return m.row(t).subspan(off, n); };
            normalize_key<T>(sub(k), sub(khat));
            wkv_update<T>(s, sub(w), sub(k), sub(khat), sub(v), sub(a), sub(r), sub(y));
            inv_x[t * nh + h] = rms_norm_into<T>(sub(y), std::span<const T>(p.ln_x).subspan(off, n),
                                                 kNormEps, sub(o));
        }
        for (std::size_t i = 0; i < d; ++i)
            z(t, i) = static_cast<T>(logistic(static_cast<double>(g(t, i))) * static_cast<double>(o(t, i)));
    }
    basic_matrix<T> out = project(z, p.w_o);
    if (cache) {
        cache->xn1 = xn;
        cache->xs_t = std::move(xs);
        cache->r = std::move(r);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->w_raw = std::move(w_raw);
        cache->a_raw = std::move(a_raw);
        cache->g = std::move(g);
        cache->w = std::move(w);
        cache->a = std::move(a);
        cache->khat = std::move(khat);
        cache->y = std::move(y);
        cache->o = std::move(o);
        cache->z = std::move(z);
        cache->inv_x = std::move(inv_x);
    }
    return out;
}

template <class T>
basic_matrix<T> channel_mix_seq(const LayerParams<T>& p, const basic_matrix<T>& xn,
                                typename RecurrentState<T>::Layer& st, LayerCache<T>* cache) {
    if (cache) cache->shift_channel0 = st.shift_channel;
    basic_matrix<T> xs = shift_rows<T>(xn, st.shift_channel, p.mu_channel);
    basic_matrix<T> pre = project(xs, p.w_up);
    basic_matrix<T> hid(pre.rows(), pre.cols());
    auto pv = pre.values();
    auto hv = hid.values();
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const double rl = std::max(0.0, static_cast<double>(pv[i]));
        hv[i] = static_cast<T>(rl * rl);
    }
    basic_matrix<T> out = project(hid, p.w_down);
    if (cache) {
        cache->xn2 = xn;
        cache->xs_c = std::move(xs);
        cache->pre = std::move(pre);
        cache->hid = std::move(hid);
    }
    return out;
}

template <class T>
void add_rows(basic_matrix<T>& x, const basic_matrix<T>& delta) {
    auto xv = x.values();
    auto dv = delta.values();
    for (std::size_t i = 0; i < xv.size(); ++i)
        xv[i] = static_cast<T>(static_cast<double>(xv[i]) + static_cast<double>(dv[i]));
}

template <class T>
void check_layer_input(const BlockConfig& c, const RecurrentState<T>& state, std::size_t width) {
    if (width != c.d_model)
        throw shape_error("recurrent stack: input width " + std::to_string(width) +
                          " does not match d_model " + std::to_string(c.d_model));
    if (!(state.config == c)) throw shape_error("recurrent stack: state built for a different config");
}

} // namespace detail

/// Time mixing for one token; `layer_state` is updated.
template <class T>
std::vector<T> time_mixing_forward(const LayerParams<T>& p, const BlockConfig& c, std::span<const T> x,
                                   typename RecurrentState<T>::Layer& layer_state) {
    if (x.size() != c.d_model) throw shape_error("time_mixing_forward: input width mismatch");
    basic_matrix<T> xm(1, c.d_model, std::vector<T>(x.begin(), x.end()));
    auto out = detail::time_mix_seq<T>(p, c, xm, layer_state, nullptr);
    return {out.values().begin(), out.values().end()};
}

template <class T>
std::vector<T> channel_mixing_forward(const LayerParams<T>& p, const BlockConfig& c,
                                      std::span<const T> x,
                                      typename RecurrentState<T>::Layer& layer_state) {
    if (x.size() != c.d_model) throw shape_error("channel_mixing_forward: input width mismatch");
    basic_matrix<T> xm(1, c.d_model, std::vector<T>(x.begin(), x.end()));
    auto out = detail::channel_mix_seq<T>(p, xm, layer_state, nullptr);
    return {out.values().begin(), out.values().end()};
}

/// Runs the whole stack over the rows of `x`, layer by layer, updating `state`.
/// Bitwise identical to folding stack_step over the rows in order.
template <class T>
basic_matrix<T> stack_sequence(const BlockParams<T>& params, const basic_matrix<T>& x,
                               RecurrentState<T>& state, StackCache<T>* cache = nullptr) {
    const BlockConfig& c = params.config;
    detail::check_layer_input(c, state, x.cols());
    if (x.rows() == 0) throw shape_error("stack_sequence: empty input");
    if (cache) {
        cache->layers.assign(c.n_layers, LayerCache<T>{});
        cache->length = x.rows();
        cache->valid = false;
    }
    basic_matrix<T> h = x;
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const auto& p = params.layers[l];
        auto& st = state.layers[l];
        LayerCache<T>* lc = cache ? &cache->layers[l] : nullptr;
        std::vector<double> inv1, inv2;
        if (lc) lc->x = h;
        basic_matrix<T> xn1 = detail::norm_rows<T>(h, p.ln1, inv1);
        detail::add_rows(h, detail::time_mix_seq<T>(p, c, xn1, st, lc));
        if (lc) lc->x1 = h;
        basic_matrix<T> xn2 = detail::norm_rows<T>(h, p.ln2, inv2);
        detail::add_rows(h, detail::channel_mix_seq<T>(p, xn2, st, lc));
        if (lc) {
            lc->inv1 = std::move(inv1);
            lc->inv2 = std::move(inv2);
        }
    }
    if (cache) cache->valid = true;
    return h;
}

template <class T>
std::vector<T> stack_step(const BlockParams<T>& params, std::span<const T> x, RecurrentState<T>& state) {
    detail::check_layer_input(params.config, state, x.size());
    basic_matrix<T> xm(1, x.size(), std::vector<T>(x.begin(), x.end()));
    auto h = stack_sequence(params, xm, state);
    return {h.values().begin(), h.values().end()};
}

// ---------------------------------------------------------------------------
// Backward

namespace detail {

template <class T>
void token_shift_backward(const basic_matrix<T>& xn, std::span<const T> prev0, std::span<const T> mu,
                          const basic_matrix<T>& dxs, basic_matrix<T>& dxn, std::span<T> dmu) {
    for (std::size_t t = 0; t < xn.rows(); ++t) {
        const auto cur = xn.row(t);
        const std::span<const T> p = t == 0 ? prev0 : xn.row(t - 1);
        const auto g = dxs.row(t);
        auto dc = dxn.row(t);
        for (std::size_t i = 0; i < cur.size(); ++i) {
            const double gi = static_cast<double>(g[i]);
            const double m = static_cast<double>(mu[i]);
            dc[i] += static_cast<T>(m * gi);
            if (t > 0) dxn(t - 1, i) += static_cast<T>((1.0 - m) * gi);
            dmu[i] += static_cast<T>(gi * (static_cast<double>(cur[i]) - static_cast<double>(p[i])));
        }
    }
}

template <class T>
void norm_rows_backward(const basic_matrix<T>& x, std::span<const T> gain, const std::vector<double>& inv,
                        const basic_matrix<T>& dxn, basic_matrix<T>& dx, std::span<T> dgain) {
    for (std::size_t t = 0; t < x.rows(); ++t)
        rms_norm_backward<T>(x.row(t), gain, inv[t], dxn.row(t), dx.row(t), dgain);
}

template <class T>
void channel_mix_backward(const LayerParams<T>& p, const LayerCache<T>& lc, const basic_matrix<T>& dout,
                          LayerParams<T>& gp, basic_matrix<T>& dxn) {
    kernel::accumulate_at_b(lc.hid, dout, gp.w_down);
    basic_matrix<T> dpre(lc.pre.rows(), lc.pre.cols());
    kernel::accumulate_a_bt(dout, p.w_down, dpre);
    auto dv = dpre.values();
    auto pv = lc.pre.values();
    for (std::size_t i = 0; i < dv.size(); ++i)
        dv[i] = static_cast<T>(static_cast<double>(dv[i]) * 2.0 * std::max(0.0, static_cast<double>(pv[i])));
    kernel::accumulate_at_b(lc.xs_c, dpre, gp.w_up);
    basic_matrix<T> dxs(lc.xs_c.rows(), lc.xs_c.cols());
    kernel::accumulate_a_bt(dpre, p.w_up, dxs);
    token_shift_backward<T>(lc.xn2, lc.shift_channel0, p.mu_channel, dxs, dxn, gp.mu_channel);
}

template <class T>
void time_mix_backward(const LayerParams<T>& p, const BlockConfig& c, const LayerCache<T>& lc,
                       const basic_matrix<T>& dout, LayerParams<T>& gp, basic_matrix<T>& dxn) {
    const std::size_t len = lc.xn1.rows(), d = c.d_model, nh = c.n_heads, n = c.head_dim();
    kernel::accumulate_at_b(lc.z, dout, gp.w_o);
    basic_matrix<T> dz(len, d);
    kernel::accumulate_a_bt(dout, p.w_o, dz);

    basic_matrix<T> dg(len, d), d_o(len, d), dy(len, d);
    for (std::size_t t = 0; t < len; ++t)
        for (std::size_t i = 0; i < d; ++i) {
            const double sg = logistic(static_cast<double>(lc.g(t, i)));
            const double dzi = static_cast<double>(dz(t, i));
            dg(t, i) = static_cast<T>(dzi * static_cast<double>(lc.o(t, i)) * sg * (1.0 - sg));
            d_o(t, i) = static_cast<T>(dzi * sg);
        }
    for (std::size_t t = 0; t < len; ++t)
        for (std::size_t h = 0; h < nh; ++h) {
            const std::size_t off = h * n;
            rms_norm_backward<T>(lc.y.row(t).subspan(off, n), std::span<const T>(p.ln_x).subspan(off, n),
                                 lc.inv_x[t * nh + h], d_o.row(t).subspan(off, n),
                                 dy.row(t).subspan(off, n), std::span<T>(gp.ln_x).subspan(off, n));
        }

    basic_matrix<T> dr(len, d), dk(len, d), dv(len, d), dw_raw(len, d), da_raw(len, d);
    std::vector<double> ds(n * n), dsn(n * n), snew(n * n), sk(n), u(n), dkhat(n), db(n);
    for (std::size_t h = 0; h < nh; ++h) {
        const std::size_t off = h * n;
        std::fill(ds.begin(), ds.end(), 0.0);
        for (std::size_t tt = len; tt-- > 0;) {
            const T* s = lc.s_prev.data() + (tt * nh + h) * n * n;
            auto row = [&](const basic_matrix<T>& m, std::size_t j) { return static_cast<double>(m(tt, off + j)); };
            // recompute S' exactly as the forward did
            for (std::size_t i = 0; i < n; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += static_cast<double>(s[i * n + j]) * row(lc.khat, j);
                sk[i] = acc;
            }
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double b = row(lc.a, j) * row(lc.khat, j);
                    snew[i * n + j] = static_cast<double>(static_cast<T>(
                        static_cast<double>(s[i * n + j]) * row(lc.w, j) - sk[i] * b + row(lc.v, i) * row(lc.k, j)));
                }
            // dS' = carried + dy r^T
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) dsn[i * n + j] = ds[i * n + j] + row(dy, i) * row(lc.r, j);
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t i = 0; i < n; ++i) acc += snew[i * n + j] * row(dy, i);
                dr(tt, off + j) = static_cast<T>(acc);
            }
            for (std::size_t i = 0; i < n; ++i) {
                double acc_v = 0.0, acc_u = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    acc_v += dsn[i * n + j] * row(lc.k, j);
                    acc_u += dsn[i * n + j] * row(lc.a, j) * row(lc.khat, j);
                }
                dv(tt, off + i) = static_cast<T>(acc_v);
                u[i] = acc_u;
            }
            for (std::size_t j = 0; j < n; ++j) {
                double acc_k = 0.0, acc_w = 0.0, acc_kh = 0.0, acc_b = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double g = dsn[i * n + j];
                    const double sij = static_cast<double>(s[i * n + j]);
                    acc_k += g * row(lc.v, i);
                    acc_w += sij * g;
                    acc_kh -= sij * u[i];
                    acc_b -= g * sk[i];
                }
                db[j] = acc_b;
                dkhat[j] = acc_kh + acc_b * row(lc.a, j);
                // decay: w = exp(-exp(raw))
                const double raw = row(lc.w_raw, j);
                const double wj = row(lc.w, j);
                dw_raw(tt, off + j) = static_cast<T>(
                    raw > kDecayRawMin && raw < kDecayRawMax ? acc_w * (-wj * std::exp(raw)) : 0.0);
                const double araw = row(lc.a_raw, j);
                const double aj = row(lc.a, j);
                da_raw(tt, off + j) = static_cast<T>(
                    araw > -kRateRawLimit && araw < kRateRawLimit ? acc_b * row(lc.khat, j) * aj * (1.0 - aj) : 0.0);
                dk(tt, off + j) = static_cast<T>(acc_k);
            }
            // khat = k / (|k| + eps)
            double knorm2 = 0.0, dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                knorm2 += row(lc.k, j) * row(lc.k, j);
                dot += dkhat[j] * row(lc.k, j);
            }
            const double knorm = std::sqrt(knorm2);
            const double cden = knorm + kKeyNormEps;
            for (std::size_t j = 0; j < n; ++j) {
                double g = dkhat[j] / cden;
                if (knorm > 0.0) g -= row(lc.k, j) * dot / (cden * cden * knorm);
                dk(tt, off + j) = static_cast<T>(static_cast<double>(dk(tt, off + j)) + g);
            }
            // carry to S_{t-1}: dS' diag(w) - u khat^T
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    ds[i * n + j] = dsn[i * n + j] * row(lc.w, j) - u[i] * row(lc.khat, j);
        }
    }

    for (std::size_t t = 0; t < len; ++t)
        for (std::size_t i = 0; i < d; ++i) {
            gp.bias_w[i] += dw_raw(t, i);
            gp.bias_a[i] += da_raw(t, i);
        }
    basic_matrix<T> dxs(len, d);
    const std::pair<const basic_matrix<T>*, std::pair<const basic_matrix<T>*, basic_matrix<T>*>> projs[] = {
        {&dr, {&p.w_r, &gp.w_r}},         {&dk, {&p.w_k, &gp.w_k}}, {&dv, {&p.w_v, &gp.w_v}},
        {&dw_raw, {&p.w_w, &gp.w_w}},     {&da_raw, {&p.w_a, &gp.w_a}}, {&dg, {&p.w_g, &gp.w_g}},
    };
    for (const auto& [grad_out, wp] : projs) {
        kernel::accumulate_at_b(lc.xs_t, *grad_out, *wp.second);
        kernel::accumulate_a_bt(*grad_out, *wp.first, dxs);
    }
    token_shift_backward<T>(lc.xn1, lc.shift_time0, p.mu_time, dxs, dxn, gp.mu_time);
}

} // namespace detail

/// Backpropagates dH through the cached forward. Parameter gradients are
/// added into `grads` (which must share the config); returns dX.
template <class T>
basic_matrix<T> stack_backward(const BlockParams<T>& params, const StackCache<T>& cache,
                               const basic_matrix<T>& dh, BlockParams<T>& grads) {
    const BlockConfig& c = params.config;
    if (!cache.valid) throw usage_error("stack_backward: no cached forward pass");
    if (dh.rows() != cache.length || dh.cols() != c.d_model)
        throw shape_error("stack_backward: gradient shape " + dh.shape() + " does not match cached forward");
    if (!(grads.config == c)) throw shape_error("stack_backward: gradient buffer has a different config");
    basic_matrix<T> dx = dh;
    for (std::size_t l = c.n_layers; l-- > 0;) {
        const auto& p = params.layers[l];
        const auto& lc = cache.layers[l];
        auto& gp = grads.layers[l];
        // x2 = x1 + cm(norm(x1))
        basic_matrix<T> dxn2(dx.rows(), dx.cols());
        detail::channel_mix_backward<T>(p, lc, dx, gp, dxn2);
        detail::norm_rows_backward<T>(lc.x1, p.ln2, lc.inv2, dxn2, dx, gp.ln2);
        // x1 = x + tm(norm(x))
        basic_matrix<T> dxn1(dx.rows(), dx.cols());
        detail::time_mix_backward<T>(p, c, lc, dx, gp, dxn1);
        detail::norm_rows_backward<T>(lc.x, p.ln1, lc.inv1, dxn1, dx, gp.ln1);
    }
    return dx;
}

/// Keeps token-shift mixing coefficients inside [0,1] after an update.
template <class T>
void clamp_mix_coefficients(BlockParams<T>& params) {
    for (auto& l : params.layers)
        for (auto* v : {&l.mu_time, &l.mu_channel})
            for (auto& m : *v) m = std::clamp(m, T(0), T(1));
}

} // namespace voxrnn
