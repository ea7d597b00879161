#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "voxrnn/numerics.hpp"
#include "voxrnn/recurrent.hpp"
#include "voxrnn/rng.hpp"

namespace voxrnn {
namespace {

using Vec = std::vector<double>;

std::vector<float> random_vec(std::size_t n, SeededRng& rng, double lo = -1, double hi = 1) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
    return v;
}

// ---------------------------------------------------------------------------
// Independent f64 references written from the update rules directly.

Vec ref_matvec_in_out(const Vec& x, const Matrix& w) { // x (in) times w (in x out)
    Vec out(w.cols(), 0.0);
    for (std::size_t j = 0; j < w.cols(); ++j)
        for (std::size_t k = 0; k < w.rows(); ++k) out[j] += x[k] * double(w(k, j));
    return out;
}

Vec ref_rms(const Vec& x, const Vec& g) {
    double ms = 0;
    for (double v : x) ms += v * v;
    ms /= x.size();
    Vec out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * g[i] / std::sqrt(ms + kNormEps);
    return out;
}

// S' = S * (diag(w) - khat (a*khat)^T) + v k^T with the transition built explicitly.
void ref_wkv(std::vector<Vec>& s, const Vec& w, const Vec& k, const Vec& v, const Vec& a, const Vec& r, Vec& y) {
    const std::size_t n = k.size();
    double norm = 0;
    for (double x : k) norm += x * x;
    norm = std::sqrt(norm) + kKeyNormEps;
    Vec kh(n);
    for (std::size_t j = 0; j < n; ++j) kh[j] = k[j] / norm;
    std::vector<Vec> trans(n, Vec(n));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) trans[i][j] = (i == j ? w[j] : 0.0) - kh[i] * a[j] * kh[j];
    std::vector<Vec> next(n, Vec(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t m = 0; m < n; ++m) next[i][j] += s[i][m] * trans[m][j];
            next[i][j] += v[i] * k[j];
        }
    s = next;
    y.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) y[i] += s[i][j] * r[j];
}

struct RefTimeMixState {
    Vec prev;
    std::vector<std::vector<Vec>> heads;
};

Vec ref_time_mix(const LayerParams<float>& p, const BlockConfig& c, const Vec& x, RefTimeMixState& st) {
    const std::size_t d = c.d_model, n = c.head_dim();
    Vec xs(d);
    for (std::size_t i = 0; i < d; ++i) xs[i] = p.mu_time[i] * x[i] + (1 - double(p.mu_time[i])) * st.prev[i];
    st.prev = x;
    Vec r = ref_matvec_in_out(xs, p.w_r), k = ref_matvec_in_out(xs, p.w_k), v = ref_matvec_in_out(xs, p.w_v);
    Vec wr = ref_matvec_in_out(xs, p.w_w), ar = ref_matvec_in_out(xs, p.w_a), g = ref_matvec_in_out(xs, p.w_g);
    Vec z(d);
    for (std::size_t h = 0; h < c.n_heads; ++h) {
        Vec wh(n), kh(n), vh(n), ah(n), rh(n), gain(n), y;
        for (std::size_t j = 0; j < n; ++j) {
            const std::size_t i = h * n + j;
            wh[j] = std::exp(-std::exp(wr[i] + p.bias_w[i]));
            ah[j] = 1.0 / (1.0 + std::exp(-(ar[i] + p.bias_a[i])));
            kh[j] = k[i];
            vh[j] = v[i];
            rh[j] = r[i];
            gain[j] = p.ln_x[i];
        }
        ref_wkv(st.heads[h], wh, kh, vh, ah, rh, y);
        const Vec o = ref_rms(y, gain);
        for (std::size_t j = 0; j < n; ++j) z[h * n + j] = o[j] / (1.0 + std::exp(-g[h * n + j]));
    }
    return ref_matvec_in_out(z, p.w_o);
}

Vec ref_channel_mix(const LayerParams<float>& p, const Vec& x, Vec& prev) {
    Vec xs(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) xs[i] = p.mu_channel[i] * x[i] + (1 - double(p.mu_channel[i])) * prev[i];
    prev = x;
    Vec pre = ref_matvec_in_out(xs, p.w_up);
    for (auto& v : pre) v = v > 0 ? v * v : 0.0;
    return ref_matvec_in_out(pre, p.w_down);
}

// ---------------------------------------------------------------------------

TEST(TokenShift, DegenerateMixes) {
    const std::vector<float> x{1, 2, 3}, prev{7, 8, 9};
    EXPECT_EQ(token_shift<float>(x, prev, std::vector<float>(3, 1.0f)), x);
    EXPECT_EQ(token_shift<float>(x, prev, std::vector<float>(3, 0.0f)), prev);
}

TEST(TokenShift, LinearInterpolation) {
    const std::vector<float> x{4}, prev{0}, mu{0.25f};
    EXPECT_FLOAT_EQ(token_shift<float>(x, prev, mu)[0], 1.0f);
}

TEST(TokenShift, LengthMismatchIsShapeError) {
    EXPECT_THROW(token_shift<float>(std::vector<float>(2), std::vector<float>(3), std::vector<float>(2)), shape_error);
}

TEST(WkvStep, ZeroStateWriteThenRead) {
    std::vector<float> s(4, 0.0f);
    const std::vector<float> w{1, 1}, k{1, 0}, v{2, 3}, a{0, 0}, r{1, 0};
    const auto y = wkv_step<float>(s, w, k, v, a, r);
    EXPECT_EQ(s, (std::vector<float>{2, 0, 3, 0}));
    EXPECT_EQ(y, (std::vector<float>{2, 3}));
}

TEST(WkvStep, PureReadLeavesStateUnchanged) {
    SeededRng rng(11);
    std::vector<float> s = random_vec(9, rng);
    const auto before = s;
    const std::vector<float> w(3, 1.0f), a(3, 0.0f), v(3, 0.0f);
    const auto k = random_vec(3, rng), r = random_vec(3, rng);
    const auto y = wkv_step<float>(s, w, k, v, a, r);
    EXPECT_EQ(s, before);
    for (std::size_t i = 0; i < 3; ++i) {
        double e = 0;
        for (std::size_t j = 0; j < 3; ++j) e += double(before[i * 3 + j]) * r[j];
        EXPECT_NEAR(y[i], e, 1e-6);
    }
}

TEST(WkvStep, MatchesExplicitTransitionOracle) {
    SeededRng rng(12);
    const std::size_t n = 4;
    std::vector<float> s(n * n, 0.0f);
    std::vector<Vec> ref(n, Vec(n, 0.0));
    for (int step = 0; step < 3; ++step) {
        const auto w = random_vec(n, rng, 0.5, 0.99), k = random_vec(n, rng), v = random_vec(n, rng),
                   a = random_vec(n, rng, 0, 1), r = random_vec(n, rng);
        const auto y = wkv_step<float>(s, w, k, v, a, r);
        Vec yr;
        ref_wkv(ref, Vec(w.begin(), w.end()), Vec(k.begin(), k.end()), Vec(v.begin(), v.end()),
                Vec(a.begin(), a.end()), Vec(r.begin(), r.end()), yr);
        for (std::size_t i = 0; i < n; ++i) {
            EXPECT_NEAR(y[i], yr[i], 1e-5);
            for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(s[i * n + j], ref[i][j], 1e-5);
        }
    }
}

TEST(WkvStep, RejectsOutOfRangeGates) {
    std::vector<float> s(4, 0.0f);
    const std::vector<float> ok{0.5f, 0.5f}, k{1, 0};
    EXPECT_THROW(wkv_step<float>(s, std::vector<float>{0.0f, 0.5f}, k, ok, ok, ok), parameter_error);
    EXPECT_THROW(wkv_step<float>(s, std::vector<float>{1.5f, 0.5f}, k, ok, ok, ok), parameter_error);
    EXPECT_THROW(wkv_step<float>(s, ok, k, ok, std::vector<float>{-0.1f, 0.5f}, ok), parameter_error);
    EXPECT_THROW(wkv_step<float>(s, ok, k, ok, std::vector<float>{0.5f, 1.1f}, ok), parameter_error);
}

TEST(WkvStep, DecayContractsStateWithoutWrites) {
    SeededRng rng(13);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 5;
        std::vector<float> s = random_vec(n * n, rng, -3, 3);
        double before = 0;
        for (float v : s) before += double(v) * v;
        const auto w = random_vec(n, rng, 0.01, 0.999);
        const float wmax = *std::max_element(w.begin(), w.end());
        wkv_step<float>(s, w, random_vec(n, rng), std::vector<float>(n, 0.0f), std::vector<float>(n, 0.0f),
                        random_vec(n, rng));
        double after = 0;
        for (float v : s) after += double(v) * v;
        EXPECT_LE(std::sqrt(after), std::sqrt(before) * wmax * (1 + 1e-6));
    }
}

TEST(Gates, StayStrictlyInsideUnitInterval) {
    for (double raw : {-1e30, -1e4, -50.0, -10.0, -3.0, 0.0, 3.0, 10.0, 50.0, 1e4, 1e30}) {
        const float w = static_cast<float>(decay_from_raw(raw));
        const float a = static_cast<float>(rate_from_raw(raw));
        EXPECT_GT(w, 0.0f) << raw;
        EXPECT_LT(w, 1.0f) << raw;
        EXPECT_GT(a, 0.0f) << raw;
        EXPECT_LT(a, 1.0f) << raw;
    }
    EXPECT_NEAR(decay_from_raw(kInitDecayBias), 0.9, 1e-12);
}

TEST(TimeMixing, ZeroParamsGiveZeroOutput) {
    const BlockConfig c{8, 2, 1};
    const LayerParams<float> p(c);
    RecurrentState<float> st(c);
    SeededRng rng(14);
    for (int t = 0; t < 3; ++t)
        for (float v : time_mixing_forward<float>(p, c, random_vec(8, rng), st.layers[0])) EXPECT_EQ(v, 0.0f);
}

TEST(TimeMixing, DeterministicFromClonedStates) {
    const BlockConfig c{8, 2, 1};
    SeededRng rng(15);
    const auto params = BlockParams<float>::init(c, rng, 0.3);
    RecurrentState<float> st(c);
    for (int t = 0; t < 4; ++t) time_mixing_forward<float>(params.layers[0], c, random_vec(8, rng), st.layers[0]);
    auto a = st, b = st;
    const auto x = random_vec(8, rng);
    EXPECT_EQ(time_mixing_forward<float>(params.layers[0], c, x, a.layers[0]),
              time_mixing_forward<float>(params.layers[0], c, x, b.layers[0]));
    EXPECT_EQ(a, b);
}

TEST(TimeMixing, MatchesIndependentReference) {
    const BlockConfig c{8, 2, 1};
    SeededRng rng(16);
    auto params = BlockParams<float>::init(c, rng, 0.3);
    for (auto& v : params.layers[0].mu_time) v = static_cast<float>(rng.uniform());
    for (auto& v : params.layers[0].ln_x) v = static_cast<float>(rng.uniform(0.5, 1.5));
    RecurrentState<float> st(c);
    RefTimeMixState ref{Vec(8, 0.0), std::vector<std::vector<Vec>>(2, std::vector<Vec>(4, Vec(4, 0.0)))};
    for (int t = 0; t < 6; ++t) {
        const auto x = random_vec(8, rng);
        const auto got = time_mixing_forward<float>(params.layers[0], c, x, st.layers[0]);
        const auto want = ref_time_mix(params.layers[0], c, Vec(x.begin(), x.end()), ref);
        for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(got[i], want[i], 1e-5) << "t=" << t << " i=" << i;
    }
}

TEST(ChannelMixing, ZeroUpProjectionGivesZero) {
    const BlockConfig c{8, 2, 1};
    SeededRng rng(17);
    auto params = BlockParams<float>::init(c, rng);
    params.layers[0].w_up.fill(0.0f);
    RecurrentState<float> st(c);
    for (float v : channel_mixing_forward<float>(params.layers[0], c, random_vec(8, rng), st.layers[0]))
        EXPECT_EQ(v, 0.0f);
}

TEST(ChannelMixing, NegativePreActivationsAreKilled) {
    const BlockConfig c{8, 2, 1};
    SeededRng rng(18);
    auto params = BlockParams<float>::init(c, rng);
    for (auto& v : params.layers[0].w_up.values()) v = -std::abs(v) - 0.01f;
    RecurrentState<float> st(c);
    std::fill(st.layers[0].shift_channel.begin(), st.layers[0].shift_channel.end(), 1.0f);
    for (float v : channel_mixing_forward<float>(params.layers[0], c, random_vec(8, rng, 0.1, 1.0), st.layers[0]))
        EXPECT_EQ(v, 0.0f);
}

TEST(ChannelMixing, MatchesIndependentReference) {
    const BlockConfig c{8, 2, 1};
    SeededRng rng(19);
    auto params = BlockParams<float>::init(c, rng, 0.3);
    for (auto& v : params.layers[0].mu_channel) v = static_cast<float>(rng.uniform());
    RecurrentState<float> st(c);
    Vec prev(8, 0.0);
    for (int t = 0; t < 5; ++t) {
        const auto x = random_vec(8, rng);
        const auto got = channel_mixing_forward<float>(params.layers[0], c, x, st.layers[0]);
        const auto want = ref_channel_mix(params.layers[0], Vec(x.begin(), x.end()), prev);
        for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(got[i], want[i], 1e-6);
    }
}

TEST(StackStep, EmptyStackIsIdentity) {
    const BlockConfig c{8, 2, 0};
    const BlockParams<float> params(c);
    RecurrentState<float> st(c);
    SeededRng rng(20);
    const auto x = random_vec(8, rng);
    EXPECT_EQ(stack_step<float>(params, x, st), x);
}

TEST(StackStep, EqualsLengthOneSequence) {
    const BlockConfig c{16, 4, 2};
    SeededRng rng(21);
    const auto params = BlockParams<float>::init(c, rng, 0.2);
    RecurrentState<float> a(c), b(c);
    const auto x = random_vec(16, rng);
    const auto h1 = stack_step<float>(params, x, a);
    const auto h2 = stack_sequence(params, Matrix(1, 16, x), b);
    EXPECT_EQ(h1, std::vector<float>(h2.values().begin(), h2.values().end()));
    EXPECT_EQ(a, b);
}

TEST(StackSequence, SplitCarryingStateIsExact) {
    const BlockConfig c{16, 2, 2};
    SeededRng rng(22);
    const auto params = BlockParams<float>::init(c, rng, 0.2);
    const std::size_t len = 20;
    Matrix x(len, 16, random_vec(len * 16, rng));
    RecurrentState<float> whole(c);
    const Matrix h = stack_sequence(params, x, whole);
    for (std::size_t j : {1u, 7u, 19u}) {
        RecurrentState<float> st(c);
        Matrix first(j, 16, std::vector<float>(x.values().begin(), x.values().begin() + j * 16));
        Matrix second(len - j, 16, std::vector<float>(x.values().begin() + j * 16, x.values().end()));
        const Matrix h1 = stack_sequence(params, first, st);
        const Matrix h2 = stack_sequence(params, second, st);
        for (std::size_t i = 0; i < j * 16; ++i) ASSERT_EQ(h1.values()[i], h.values()[i]);
        for (std::size_t i = 0; i < (len - j) * 16; ++i) ASSERT_EQ(h2.values()[i], h.values()[j * 16 + i]);
        EXPECT_EQ(st, whole);
    }
}

TEST(StackSequence, EqualsStepFoldBitwise) {
    const BlockConfig c{32, 2, 2};
    SeededRng rng(23);
    const auto params = BlockParams<float>::init(c, rng, 0.2);
    Matrix x(64, 32, random_vec(64 * 32, rng));
    RecurrentState<float> seq(c), fold(c);
    const Matrix h = stack_sequence(params, x, seq);
    for (std::size_t t = 0; t < 64; ++t) {
        const auto ht = stack_step<float>(params, x.row(t), fold);
        for (std::size_t i = 0; i < 32; ++i) ASSERT_EQ(ht[i], h(t, i)) << "t=" << t;
    }
    EXPECT_EQ(seq, fold);
}

TEST(StackSequence, Causal) {
    const BlockConfig c{16, 2, 2};
    SeededRng rng(24);
    const auto params = BlockParams<float>::init(c, rng, 0.2);
    Matrix x(12, 16, random_vec(12 * 16, rng));
    RecurrentState<float> s1(c), s2(c);
    const Matrix h1 = stack_sequence(params, x, s1);
    for (auto& v : x.row(7)) v += 1.0f;
    const Matrix h2 = stack_sequence(params, x, s2);
    for (std::size_t i = 0; i < 7 * 16; ++i) ASSERT_EQ(h1.values()[i], h2.values()[i]);
    bool changed = false;
    for (std::size_t i = 0; i < 16; ++i) changed |= h1(7, i) != h2(7, i);
    EXPECT_TRUE(changed);
}

TEST(RecurrentState, SizeIndependentOfSequenceLength) {
    const BlockConfig c{16, 2, 2};
    SeededRng rng(25);
    const auto params = BlockParams<float>::init(c, rng);
    RecurrentState<float> s1(c), s2(c);
    stack_sequence(params, Matrix(1, 16, random_vec(16, rng)), s1);
    stack_sequence(params, Matrix(4096, 16, random_vec(4096 * 16, rng)), s2);
    EXPECT_EQ(s1.byte_size(), s2.byte_size());
    EXPECT_EQ(s1.byte_size(), 2 * (2 * 8 * 8 + 2 * 16) * sizeof(float));
    EXPECT_TRUE(s2.finite());
}

// ---------------------------------------------------------------------------
// Backward

double weighted_sum(const basic_matrix<double>& h, const basic_matrix<double>& c) {
    double s = 0;
    for (std::size_t i = 0; i < h.size(); ++i) s += h.values()[i] * c.values()[i];
    return s;
}

struct GradFixture {
    BlockConfig c{8, 2, 2};
    BlockParams<double> params;
    basic_matrix<double> x, weights;

    explicit GradFixture(std::uint64_t seed, std::size_t len = 5) {
        SeededRng rng(seed);
        params = BlockParams<double>::init(c, rng, 0.3);
        for (auto& l : params.layers) {
            for (auto* v : {&l.mu_time, &l.mu_channel})
                for (auto& m : *v) m = rng.uniform(0.1, 0.9);
            for (auto* v : {&l.ln1, &l.ln2, &l.ln_x})
                for (auto& g : *v) g = rng.uniform(0.5, 1.5);
            for (auto& b : l.bias_a) b = rng.uniform(-1, 1);
            for (auto& b : l.bias_w) b = rng.uniform(-3, 0);
        }
        x = basic_matrix<double>(len, 8);
        weights = basic_matrix<double>(len, 8);
        for (auto& v : x.values()) v = rng.uniform(-1, 1);
        for (auto& v : weights.values()) v = rng.uniform(-1, 1);
    }

    double loss() const {
        RecurrentState<double> st(c);
        return weighted_sum(stack_sequence(params, x, st), weights);
    }
};

TEST(StackBackward, ZeroUpstreamGivesZeroGradients) {
    GradFixture f(30);
    RecurrentState<double> st(f.c);
    StackCache<double> cache;
    stack_sequence(f.params, f.x, st, &cache);
    BlockParams<double> grads(f.c);
    const auto dx = stack_backward(f.params, cache, basic_matrix<double>(5, 8), grads);
    for (double v : dx.values()) EXPECT_EQ(v, 0.0);
    grads.visit([](const std::string& name, std::span<const double> s) {
        for (double v : s) EXPECT_EQ(v, 0.0) << name;
    });
}

TEST(StackBackward, RequiresCachedForward) {
    GradFixture f(31);
    StackCache<double> cache;
    BlockParams<double> grads(f.c);
    EXPECT_THROW(stack_backward(f.params, cache, basic_matrix<double>(5, 8), grads), usage_error);
}

TEST(StackBackward, InputAfterReadPositionGetsNoGradient) {
    // Loss reads only H[2]; inputs and their effects at t > 2 are a dead path.
    GradFixture f(32);
    for (std::size_t t = 0; t < 5; ++t)
        if (t != 2)
            for (auto& v : f.weights.row(t)) v = 0.0;
    RecurrentState<double> st(f.c);
    StackCache<double> cache;
    stack_sequence(f.params, f.x, st, &cache);
    BlockParams<double> grads(f.c);
    const auto dx = stack_backward(f.params, cache, f.weights, grads);
    for (std::size_t t = 3; t < 5; ++t)
        for (double v : dx.row(t)) EXPECT_EQ(v, 0.0);
}

TEST(StackBackward, MatchesFiniteDifferencesForEveryGroup) {
    GradFixture f(33);
    RecurrentState<double> st(f.c);
    StackCache<double> cache;
    stack_sequence(f.params, f.x, st, &cache);
    BlockParams<double> grads(f.c);
    const auto dx = stack_backward(f.params, cache, f.weights, grads);

    SeededRng pick(34);
    std::vector<std::span<double>> param_spans, grad_spans;
    std::vector<std::string> names;
    f.params.visit([&](const std::string& n, std::span<double> s) {
        names.push_back(n);
        param_spans.push_back(s);
    });
    grads.visit([&](const std::string&, std::span<double> s) { grad_spans.push_back(s); });
    for (std::size_t g = 0; g < param_spans.size(); ++g) {
        auto& target = param_spans[g];
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < target.size(); ++i) idx.push_back(i);
        for (std::size_t i = 0; i + 1 < idx.size(); ++i) std::swap(idx[i], idx[i + pick.below(idx.size() - i)]);
        idx.resize(std::min<std::size_t>(idx.size(), 12));
        std::vector<double> x0;
        for (auto i : idx) x0.push_back(target[i]);
        const auto fd = finite_diff_grad(
            [&](std::span<const double> p) {
                for (std::size_t i = 0; i < idx.size(); ++i) target[idx[i]] = p[i];
                const double l = f.loss();
                for (std::size_t i = 0; i < idx.size(); ++i) target[idx[i]] = x0[i];
                return l;
            },
            x0, 1e-4);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const double a = grad_spans[g][idx[i]], b = fd[i];
            EXPECT_LE(std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-4}), 1e-3)
                << names[g] << "[" << idx[i] << "] analytic=" << a << " fd=" << b;
        }
    }
    // input gradient
    std::vector<double> x0(f.x.values().begin(), f.x.values().end());
    const auto fdx = finite_diff_grad(
        [&](std::span<const double> p) {
            std::copy(p.begin(), p.end(), f.x.values().begin());
            const double l = f.loss();
            std::copy(x0.begin(), x0.end(), f.x.values().begin());
            return l;
        },
        x0, 1e-4);
    for (std::size_t i = 0; i < fdx.size(); ++i)
        EXPECT_LE(std::abs(dx.values()[i] - fdx[i]) / std::max({std::abs(dx.values()[i]), std::abs(fdx[i]), 1e-4}),
                  1e-3);
}

TEST(BlockParams, ClampKeepsMixCoefficientsInRange) {
    const BlockConfig c{8, 2, 1};
    BlockParams<float> p(c);
    p.layers[0].mu_time[0] = -0.5f;
    p.layers[0].mu_channel[1] = 1.5f;
    clamp_mix_coefficients(p);
    EXPECT_EQ(p.layers[0].mu_time[0], 0.0f);
    EXPECT_EQ(p.layers[0].mu_channel[1], 1.0f);
}

} // namespace
} // namespace voxrnn
