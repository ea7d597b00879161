#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "voxrnn/errors.hpp"

namespace voxrnn {

/// Row-major dense matrix. Parameters and activations use `Matrix` (f32);
/// the f64 instantiation exists so gradient oracles can run the same code
/// at higher precision.
template <class T>
class basic_matrix {
public:
    using value_type = T;

    basic_matrix() = default;
    basic_matrix(std::size_t rows, std::size_t cols, T fill = T{})
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    basic_matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw shape_error("matrix data length " + std::to_string(data_.size()) +
                              " does not match " + std::to_string(rows_) + "x" +
                              std::to_string(cols_));
    }
    basic_matrix(std::initializer_list<std::initializer_list<T>> rows) {
        rows_ = rows.size();
        cols_ = rows_ ? rows.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) throw shape_error("ragged matrix literal");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    std::string shape() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    /// Keeps the first `n` rows.
    void truncate_rows(std::size_t n) {
        rows_ = std::min(rows_, n);
        data_.resize(rows_ * cols_);
    }
    void append_row(std::span<const T> r) {
        if (r.size() != cols_) throw shape_error("append_row width mismatch");
        data_.insert(data_.end(), r.begin(), r.end());
        ++rows_;
    }

    template <class U>
    basic_matrix<U> cast() const {
        basic_matrix<U> out(rows_, cols_);
        std::transform(data_.begin(), data_.end(), out.data(),
                       [](T v) { return static_cast<U>(v); });
        return out;
    }

    friend bool operator==(const basic_matrix&, const basic_matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using Matrix = basic_matrix<float>;

template <class Span>
bool all_finite(const Span& xs) {
    return std::all_of(std::begin(xs), std::end(xs), [](auto v) { return std::isfinite(v); });
}

namespace kernel {

/// out[i][j] = sum_k a[i][k] * b[k][j] accumulated in f64 in ascending k.
/// Output is tiled 4 rows x 32 columns; every element sees the same operation
/// sequence regardless of tiling, so a row computed alone is bitwise
/// identical to the same row computed inside a larger batch.
template <class T>
void matmul(const T* a, std::size_t rows, std::size_t inner, const T* b, std::size_t cols,
            T* out) {
    constexpr std::size_t kBlock = 4;
    constexpr std::size_t kTile = 32;
    for (std::size_t j0 = 0; j0 < cols; j0 += kTile) {
        const std::size_t nj = std::min(kTile, cols - j0);
        for (std::size_t i0 = 0; i0 < rows; i0 += kBlock) {
            const std::size_t nb = std::min(kBlock, rows - i0);
            double acc[kBlock][kTile] = {};
            if (nb == kBlock && nj == kTile) {
                for (std::size_t k = 0; k < inner; ++k) {
                    const T* brow = b + k * cols + j0;
                    double bv[kTile];
                    for (std::size_t j = 0; j < kTile; ++j) bv[j] = static_cast<double>(brow[j]);
                    for (std::size_t r = 0; r < kBlock; ++r) {
                        const double av = static_cast<double>(a[(i0 + r) * inner + k]);
                        for (std::size_t j = 0; j < kTile; ++j) acc[r][j] += av * bv[j];
                    }
                }
            } else {
                for (std::size_t k = 0; k < inner; ++k) {
                    const T* brow = b + k * cols + j0;
                    for (std::size_t r = 0; r < nb; ++r) {
                        const double av = static_cast<double>(a[(i0 + r) * inner + k]);
                        for (std::size_t j = 0; j < nj; ++j) acc[r][j] += av * static_cast<double>(brow[j]);
                    }
                }
            }
            for (std::size_t r = 0; r < nb; ++r)
                for (std::size_t j = 0; j < nj; ++j)
                    out[(i0 + r) * cols + j0 + j] = static_cast<T>(acc[r][j]);
        }
    }
}

template <class T>
basic_matrix<T> transpose(const basic_matrix<T>& m) {
    basic_matrix<T> t(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
    return t;
}

/// grad += a^T * dy   (a: T x in, dy: T x out, grad: in x out)
template <class T>
void accumulate_at_b(const basic_matrix<T>& a, const basic_matrix<T>& dy, basic_matrix<T>& grad) {
    const basic_matrix<T> at = transpose(a);
    basic_matrix<T> tmp(at.rows(), dy.cols());
    matmul(at.data(), at.rows(), at.cols(), dy.data(), dy.cols(), tmp.data());
    auto g = grad.values();
    auto s = tmp.values();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s[i];
}

/// dx += dy * w^T   (dy: T x out, w: in x out, dx: T x in)
template <class T>
void accumulate_a_bt(const basic_matrix<T>& dy, const basic_matrix<T>& w, basic_matrix<T>& dx) {
    const basic_matrix<T> wt = transpose(w);
    basic_matrix<T> tmp(dy.rows(), wt.cols());
    matmul(dy.data(), dy.rows(), dy.cols(), wt.data(), wt.cols(), tmp.data());
    auto g = dx.values();
    auto s = tmp.values();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s[i];
}

} // namespace kernel

template <class T>
basic_matrix<T> matmul(const basic_matrix<T>& a, const basic_matrix<T>& b) {
    if (a.cols() != b.rows())
        throw shape_error("matmul: cannot multiply " + a.shape() + " by " + b.shape());
    basic_matrix<T> out(a.rows(), b.cols());
    kernel::matmul(a.data(), a.rows(), a.cols(), b.data(), b.cols(), out.data());
    if (!all_finite(out.values())) throw data_error("matmul: non-finite result");
    return out;
}

template <class T>
std::vector<T> softmax(std::span<const T> x, double temperature = 1.0) {
    if (!(temperature > 0.0))
        throw parameter_error("softmax: temperature must be positive, got " +
                              std::to_string(temperature));
    std::vector<T> out(x.size());
    if (x.empty()) return out;
    double m = -std::numeric_limits<double>::infinity();
    for (T v : x) m = std::max(m, static_cast<double>(v));
    std::vector<double> e(x.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        e[i] = std::exp((static_cast<double>(x[i]) - m) / temperature);
        sum += e[i];
    }
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<T>(e[i] / sum);
    return out;
}

template <class T>
std::vector<T> softmax(const std::vector<T>& x, double temperature = 1.0) {
    return softmax(std::span<const T>(x), temperature);
}

struct LossValue {
    double loss = 0.0;
    std::size_t count = 0;
};

namespace detail {

template <class T>
void check_ce_inputs(const basic_matrix<T>& logits, std::span<const std::int32_t> targets,
                     std::span<const std::uint8_t> mask) {
    if (targets.size() != logits.rows() || mask.size() != logits.rows())
        throw shape_error("cross_entropy: logits " + logits.shape() + ", targets " +
                          std::to_string(targets.size()) + ", mask " +
                          std::to_string(mask.size()));
    std::size_t count = 0;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        if (!mask[t]) continue;
        ++count;
        if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= logits.cols())
            throw data_error("cross_entropy: target " + std::to_string(targets[t]) +
                             " at position " + std::to_string(t) + " outside vocabulary of " +
                             std::to_string(logits.cols()));
    }
    if (count == 0) throw empty_loss_error("cross_entropy: no masked-in positions");
}

template <class T>
double log_sum_exp(std::span<const T> row) {
    double m = -std::numeric_limits<double>::infinity();
    for (T v : row) m = std::max(m, static_cast<double>(v));
    double s = 0.0;
    for (T v : row) s += std::exp(static_cast<double>(v) - m);
    return m + std::log(s);
}

} // namespace detail

/// Mean of -log softmax(logits[t])[targets[t]] over positions where mask[t] != 0.
template <class T>
LossValue cross_entropy(const basic_matrix<T>& logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> mask) {
    detail::check_ce_inputs(logits, targets, mask);
    LossValue out;
    double total = 0.0;
    for (std::size_t t = 0; t < logits.rows(); ++t) {
        if (!mask[t]) continue;
        const auto row = logits.row(t);
        total += detail::log_sum_exp(row) - static_cast<double>(row[targets[t]]);
        ++out.count;
    }
    out.loss = total / static_cast<double>(out.count);
    return out;
}

/// d(mean loss)/d(logits): (softmax - onehot) / count on masked rows, zero elsewhere.
template <class T>
basic_matrix<T> cross_entropy_backward(const basic_matrix<T>& logits,
                                       std::span<const std::int32_t> targets,
                                       std::span<const std::uint8_t> mask, double scale = 1.0) {
    detail::check_ce_inputs(logits, targets, mask);
    std::size_t count = 0;
    for (auto m : mask) count += m ? 1 : 0;
    basic_matrix<T> grad(logits.rows(), logits.cols());
    const double w = scale / static_cast<double>(count);
    for (std::size_t t = 0; t < logits.rows(); ++t) {
        if (!mask[t]) continue;
        const auto row = logits.row(t);
        const double lse = detail::log_sum_exp(row);
        auto g = grad.row(t);
        for (std::size_t j = 0; j < row.size(); ++j)
            g[j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - lse) * w);
        g[targets[t]] = static_cast<T>(static_cast<double>(g[targets[t]]) - w);
    }
    return grad;
}

enum class FdStencil { three_point, five_point };

/// Central-difference gradient of `f` at `x`. Oracle for every backward pass.
/// The five-point stencil has O(h^4) truncation error instead of O(h^2).
inline std::vector<double> finite_diff_grad(
    const std::function<double(std::span<const double>)>& f, std::span<const double> x,
    double h, FdStencil stencil = FdStencil::three_point) {
    if (!(h > 0.0)) throw parameter_error("finite_diff_grad: step must be positive");
    std::vector<double> probe(x.begin(), x.end());
    std::vector<double> grad(x.size());
    auto at = [&](std::size_t i, double offset) {
        probe[i] = x[i] + offset;
        const double v = f(probe);
        probe[i] = x[i];
        if (!std::isfinite(v))
            throw oracle_error("finite_diff_grad: non-finite value probing coordinate " + std::to_string(i));
        return v;
    };
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (stencil == FdStencil::three_point)
            grad[i] = (at(i, h) - at(i, -h)) / (2.0 * h);
        else
            grad[i] = (at(i, -2.0 * h) - 8.0 * at(i, -h) + 8.0 * at(i, h) - at(i, 2.0 * h)) / (12.0 * h);
    }
    return grad;
}

inline constexpr double kNormEps = 1e-5;

/// Writes x * gain / sqrt(mean(x^2) + eps) into out and returns the inverse RMS.
template <class T>
double rms_norm_into(std::span<const T> x, std::span<const T> gain, double eps,
                     std::span<T> out) {
    double ss = 0.0;
    for (T v : x) ss += static_cast<double>(v) * static_cast<double>(v);
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + eps);
    for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = static_cast<T>(static_cast<double>(x[i]) * inv * static_cast<double>(gain[i]));
    return inv;
}

template <class T>
std::vector<T> rms_norm(std::span<const T> x, std::span<const T> gain, double eps = kNormEps) {
    if (x.size() != gain.size())
        throw shape_error("rms_norm: input length " + std::to_string(x.size()) +
                          " vs gain length " + std::to_string(gain.size()));
    if (!(eps > 0.0)) throw parameter_error("rms_norm: eps must be positive");
    std::vector<T> out(x.size());
    if (!x.empty()) rms_norm_into<T>(x, gain, eps, out);
    return out;
}

template <class T>
std::vector<T> rms_norm(const std::vector<T>& x, const std::vector<T>& gain,
                        double eps = kNormEps) {
    return rms_norm(std::span<const T>(x), std::span<const T>(gain), eps);
}

/// Backward of y = x * gain * inv with inv = 1/sqrt(mean(x^2)+eps).
/// Adds into dx and dgain.
template <class T>
void rms_norm_backward(std::span<const T> x, std::span<const T> gain, double inv,
                       std::span<const T> dy, std::span<T> dx, std::span<T> dgain) {
    const std::size_t n = x.size();
    double dot = 0.0; // sum_i dn_i * n_i
    for (std::size_t i = 0; i < n; ++i) {
        const double ni = static_cast<double>(x[i]) * inv;
        const double dni = static_cast<double>(dy[i]) * static_cast<double>(gain[i]);
        dgain[i] += static_cast<T>(static_cast<double>(dy[i]) * ni);
        dot += dni * ni;
    }
    const double mean_dot = dot / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double ni = static_cast<double>(x[i]) * inv;
        const double dni = static_cast<double>(dy[i]) * static_cast<double>(gain[i]);
        dx[i] += static_cast<T>((dni - ni * mean_dot) * inv);
    }
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace voxrnn
