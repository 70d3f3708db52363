#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <vector>

#include "apa/common.hpp"

namespace apa {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

template <typename T>
struct TensorStorage {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty until a backward pass touches this tensor
};

// Value-semantic handle onto shared dense row-major storage.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape)
        : s_(std::make_shared<TensorStorage<T>>()) {
        s_->shape = std::move(shape);
        s_->values.assign(shape_numel(s_->shape), T(0));
    }

    Tensor(Shape shape, std::vector<T> values)
        : s_(std::make_shared<TensorStorage<T>>()) {
        if (shape_numel(shape) != values.size())
            throw DimensionError("tensor: " + std::to_string(values.size()) +
                                 " values do not fill shape " + shape_str(shape));
        s_->shape = std::move(shape);
        s_->values = std::move(values);
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    bool valid() const { return s_ != nullptr; }
    const Shape& shape() const { return s_->shape; }
    std::size_t ndim() const { return s_->shape.size(); }
    std::size_t size() const { return s_->values.size(); }
    std::size_t extent(std::size_t axis) const { return s_->shape[axis]; }

    T* data() { return s_->values.data(); }
    const T* data() const { return s_->values.data(); }
    std::vector<T>& values() { return s_->values; }
    const std::vector<T>& values() const { return s_->values; }

    T& operator[](std::size_t i) { return s_->values[i]; }
    T operator[](std::size_t i) const { return s_->values[i]; }
    T& at(std::size_t r, std::size_t c) { return s_->values[r * s_->shape[1] + c]; }
    T at(std::size_t r, std::size_t c) const { return s_->values[r * s_->shape[1] + c]; }

    T item() const {
        if (size() != 1) throw ContractError("item: tensor " + shape_str(shape()) + " is not scalar");
        return s_->values[0];
    }

    bool has_grad() const { return s_ && !s_->grad.empty(); }
    void ensure_grad() {
        if (s_->grad.empty()) s_->grad.assign(s_->values.size(), T(0));
    }
    void zero_grad() {
        if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
    }
    std::vector<T>& grad() { return s_->grad; }
    const std::vector<T>& grad() const { return s_->grad; }

    std::shared_ptr<TensorStorage<T>>& storage() { return s_; }
    const std::shared_ptr<TensorStorage<T>>& storage() const { return s_; }

private:
    std::shared_ptr<TensorStorage<T>> s_;
};

// Reverse-mode tape. Records execute in forward order, so the list is
// topological by construction; backward replays it reversed.
template <typename T>
class Tape {
public:
    using StoragePtr = std::shared_ptr<TensorStorage<T>>;

    void record(std::vector<StoragePtr> inputs, StoragePtr output, std::function<void()> backward) {
        records_.push_back(Record{std::move(inputs), std::move(output), std::move(backward)});
    }

    std::size_t size() const { return records_.size(); }

    // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every tensor
    // reachable backwards from it. Gradients of untouched tensors stay absent;
    // tensors on the tape but off the loss path end with zero grad.
    void backward(const Tensor<T>& loss) {
        if (!loss.valid() || loss.size() != 1)
            throw ContractError("backward: loss must be a scalar tensor");
        std::unordered_set<TensorStorage<T>*> seen;
        auto prepare = [&seen](const StoragePtr& s) {
            if (seen.insert(s.get()).second) {
                if (s->grad.empty())
                    s->grad.assign(s->values.size(), T(0));
                else
                    std::fill(s->grad.begin(), s->grad.end(), T(0));
            }
        };
        for (const Record& r : records_) {
            for (const StoragePtr& in : r.inputs) prepare(in);
            prepare(r.output);
        }
        prepare(loss.storage());
        loss.storage()->grad[0] = T(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it)
            it->backward();
    }

private:
    struct Record {
        std::vector<StoragePtr> inputs;
        StoragePtr output;
        std::function<void()> backward;
    };
    std::vector<Record> records_;
};

namespace detail {

template <typename T>
void require_2d(const Tensor<T>& t, const char* op) {
    if (t.ndim() != 2)
        throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}

template <typename T>
inline T gauss_cdf(T x) {
    return T(0.5) * std::erfc(-x * T(0.70710678118654752440));
}

template <typename T>
inline T gauss_pdf(T x) {
    return std::exp(T(-0.5) * x * x) * T(0.39894228040143267794);
}

}  // namespace detail

// c[i,j] = sum_t a[i,t] * b[t,j]
template <typename T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    const std::size_t m = a.extent(0), k = a.extent(1), k2 = b.extent(0), n = b.extent(1);
    if (k != k2)
        throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> c({m, n});
    const T* pa = a.data();
    const T* pb = b.data();
    T* pc = c.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t t = 0; t < k; ++t) {
            const T av = pa[i * k + t];
            if (av == T(0)) continue;
            for (std::size_t j = 0; j < n; ++j) pc[i * n + j] += av * pb[t * n + j];
        }
    if (tape) {
        auto sa = a.storage(), sb = b.storage(), sc = c.storage();
        tape->record({sa, sb}, sc, [sa, sb, sc, m, k, n]() {
            const std::vector<T>& g = sc->grad;
            // dA += G * B^T
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t t = 0; t < k; ++t) {
                    T acc = 0;
                    for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * sb->values[t * n + j];
                    sa->grad[i * k + t] += acc;
                }
            // dB += A^T * G
            for (std::size_t t = 0; t < k; ++t)
                for (std::size_t i = 0; i < m; ++i) {
                    const T av = sa->values[i * k + t];
                    if (av == T(0)) continue;
                    for (std::size_t j = 0; j < n; ++j) sb->grad[t * n + j] += av * g[i * n + j];
                }
        });
    }
    return c;
}

// y = x W + b, broadcast over all leading axes of x.
template <typename T>
Tensor<T> affine(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    detail::require_2d(w, "affine");
    const std::size_t d_in = w.extent(0), d_out = w.extent(1);
    if (x.ndim() < 1 || x.shape().back() != d_in)
        throw DimensionError("affine: input " + shape_str(x.shape()) + " does not end in d_in of weight " +
                             shape_str(w.shape()));
    if (b.size() != d_out)
        throw DimensionError("affine: bias " + shape_str(b.shape()) + " does not match d_out " +
                             std::to_string(d_out));
    Shape out_shape = x.shape();
    out_shape.back() = d_out;
    const std::size_t rows = x.size() / d_in;
    Tensor<T> y(out_shape);
    const T* px = x.data();
    const T* pw = w.data();
    const T* pb = b.data();
    T* py = y.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d_out; ++j) py[r * d_out + j] = pb[j];
        for (std::size_t t = 0; t < d_in; ++t) {
            const T xv = px[r * d_in + t];
            if (xv == T(0)) continue;
            for (std::size_t j = 0; j < d_out; ++j) py[r * d_out + j] += xv * pw[t * d_out + j];
        }
    }
    if (tape) {
        auto sx = x.storage(), sw = w.storage(), sb = b.storage(), sy = y.storage();
        tape->record({sx, sw, sb}, sy, [sx, sw, sb, sy, rows, d_in, d_out]() {
            const std::vector<T>& g = sy->grad;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t t = 0; t < d_in; ++t) {
                    T acc = 0;
                    for (std::size_t j = 0; j < d_out; ++j) acc += g[r * d_out + j] * sw->values[t * d_out + j];
                    sx->grad[r * d_in + t] += acc;
                }
            for (std::size_t t = 0; t < d_in; ++t)
                for (std::size_t r = 0; r < rows; ++r) {
                    const T xv = sx->values[r * d_in + t];
                    if (xv == T(0)) continue;
                    for (std::size_t j = 0; j < d_out; ++j) sw->grad[t * d_out + j] += xv * g[r * d_out + j];
                }
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < d_out; ++j) sb->grad[j] += g[r * d_out + j];
        });
    }
    return y;
}

// Exact Gaussian-CDF form: x * Phi(x).
template <typename T>
Tensor<T> gelu(Tape<T>* tape, const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * detail::gauss_cdf(x[i]);
    if (tape) {
        auto sx = x.storage(), sy = y.storage();
        tape->record({sx}, sy, [sx, sy]() {
            for (std::size_t i = 0; i < sx->values.size(); ++i) {
                const T v = sx->values[i];
                sx->grad[i] += sy->grad[i] * (detail::gauss_cdf(v) + v * detail::gauss_pdf(v));
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> sigmoid(Tape<T>* tape, const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = T(1) / (T(1) + std::exp(-x[i]));
    if (tape) {
        auto sx = x.storage(), sy = y.storage();
        tape->record({sx}, sy, [sx, sy]() {
            for (std::size_t i = 0; i < sx->values.size(); ++i) {
                const T s = sy->values[i];
                sx->grad[i] += sy->grad[i] * s * (T(1) - s);
            }
        });
    }
    return y;
}

namespace detail {

// Shared kernel: per-row softmax over live columns, exact zeros elsewhere.
template <typename T>
void masked_softmax_rows_forward(const T* scores, T* out, std::size_t rows, std::size_t cols,
                                 const std::vector<char>& live) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* s = scores + r * cols;
        T* o = out + r * cols;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < cols; ++j)
            if (live[j] && s[j] > mx) mx = s[j];
        T denom = 0;
        for (std::size_t j = 0; j < cols; ++j) {
            if (live[j]) {
                o[j] = std::exp(s[j] - mx);
                denom += o[j];
            } else {
                o[j] = T(0);
            }
        }
        for (std::size_t j = 0; j < cols; ++j)
            if (live[j]) o[j] /= denom;
    }
}

template <typename T>
void masked_softmax_rows_backward(const T* out, const T* gout, T* gin, std::size_t rows, std::size_t cols,
                                  const std::vector<char>& live) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* a = out + r * cols;
        const T* g = gout + r * cols;
        T dot = 0;
        for (std::size_t j = 0; j < cols; ++j)
            if (live[j]) dot += a[j] * g[j];
        for (std::size_t j = 0; j < cols; ++j)
            if (live[j]) gin[r * cols + j] += a[j] * (g[j] - dot);
    }
}

}  // namespace detail

// 1-D masked softmax (Eq.-13 style): zeros at masked slots, live outputs sum to 1.
template <typename T>
Tensor<T> masked_softmax(Tape<T>* tape, const Tensor<T>& scores, const std::vector<char>& live) {
    if (scores.ndim() != 1 || scores.size() != live.size())
        throw DimensionError("masked_softmax: scores " + shape_str(scores.shape()) + " vs mask of " +
                             std::to_string(live.size()));
    if (std::find(live.begin(), live.end(), char(1)) == live.end())
        throw DegenerateInputError("masked_softmax: all positions masked");
    Tensor<T> out(scores.shape());
    detail::masked_softmax_rows_forward(scores.data(), out.data(), 1, scores.size(), live);
    if (tape) {
        auto ss = scores.storage(), so = out.storage();
        const std::size_t n = scores.size();
        tape->record({ss}, so, [ss, so, live, n]() {
            detail::masked_softmax_rows_backward(so->values.data(), so->grad.data(), ss->grad.data(), 1, n, live);
        });
    }
    return out;
}

// Row-wise variant for attention: every row is softmaxed over live key columns.
template <typename T>
Tensor<T> masked_softmax_rows(Tape<T>* tape, const Tensor<T>& scores, const std::vector<char>& live) {
    detail::require_2d(scores, "masked_softmax_rows");
    if (scores.extent(1) != live.size())
        throw DimensionError("masked_softmax_rows: " + shape_str(scores.shape()) + " vs mask of " +
                             std::to_string(live.size()));
    if (std::find(live.begin(), live.end(), char(1)) == live.end())
        throw DegenerateInputError("masked_softmax_rows: all positions masked");
    const std::size_t rows = scores.extent(0), cols = scores.extent(1);
    Tensor<T> out(scores.shape());
    detail::masked_softmax_rows_forward(scores.data(), out.data(), rows, cols, live);
    if (tape) {
        auto ss = scores.storage(), so = out.storage();
        tape->record({ss}, so, [ss, so, live, rows, cols]() {
            detail::masked_softmax_rows_backward(so->values.data(), so->grad.data(), ss->grad.data(), rows, cols,
                                                 live);
        });
    }
    return out;
}

template <typename T>
Tensor<T> layer_norm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    const std::size_t d = x.shape().back();
    if (gamma.size() != d || beta.size() != d)
        throw DimensionError("layer_norm: gamma/beta do not match trailing extent " + std::to_string(d));
    const std::size_t rows = x.size() / d;
    Tensor<T> y(x.shape());
    std::vector<T> inv_sigma(rows), mean(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* px = x.data() + r * d;
        T mu = 0;
        for (std::size_t j = 0; j < d; ++j) mu += px[j];
        mu /= T(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (px[j] - mu) * (px[j] - mu);
        var /= T(d);
        const T is = T(1) / std::sqrt(var + eps);
        mean[r] = mu;
        inv_sigma[r] = is;
        T* py = y.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) py[j] = gamma[j] * (px[j] - mu) * is + beta[j];
    }
    if (tape) {
        auto sx = x.storage(), sg = gamma.storage(), sb = beta.storage(), sy = y.storage();
        tape->record({sx, sg, sb}, sy, [sx, sg, sb, sy, rows, d, mean, inv_sigma]() {
            for (std::size_t r = 0; r < rows; ++r) {
                const T* px = sx->values.data() + r * d;
                const T* g = sy->grad.data() + r * d;
                const T mu = mean[r];
                const T is = inv_sigma[r];
                T sum_gg = 0, sum_ggx = 0;
                for (std::size_t j = 0; j < d; ++j) {
                    const T xhat = (px[j] - mu) * is;
                    const T gg = g[j] * sg->values[j];
                    sum_gg += gg;
                    sum_ggx += gg * xhat;
                    sg->grad[j] += g[j] * xhat;
                    sb->grad[j] += g[j];
                }
                for (std::size_t j = 0; j < d; ++j) {
                    const T xhat = (px[j] - mu) * is;
                    const T gg = g[j] * sg->values[j];
                    sx->grad[r * d + j] += is * (gg - sum_gg / T(d) - xhat * sum_ggx / T(d));
                }
            }
        });
    }
    return y;
}

// Row gather; backward scatter-adds into the table.
template <typename T>
Tensor<T> embedding_lookup(Tape<T>* tape, const Tensor<T>& table, const std::vector<int>& ids) {
    detail::require_2d(table, "embedding_lookup");
    const std::size_t v = table.extent(0), d = table.extent(1);
    for (int id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= v)
            throw IndexError("embedding_lookup: id " + std::to_string(id) + " outside table of " +
                             std::to_string(v) + " rows");
    Tensor<T> out({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(table.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
    if (tape) {
        auto st = table.storage(), so = out.storage();
        tape->record({st}, so, [st, so, ids, d]() {
            for (std::size_t i = 0; i < ids.size(); ++i) {
                const T* g = so->grad.data() + i * d;
                T* tg = st->grad.data() + static_cast<std::size_t>(ids[i]) * d;
                for (std::size_t j = 0; j < d; ++j) tg[j] += g[j];
            }
        });
    }
    return out;
}

// Per-channel 1-D convolution, odd kernel, zero padding, stride 1.
template <typename T>
Tensor<T> depthwise_conv1d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& kernels, const Tensor<T>& bias) {
    detail::require_2d(x, "depthwise_conv1d");
    detail::require_2d(kernels, "depthwise_conv1d");
    const std::size_t steps = x.extent(0), ch = x.extent(1);
    const std::size_t k = kernels.extent(1);
    if (kernels.extent(0) != ch)
        throw DimensionError("depthwise_conv1d: kernels " + shape_str(kernels.shape()) + " vs " +
                             std::to_string(ch) + " channels");
    if (bias.size() != ch)
        throw DimensionError("depthwise_conv1d: bias " + shape_str(bias.shape()) + " vs " + std::to_string(ch) +
                             " channels");
    if (k % 2 == 0)
        throw ConfigError("depthwise_conv1d: kernel size " + std::to_string(k) + " must be odd");
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k - 1) / 2;
    Tensor<T> y(x.shape());
    for (std::size_t c = 0; c < ch; ++c) {
        const T* kc = kernels.data() + c * k;
        for (std::size_t t = 0; t < steps; ++t) {
            T acc = bias[c];
            for (std::size_t tap = 0; tap < k; ++tap) {
                const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(tap) - pad;
                if (src >= 0 && src < static_cast<std::ptrdiff_t>(steps))
                    acc += kc[tap] * x.at(static_cast<std::size_t>(src), c);
            }
            y.at(t, c) = acc;
        }
    }
    if (tape) {
        auto sx = x.storage(), sk = kernels.storage(), sb = bias.storage(), sy = y.storage();
        tape->record({sx, sk, sb}, sy, [sx, sk, sb, sy, steps, ch, k, pad]() {
            for (std::size_t c = 0; c < ch; ++c) {
                const T* kc = sk->values.data() + c * k;
                for (std::size_t t = 0; t < steps; ++t) {
                    const T g = sy->grad[t * ch + c];
                    if (g == T(0)) continue;
                    sb->grad[c] += g;
                    for (std::size_t tap = 0; tap < k; ++tap) {
                        const std::ptrdiff_t src =
                            static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(tap) - pad;
                        if (src >= 0 && src < static_cast<std::ptrdiff_t>(steps)) {
                            sk->grad[c * k + tap] += g * sx->values[static_cast<std::size_t>(src) * ch + c];
                            sx->grad[static_cast<std::size_t>(src) * ch + c] += g * kc[tap];
                        }
                    }
                }
            }
        });
    }
    return y;
}

// ---- glue ops -------------------------------------------------------------

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
    if (tape) {
        auto sa = a.storage(), sb = b.storage(), sy = y.storage();
        tape->record({sa, sb}, sy, [sa, sb, sy]() {
            for (std::size_t i = 0; i < sy->grad.size(); ++i) {
                sa->grad[i] += sy->grad[i];
                sb->grad[i] += sy->grad[i];
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> sub(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] - b[i];
    if (tape) {
        auto sa = a.storage(), sb = b.storage(), sy = y.storage();
        tape->record({sa, sb}, sy, [sa, sb, sy]() {
            for (std::size_t i = 0; i < sy->grad.size(); ++i) {
                sa->grad[i] += sy->grad[i];
                sb->grad[i] -= sy->grad[i];
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] * b[i];
    if (tape) {
        auto sa = a.storage(), sb = b.storage(), sy = y.storage();
        tape->record({sa, sb}, sy, [sa, sb, sy]() {
            for (std::size_t i = 0; i < sy->grad.size(); ++i) {
                sa->grad[i] += sy->grad[i] * sb->values[i];
                sb->grad[i] += sy->grad[i] * sa->values[i];
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& x, T c) {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * c;
    if (tape) {
        auto sx = x.storage(), sy = y.storage();
        tape->record({sx}, sy, [sx, sy, c]() {
            for (std::size_t i = 0; i < sy->grad.size(); ++i) sx->grad[i] += sy->grad[i] * c;
        });
    }
    return y;
}

template <typename T>
Tensor<T> add_const(Tape<T>* tape, const Tensor<T>& x, T c) {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + c;
    if (tape) {
        auto sx = x.storage(), sy = y.storage();
        tape->record({sx}, sy, [sx, sy]() {
            for (std::size_t i = 0; i < sy->grad.size(); ++i) sx->grad[i] += sy->grad[i];
        });
    }
    return y;
}

template <typename T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& x) {
    T acc = 0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i];
    Tensor<T> y = Tensor<T>::scalar(acc);
    if (tape) {
        auto sx = x.storage(), sy = y.storage();
        tape->record({sx}, sy, [sx, sy]() {
            for (std::size_t i = 0; i < sx->grad.size(); ++i) sx->grad[i] += sy->grad[0];
        });
    }
    return y;
}

// Sum over live positions of a 1-D tensor.
template <typename T>
Tensor<T> masked_sum(Tape<T>* tape, const Tensor<T>& x, const std::vector<char>& live) {
    if (x.ndim() != 1 || x.size() != live.size())
        throw DimensionError("masked_sum: " + shape_str(x.shape()) + " vs mask of " + std::to_string(live.size()));
    T acc = 0;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (live[i]) acc += x[i];
    Tensor<T> y = Tensor<T>::scalar(acc);
    if (tape) {
        auto sx = x.storage(), sy = y.storage();
        tape->record({sx}, sy, [sx, sy, live]() {
            for (std::size_t i = 0; i < sx->grad.size(); ++i)
                if (live[i]) sx->grad[i] += sy->grad[0];
        });
    }
    return y;
}

// Rows at dead positions become zero; live rows pass through.
template <typename T>
Tensor<T> zero_masked_rows(Tape<T>* tape, const Tensor<T>& x, const std::vector<char>& live) {
    detail::require_2d(x, "zero_masked_rows");
    if (x.extent(0) != live.size())
        throw DimensionError("zero_masked_rows: " + shape_str(x.shape()) + " vs mask of " +
                             std::to_string(live.size()));
    const std::size_t rows = x.extent(0), d = x.extent(1);
    Tensor<T> y(x.shape());
    for (std::size_t r = 0; r < rows; ++r)
        if (live[r]) std::copy_n(x.data() + r * d, d, y.data() + r * d);
    if (tape) {
        auto sx = x.storage(), sy = y.storage();
        tape->record({sx}, sy, [sx, sy, live, rows, d]() {
            for (std::size_t r = 0; r < rows; ++r)
                if (live[r])
                    for (std::size_t j = 0; j < d; ++j) sx->grad[r * d + j] += sy->grad[r * d + j];
        });
    }
    return y;
}

template <typename T>
Tensor<T> transpose(Tape<T>* tape, const Tensor<T>& x) {
    detail::require_2d(x, "transpose");
    const std::size_t m = x.extent(0), n = x.extent(1);
    Tensor<T> y({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) y.at(j, i) = x.at(i, j);
    if (tape) {
        auto sx = x.storage(), sy = y.storage();
        tape->record({sx}, sy, [sx, sy, m, n]() {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) sx->grad[i * n + j] += sy->grad[j * m + i];
        });
    }
    return y;
}

// Same data, new shape. Copies so downstream mutation cannot alias.
template <typename T>
Tensor<T> reshape(Tape<T>* tape, const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.size())
        throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
    Tensor<T> y(std::move(shape), std::vector<T>(x.values()));
    if (tape) {
        auto sx = x.storage(), sy = y.storage();
        tape->record({sx}, sy, [sx, sy]() {
            for (std::size_t i = 0; i < sx->grad.size(); ++i) sx->grad[i] += sy->grad[i];
        });
    }
    return y;
}

// Contiguous column window of a 2-D tensor.
template <typename T>
Tensor<T> slice_cols(Tape<T>* tape, const Tensor<T>& x, std::size_t start, std::size_t len) {
    detail::require_2d(x, "slice_cols");
    const std::size_t rows = x.extent(0), cols = x.extent(1);
    if (start + len > cols)
        throw DimensionError("slice_cols: window [" + std::to_string(start) + ", " + std::to_string(start + len) +
                             ") exceeds " + shape_str(x.shape()));
    Tensor<T> y({rows, len});
    for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(x.data() + r * cols + start, len, y.data() + r * len);
    if (tape) {
        auto sx = x.storage(), sy = y.storage();
        tape->record({sx}, sy, [sx, sy, rows, cols, start, len]() {
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < len; ++j) sx->grad[r * cols + start + j] += sy->grad[r * len + j];
        });
    }
    return y;
}

// Horizontal concatenation of 2-D tensors with equal row counts.
template <typename T>
Tensor<T> concat_cols(Tape<T>* tape, const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no parts");
    const std::size_t rows = parts[0].extent(0);
    std::size_t cols = 0;
    for (const Tensor<T>& p : parts) {
        detail::require_2d(p, "concat_cols");
        if (p.extent(0) != rows)
            throw DimensionError("concat_cols: " + shape_str(p.shape()) + " vs " + std::to_string(rows) + " rows");
        cols += p.extent(1);
    }
    Tensor<T> y({rows, cols});
    std::size_t at = 0;
    for (const Tensor<T>& p : parts) {
        const std::size_t w = p.extent(1);
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(p.data() + r * w, w, y.data() + r * cols + at);
        at += w;
    }
    if (tape) {
        std::vector<typename Tape<T>::StoragePtr> ins;
        std::vector<std::size_t> widths;
        for (const Tensor<T>& p : parts) {
            ins.push_back(p.storage());
            widths.push_back(p.extent(1));
        }
        auto sy = y.storage();
        tape->record(ins, sy, [ins, widths, sy, rows, cols]() {
            std::size_t at = 0;
            for (std::size_t k = 0; k < ins.size(); ++k) {
                const std::size_t w = widths[k];
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < w; ++j) ins[k]->grad[r * w + j] += sy->grad[r * cols + at + j];
                at += w;
            }
        });
    }
    return y;
}

// k same-length 1-D tensors -> [len x k]
template <typename T>
Tensor<T> stack_cols(Tape<T>* tape, const std::vector<Tensor<T>>& cols) {
    if (cols.empty()) throw ContractError("stack_cols: no columns");
    const std::size_t len = cols[0].size(), k = cols.size();
    for (const Tensor<T>& c : cols)
        if (c.ndim() != 1 || c.size() != len)
            throw DimensionError("stack_cols: column " + shape_str(c.shape()) + " vs length " + std::to_string(len));
    Tensor<T> y({len, k});
    for (std::size_t j = 0; j < k; ++j)
        for (std::size_t i = 0; i < len; ++i) y.at(i, j) = cols[j][i];
    if (tape) {
        std::vector<typename Tape<T>::StoragePtr> ins;
        for (const Tensor<T>& c : cols) ins.push_back(c.storage());
        auto sy = y.storage();
        tape->record(ins, sy, [ins, sy, len, k]() {
            for (std::size_t j = 0; j < k; ++j)
                for (std::size_t i = 0; i < len; ++i) ins[j]->grad[i] += sy->grad[i * k + j];
        });
    }
    return y;
}

}  // namespace apa
