#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "apa/common.hpp"
#include "apa/data.hpp"
#include "apa/gradcheck.hpp"
#include "apa/model.hpp"
#include "apa/supphone.hpp"
#include "apa/tensor.hpp"
#include "apa/training.hpp"

namespace apa {

struct GradSuiteCheck {
    std::string name;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

struct GradSuiteResult {
    std::vector<GradSuiteCheck> checks;
    bool all_pass = true;
    double elapsed_seconds = 0.0;
};

namespace detail {

inline Tensor<double> rand_tensor(Rng& rng, Shape shape) {
    Tensor<double> t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1.0, 1.0);
    return t;
}

// Squared-sum readout so every input coordinate sees curvature.
inline Tensor<double> sq_sum(Tape<double>& tape, const Tensor<double>& y) {
    return sum(&tape, mul(&tape, y, y));
}

// gelu forward with a deliberately scaled backward; exists only so the suite
// can prove it detects a wrong gradient.
inline Tensor<double> gelu_skewed(Tape<double>* tape, const Tensor<double>& x, double skew) {
    Tensor<double> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * gauss_cdf(x[i]);
    if (tape) {
        auto sx = x.storage();
        auto sy = y.storage();
        tape->record({sx}, sy, [sx, sy, skew]() {
            for (std::size_t i = 0; i < sx->values.size(); ++i) {
                const double v = sx->values[i];
                const double d = gauss_cdf(v) + v * gauss_pdf(v);
                sx->grad[i] += (1.0 + skew) * d * sy->grad[i];
            }
        });
    }
    return y;
}

}  // namespace detail

// Finite-difference audit of every differentiable operation plus the composed
// model, in double precision. `inject_fault` adds one check with a skewed
// backward pass that must fail; it is the suite's negative control.
inline GradSuiteResult run_gradient_suite(std::uint64_t base_seed, std::size_t n_seeds,
                                          double inject_fault = 0.0) {
    const auto t0 = std::chrono::steady_clock::now();
    constexpr double kOpTol = 1e-6;
    GradSuiteResult out;

    auto record = [&out](const std::string& name, double rel, double tol) {
        for (GradSuiteCheck& c : out.checks)
            if (c.name == name) {
                c.max_rel_err = std::max(c.max_rel_err, rel);
                c.pass = c.max_rel_err <= c.tolerance;
                return;
            }
        out.checks.push_back({name, rel, tol, rel <= tol});
    };

    using P = std::vector<std::pair<std::string, Tensor<double>>>;
    auto check_op = [&record](const std::string& name, const P& params,
                              const std::function<Tensor<double>(Tape<double>&)>& fwd) {
        GradCheckResult r = finite_difference_check<double>(fwd, params, kOpTol);
        record(name, r.max_rel_err, kOpTol);
    };

    for (std::size_t si = 0; si < n_seeds; ++si) {
        Rng rng(base_seed + si);
        using detail::rand_tensor;
        using detail::sq_sum;

        {
            Tensor<double> a = rand_tensor(rng, {3, 4}), b = rand_tensor(rng, {4, 2});
            check_op("matmul", {{"a", a}, {"b", b}},
                     [&](Tape<double>& t) { return sq_sum(t, matmul(&t, a, b)); });
        }
        {
            Tensor<double> x = rand_tensor(rng, {3, 4}), w = rand_tensor(rng, {4, 2}),
                           b = rand_tensor(rng, {2});
            check_op("affine", {{"x", x}, {"w", w}, {"b", b}},
                     [&](Tape<double>& t) { return sq_sum(t, affine(&t, x, w, b)); });
        }
        {
            Tensor<double> x = rand_tensor(rng, {6});
            check_op("gelu", {{"x", x}}, [&](Tape<double>& t) { return sq_sum(t, gelu(&t, x)); });
        }
        {
            Tensor<double> x = rand_tensor(rng, {6});
            check_op("sigmoid", {{"x", x}}, [&](Tape<double>& t) { return sq_sum(t, sigmoid(&t, x)); });
        }
        {
            Tensor<double> s = rand_tensor(rng, {5});
            const std::vector<char> live{1, 1, 1, 0, 1};
            check_op("masked_softmax", {{"s", s}},
                     [&](Tape<double>& t) { return sq_sum(t, masked_softmax(&t, s, live)); });
        }
        {
            Tensor<double> s = rand_tensor(rng, {3, 4});
            const std::vector<char> live{1, 1, 0, 1};
            check_op("masked_softmax_rows", {{"s", s}},
                     [&](Tape<double>& t) { return sq_sum(t, masked_softmax_rows(&t, s, live)); });
        }
        {
            Tensor<double> x = rand_tensor(rng, {3, 5}), g = rand_tensor(rng, {5}), b = rand_tensor(rng, {5});
            check_op("layer_norm", {{"x", x}, {"gamma", g}, {"beta", b}}, [&](Tape<double>& t) {
                return sq_sum(t, layer_norm(&t, x, g, b, kLayerNormEps));
            });
        }
        {
            Tensor<double> table = rand_tensor(rng, {7, 3});
            const std::vector<int> ids{2, 5, 2, 0};
            check_op("embedding_lookup", {{"table", table}},
                     [&](Tape<double>& t) { return sq_sum(t, embedding_lookup(&t, table, ids)); });
        }
        {
            Tensor<double> x = rand_tensor(rng, {6, 4}), k = rand_tensor(rng, {4, 3}), b = rand_tensor(rng, {4});
            check_op("depthwise_conv1d", {{"x", x}, {"k", k}, {"b", b}}, [&](Tape<double>& t) {
                return sq_sum(t, depthwise_conv1d(&t, x, k, b));
            });
        }
        {
            Tensor<double> a = rand_tensor(rng, {5}), b = rand_tensor(rng, {5});
            check_op("add", {{"a", a}, {"b", b}}, [&](Tape<double>& t) { return sq_sum(t, add(&t, a, b)); });
            check_op("sub", {{"a", a}, {"b", b}}, [&](Tape<double>& t) { return sq_sum(t, sub(&t, a, b)); });
            check_op("mul", {{"a", a}, {"b", b}}, [&](Tape<double>& t) { return sq_sum(t, mul(&t, a, b)); });
        }
        {
            Tensor<double> x = rand_tensor(rng, {5});
            check_op("scale", {{"x", x}}, [&](Tape<double>& t) { return sq_sum(t, scale(&t, x, 1.7)); });
            check_op("add_const", {{"x", x}},
                     [&](Tape<double>& t) { return sq_sum(t, add_const(&t, x, 0.3)); });
        }
        {
            Tensor<double> x = rand_tensor(rng, {7});
            check_op("sum", {{"x", x}}, [&](Tape<double>& t) {
                Tensor<double> y = sum(&t, x);
                return mul(&t, y, y);
            });
        }
        {
            Tensor<double> x = rand_tensor(rng, {6});
            const std::vector<char> live{1, 0, 1, 1, 0, 1};
            check_op("masked_sum", {{"x", x}}, [&](Tape<double>& t) {
                Tensor<double> y = masked_sum(&t, x, live);
                return mul(&t, y, y);
            });
        }
        {
            Tensor<double> x = rand_tensor(rng, {4, 3});
            const std::vector<char> live{1, 0, 1, 1};
            check_op("zero_masked_rows", {{"x", x}},
                     [&](Tape<double>& t) { return sq_sum(t, zero_masked_rows(&t, x, live)); });
        }
        {
            Tensor<double> x = rand_tensor(rng, {3, 4});
            check_op("transpose", {{"x", x}},
                     [&](Tape<double>& t) { return sq_sum(t, transpose(&t, x)); });
            check_op("reshape", {{"x", x}},
                     [&](Tape<double>& t) { return sq_sum(t, reshape(&t, x, {2, 6})); });
        }
        {
            Tensor<double> x = rand_tensor(rng, {3, 6});
            check_op("slice_cols", {{"x", x}},
                     [&](Tape<double>& t) { return sq_sum(t, slice_cols(&t, x, 2, 3)); });
        }
        {
            Tensor<double> a = rand_tensor(rng, {3, 2}), b = rand_tensor(rng, {3, 3});
            check_op("concat_cols", {{"a", a}, {"b", b}}, [&](Tape<double>& t) {
                return sq_sum(t, concat_cols(&t, {a, b}));
            });
        }
        {
            Tensor<double> a = rand_tensor(rng, {4}), b = rand_tensor(rng, {4}), c = rand_tensor(rng, {4});
            check_op("stack_cols", {{"a", a}, {"b", b}, {"c", c}}, [&](Tape<double>& t) {
                return sq_sum(t, stack_cols(&t, {a, b, c}));
            });
        }

        // Composed model: every parameter of a small geometry, exhaustively,
        // against the training loss.
        {
            std::vector<std::vector<std::string>> corpus{{"A", "B"}, {"A", "B"}, {"B", "C"}, {"C"}};
            SupPhoneVocab vocab = train_bpe(corpus, 4, {"A", "B", "C"});
            FeatureManifest manifest;
            manifest.dims = {2, 1, 1, 2, 2, 2};
            ModelConfig cfg;
            cfg.d_multi = manifest.total();
            cfg.d_model = 8;
            cfg.d_embed = 6;
            cfg.layers_phone = 1;
            cfg.layers_subword = 1;
            cfg.layers_utt = 1;
            cfg.heads = 2;
            cfg.conv_kernels = 6;
            cfg.conv_kernel_size = 3;
            cfg.max_len = 12;
            cfg.head_hidden = 5;
            cfg.phone_vocab_size = vocab.base_symbols.size();
            cfg.supphone_vocab_size = vocab.size();

            UtteranceEntry utt;
            utt.utt_id = "g0";
            utt.speaker_id = "s0";
            const std::vector<std::string> symbols{"A", "B", "C"};
            for (std::size_t len : {std::size_t(2), std::size_t(1), std::size_t(2)}) {
                WordEntry w;
                w.accuracy = rng.uniform(0.0, 2.0);
                w.stress = 1.0 + double(rng.below(2));
                w.total = rng.uniform(0.0, 2.0);
                for (std::size_t j = 0; j < len; ++j) {
                    PhoneEntry p;
                    p.symbol = symbols[rng.below(symbols.size())];
                    p.accuracy = rng.uniform(0.0, 2.0);
                    for (std::size_t v = 0; v < kNumViews; ++v) {
                        p.features[v].resize(manifest.dims[v]);
                        for (double& x : p.features[v]) x = rng.uniform(-1.0, 1.0);
                    }
                    w.phones.push_back(std::move(p));
                }
                utt.words.push_back(std::move(w));
            }
            utt.accuracy = rng.uniform(0.0, 2.0);
            utt.completeness = rng.uniform(0.0, 2.0);
            utt.fluency = rng.uniform(0.0, 2.0);
            utt.prosody = rng.uniform(0.0, 2.0);
            utt.total = rng.uniform(0.0, 2.0);

            ModelParams<double> params = init_params<double>(cfg, Ablation{}, base_seed + si);
            auto named = collect_named_params(params);
            const ModelInputs inputs = build_inputs(utt, vocab, manifest, cfg, 6);
            const Targets targets = build_targets(utt, 6);
            auto fwd = [&](Tape<double>& t) {
                std::vector<ForwardOutputs<double>> outs{
                    forward_from_inputs(&t, inputs, params, cfg, Ablation{})};
                return mtl_loss(&t, outs, {targets}).total;
            };
            GradCheckResult r = finite_difference_check<double>(fwd, named, kOpTol);
            record("composed_model", r.max_rel_err, kOpTol);
        }
    }

    if (inject_fault != 0.0) {
        Rng rng(base_seed ^ 0xfeedu);
        Tensor<double> x = detail::rand_tensor(rng, {6});
        GradCheckResult r = finite_difference_check<double>(
            [&](Tape<double>& t) { return detail::sq_sum(t, detail::gelu_skewed(&t, x, inject_fault)); },
            {{"x", x}}, kOpTol);
        record("fault_injection", r.max_rel_err, kOpTol);
    }

    for (const GradSuiteCheck& c : out.checks) out.all_pass = out.all_pass && c.pass;
    out.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

}  // namespace apa
