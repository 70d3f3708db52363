#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "apa/common.hpp"
#include "apa/data.hpp"
#include "apa/eval.hpp"
#include "apa/model.hpp"
#include "apa/optim.hpp"
#include "apa/supphone.hpp"
#include "apa/tensor.hpp"

namespace apa {

struct TrainConfig {
    std::size_t epochs = 50;
    std::size_t batch_size = 25;
    double lr0 = 1e-3;
    std::size_t halve_every = 5;
    std::size_t halve_after_epoch = 20;
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    Ablation ablation;
    double grad_clip = 0.0;  // global-norm cap; 0 disables
};

inline void validate_train_config(const TrainConfig& c) {
    if (c.epochs == 0) throw ConfigError("train config: epochs must be at least 1");
    if (c.batch_size == 0) throw ConfigError("train config: batch_size must be at least 1");
    if (!(c.lr0 > 0.0)) throw ConfigError("train config: lr0 must be positive");
    if (c.halve_every == 0) throw ConfigError("train config: halve_every must be at least 1");
    if (c.seeds.empty()) throw ConfigError("train config: at least one seed");
    if (c.grad_clip < 0.0) throw ConfigError("train config: grad_clip must be non-negative");
}

// Constant at lr0 through halve_after_epoch, then halves every halve_every
// epochs with immediate effect (defaults: 1e-3 through epoch 20, 5e-4 at 21,
// 2.5e-4 at 26, ...).
inline double lr_at(std::size_t epoch, const TrainConfig& c) {
    if (epoch == 0) throw ContractError("lr_at: epochs are 1-based");
    std::size_t halvings = 0;
    if (epoch > c.halve_after_epoch) {
        const std::size_t past = epoch - c.halve_after_epoch;
        halvings = (past + c.halve_every - 1) / c.halve_every;
    }
    return c.lr0 * std::pow(0.5, static_cast<double>(halvings));
}

// Per-position regression targets for one utterance. Word scores repeat over
// the word's phone positions; padded positions carry no target.
struct Targets {
    std::vector<double> phone;
    std::array<std::vector<double>, 3> word;  // accuracy, stress, total
    std::array<double, 5> utt{};              // accuracy, completeness, fluency, prosody, total
    std::vector<char> live;
    std::size_t n_live = 0;
};

inline Targets build_targets(const UtteranceEntry& u, std::size_t pad_to = 0) {
    const std::size_t n = u.phone_count();
    const std::size_t t_pad = (pad_to == 0) ? n : pad_to;
    if (t_pad < n)
        throw ContractError("targets: pad_to " + std::to_string(t_pad) + " below utterance length " +
                            std::to_string(n));
    Targets tg;
    tg.n_live = n;
    tg.phone.assign(t_pad, 0.0);
    for (auto& w : tg.word) w.assign(t_pad, 0.0);
    tg.live.assign(t_pad, 0);
    std::size_t t = 0;
    for (const WordEntry& w : u.words)
        for (const PhoneEntry& ph : w.phones) {
            tg.phone[t] = ph.accuracy;
            tg.word[0][t] = w.accuracy;
            tg.word[1][t] = w.stress;
            tg.word[2][t] = w.total;
            tg.live[t] = 1;
            ++t;
        }
    tg.utt = {u.accuracy, u.completeness, u.fluency, u.prosody, u.total};
    return tg;
}

// Eq.-style multi-task combination: the phone loss, a third of the summed
// word losses, a fifth of the summed utterance losses. All parts are MSEs
// over live positions (utterance aspects: over utterances of the batch).
struct LossBreakdown {
    double phone = 0.0;
    std::array<double, 3> word{};
    std::array<double, 5> utt{};
    double total = 0.0;

    double combined() const {
        const double w = word[0] + word[1] + word[2];
        const double u = utt[0] + utt[1] + utt[2] + utt[3] + utt[4];
        return phone + w / 3.0 + u / 5.0;
    }
};

template <typename T>
struct BatchLoss {
    Tensor<T> total;  // scalar on the tape, drives backward
    LossBreakdown breakdown;
};

namespace detail {

template <typename T>
Tensor<T> squared_masked_sum(Tape<T>* tape, const Tensor<T>& pred, const std::vector<double>& target,
                             const std::vector<char>& live) {
    std::vector<T> tv(target.begin(), target.end());
    const std::size_t n = tv.size();
    Tensor<T> y(Shape{n}, std::move(tv));
    Tensor<T> d = sub(tape, pred, y);
    return masked_sum(tape, mul(tape, d, d), live);
}

inline double squared_masked_sum_ref(const auto& pred, const std::vector<double>& target,
                                     const std::vector<char>& live) {
    double acc = 0.0;
    for (std::size_t t = 0; t < live.size(); ++t)
        if (live[t]) {
            const double d = static_cast<double>(pred[t]) - target[t];
            acc += d * d;
        }
    return acc;
}

}  // namespace detail

template <typename T>
BatchLoss<T> mtl_loss(Tape<T>* tape, const std::vector<ForwardOutputs<T>>& outs,
                      const std::vector<Targets>& targets) {
    if (outs.empty()) throw ContractError("mtl_loss: empty batch");
    if (outs.size() != targets.size())
        throw ContractError("mtl_loss: " + std::to_string(outs.size()) + " outputs vs " +
                            std::to_string(targets.size()) + " target sets");
    std::size_t n_live = 0;
    for (std::size_t i = 0; i < outs.size(); ++i) {
        if (outs[i].live != targets[i].live)
            throw ContractError("mtl_loss: utterance " + std::to_string(i) + " mask mismatch");
        n_live += outs[i].n_live;
    }
    const T inv_live = static_cast<T>(1.0 / static_cast<double>(n_live));
    const T inv_batch = static_cast<T>(1.0 / static_cast<double>(outs.size()));

    auto sum_aspect = [&](auto&& pick_pred, auto&& pick_target) {
        Tensor<T> acc;
        for (std::size_t i = 0; i < outs.size(); ++i) {
            Tensor<T> s =
                detail::squared_masked_sum(tape, pick_pred(outs[i]), pick_target(targets[i]), outs[i].live);
            acc = acc.valid() ? add(tape, acc, s) : s;
        }
        return acc;
    };

    Tensor<T> phone_t = scale(
        tape,
        sum_aspect([](const ForwardOutputs<T>& o) { return o.p; }, [](const Targets& t) { return t.phone; }),
        inv_live);
    std::array<Tensor<T>, 3> word_t;
    for (std::size_t j = 0; j < 3; ++j) {
        auto pick = [j](const ForwardOutputs<T>& o) { return j == 0 ? o.w0 : (j == 1 ? o.w1 : o.w2); };
        word_t[j] = scale(tape, sum_aspect(pick, [j](const Targets& t) { return t.word[j]; }), inv_live);
    }
    std::array<Tensor<T>, 5> utt_t;
    for (std::size_t k = 0; k < 5; ++k) {
        Tensor<T> acc;
        for (std::size_t i = 0; i < outs.size(); ++i) {
            Tensor<T> d = sub(tape, outs[i].u[k], Tensor<T>::scalar(static_cast<T>(targets[i].utt[k])));
            Tensor<T> s = mul(tape, d, d);
            acc = acc.valid() ? add(tape, acc, s) : s;
        }
        utt_t[k] = scale(tape, acc, inv_batch);
    }

    Tensor<T> word_sum = add(tape, add(tape, word_t[0], word_t[1]), word_t[2]);
    Tensor<T> utt_sum = utt_t[0];
    for (std::size_t k = 1; k < 5; ++k) utt_sum = add(tape, utt_sum, utt_t[k]);
    BatchLoss<T> out;
    out.total = add(tape, phone_t,
                    add(tape, scale(tape, word_sum, T(1.0 / 3.0)), scale(tape, utt_sum, T(1.0 / 5.0))));

    // The reported breakdown is recomputed in double from the same predictions
    // so the combination identity holds to full precision regardless of the
    // tape's arithmetic type.
    LossBreakdown& bd = out.breakdown;
    for (std::size_t i = 0; i < outs.size(); ++i) {
        const ForwardOutputs<T>& o = outs[i];
        const Targets& tg = targets[i];
        bd.phone += detail::squared_masked_sum_ref(o.p.values(), tg.phone, o.live);
        bd.word[0] += detail::squared_masked_sum_ref(o.w0.values(), tg.word[0], o.live);
        bd.word[1] += detail::squared_masked_sum_ref(o.w1.values(), tg.word[1], o.live);
        bd.word[2] += detail::squared_masked_sum_ref(o.w2.values(), tg.word[2], o.live);
        for (std::size_t k = 0; k < 5; ++k) {
            const double d = static_cast<double>(o.u[k].item()) - tg.utt[k];
            bd.utt[k] += d * d;
        }
    }
    bd.phone /= static_cast<double>(n_live);
    for (double& w : bd.word) w /= static_cast<double>(n_live);
    for (double& u : bd.utt) u /= static_cast<double>(outs.size());
    bd.total = bd.combined();
    return out;
}

struct EpochLog {
    std::size_t epoch = 0;
    double lr = 0.0;
    LossBreakdown loss;
};

template <typename T>
struct TrainResult {
    ModelParams<T> params;
    std::vector<EpochLog> history;
};

namespace detail {

// Squared-error sums and denominators accumulated across an epoch, so the
// logged per-epoch breakdown is an exact MSE over everything the epoch saw.
struct EpochAccumulator {
    double phone = 0.0;
    std::array<double, 3> word{};
    std::array<double, 5> utt{};
    std::size_t live = 0, utts = 0;

    void add(const LossBreakdown& bd, std::size_t batch_live, std::size_t batch_utts) {
        phone += bd.phone * static_cast<double>(batch_live);
        for (std::size_t j = 0; j < 3; ++j) word[j] += bd.word[j] * static_cast<double>(batch_live);
        for (std::size_t k = 0; k < 5; ++k) utt[k] += bd.utt[k] * static_cast<double>(batch_utts);
        live += batch_live;
        utts += batch_utts;
    }

    LossBreakdown finish() const {
        LossBreakdown bd;
        bd.phone = phone / static_cast<double>(live);
        for (std::size_t j = 0; j < 3; ++j) bd.word[j] = word[j] / static_cast<double>(live);
        for (std::size_t k = 0; k < 5; ++k) bd.utt[k] = utt[k] / static_cast<double>(utts);
        bd.total = bd.combined();
        return bd;
    }
};

template <typename T>
void clip_gradients(std::vector<std::pair<std::string, Tensor<T>>>& params, double cap) {
    double sq = 0.0;
    for (auto& [name, t] : params) {
        if (!t.has_grad()) continue;
        for (T g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (norm <= cap) return;
    const T s = static_cast<T>(cap / norm);
    for (auto& [name, t] : params) {
        if (!t.has_grad()) continue;
        for (T& g : t.grad()) g *= s;
    }
}

}  // namespace detail

template <typename T>
TrainResult<T> train(const Dataset& ds, const SupPhoneVocab& vocab, const ModelConfig& mcfg,
                     const TrainConfig& tcfg, std::uint64_t seed) {
    validate_train_config(tcfg);
    validate_config(mcfg);
    if (ds.scale != ScoreScale::normalized) throw ContractError("train: dataset scores must be normalized");
    if (ds.utterances.empty()) throw ContractError("train: empty dataset");

    TrainResult<T> result;
    result.params = init_params<T>(mcfg, tcfg.ablation, seed);
    auto named = collect_named_params(result.params);
    std::vector<AdamState<T>> states(named.size());
    for (std::size_t i = 0; i < named.size(); ++i) {
        states[i].m.assign(named[i].second.size(), T(0));
        states[i].v.assign(named[i].second.size(), T(0));
    }

    Rng shuffle_rng(seed);
    Rng dropout_rng(seed ^ 0x9e3779b97f4a7c15ull);
    Rng* drop = (mcfg.dropout > 0.0) ? &dropout_rng : nullptr;
    std::vector<std::size_t> order(ds.utterances.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (std::size_t epoch = 1; epoch <= tcfg.epochs; ++epoch) {
        const double lr = lr_at(epoch, tcfg);
        shuffle_rng.shuffle(order);
        detail::EpochAccumulator acc;
        for (std::size_t at = 0, batch_no = 1; at < order.size(); at += tcfg.batch_size, ++batch_no) {
            const std::size_t end = std::min(at + tcfg.batch_size, order.size());
            std::size_t pad_to = 0;
            for (std::size_t i = at; i < end; ++i)
                pad_to = std::max(pad_to, ds.utterances[order[i]].phone_count());

            Tape<T> tape;
            std::vector<ForwardOutputs<T>> outs;
            std::vector<Targets> targets;
            std::size_t batch_live = 0;
            for (std::size_t i = at; i < end; ++i) {
                const UtteranceEntry& u = ds.utterances[order[i]];
                outs.push_back(forward<T>(&tape, u, vocab, ds.manifest, result.params, mcfg, tcfg.ablation,
                                          pad_to, nullptr, drop));
                targets.push_back(build_targets(u, pad_to));
                batch_live += u.phone_count();
            }
            BatchLoss<T> loss = mtl_loss(&tape, outs, targets);
            if (!std::isfinite(loss.breakdown.total))
                throw TrainingError("train: loss is not finite at epoch " + std::to_string(epoch) + ", batch " +
                                    std::to_string(batch_no));
            tape.backward(loss.total);
            if (tcfg.grad_clip > 0.0) detail::clip_gradients(named, tcfg.grad_clip);
            for (std::size_t i = 0; i < named.size(); ++i)
                adam_step(named[i].second, states[i], static_cast<T>(lr), AdamConfig{}, named[i].first);
            acc.add(loss.breakdown, batch_live, end - at);
        }
        result.history.push_back(EpochLog{epoch, lr, acc.finish()});
    }
    return result;
}

// Per-utterance inference. Word-level predictions average the per-phone head
// outputs across each word's span.
struct UttPrediction {
    std::vector<double> phone;
    std::array<std::vector<double>, 3> word;
    std::array<double, 5> utt{};
};

template <typename T>
UttPrediction predict(const UtteranceEntry& u, const SupPhoneVocab& vocab, const FeatureManifest& manifest,
                      const ModelParams<T>& params, const ModelConfig& mcfg, const Ablation& abl = {},
                      std::size_t pad_to = 0) {
    ForwardOutputs<T> out = forward<T>(nullptr, u, vocab, manifest, params, mcfg, abl, pad_to);
    UttPrediction pred;
    pred.phone.reserve(out.n_live);
    for (std::size_t t = 0; t < out.live.size(); ++t)
        if (out.live[t]) pred.phone.push_back(static_cast<double>(out.p[t]));
    for (const auto& [start, len] : out.word_spans) {
        std::array<double, 3> mean{};
        for (std::size_t t = start; t < start + len; ++t) {
            mean[0] += static_cast<double>(out.w0[t]);
            mean[1] += static_cast<double>(out.w1[t]);
            mean[2] += static_cast<double>(out.w2[t]);
        }
        for (std::size_t j = 0; j < 3; ++j) pred.word[j].push_back(mean[j] / static_cast<double>(len));
    }
    for (std::size_t k = 0; k < 5; ++k) pred.utt[k] = static_cast<double>(out.u[k].item());
    return pred;
}

template <typename T>
Predictions predict_dataset(const Dataset& ds, const SupPhoneVocab& vocab, const ModelParams<T>& params,
                            const ModelConfig& mcfg, const Ablation& abl = {}) {
    if (ds.scale != ScoreScale::normalized)
        throw ContractError("predict: dataset scores must be normalized");
    Predictions p;
    for (const UtteranceEntry& u : ds.utterances) {
        UttPrediction pred = predict(u, vocab, ds.manifest, params, mcfg, abl);
        std::size_t w = 0;
        for (const WordEntry& word : u.words) {
            for (const PhoneEntry& ph : word.phones) p.phone_gold.push_back(ph.accuracy);
            p.word_gold[0].push_back(word.accuracy);
            p.word_gold[1].push_back(word.stress);
            p.word_gold[2].push_back(word.total);
            ++w;
        }
        p.phone_pred.insert(p.phone_pred.end(), pred.phone.begin(), pred.phone.end());
        for (std::size_t j = 0; j < 3; ++j)
            p.word_pred[j].insert(p.word_pred[j].end(), pred.word[j].begin(), pred.word[j].end());
        const std::array<double, 5> gold{u.accuracy, u.completeness, u.fluency, u.prosody, u.total};
        for (std::size_t k = 0; k < 5; ++k) {
            p.utt_pred[k].push_back(pred.utt[k]);
            p.utt_gold[k].push_back(gold[k]);
        }
    }
    return p;
}

template <typename T>
struct SeedRun {
    std::uint64_t seed = 0;
    TrainResult<T> result;
    SeedMetrics metrics;
};

template <typename T>
struct MultiSeedResult {
    std::vector<SeedRun<T>> runs;
    MetricReport report;
};

enum class DropFlag { ds_conv, rel_pos, sup_phoneme };

inline const char* drop_name(DropFlag d) {
    switch (d) {
        case DropFlag::ds_conv: return "ds_conv";
        case DropFlag::rel_pos: return "rel_pos";
        case DropFlag::sup_phoneme: return "sup_phoneme";
    }
    throw ContractError("drop_name: unknown flag");
}

inline DropFlag drop_from_name(const std::string& name) {
    if (name == "ds_conv" || name == "ds-conv") return DropFlag::ds_conv;
    if (name == "rel_pos" || name == "rel-pos") return DropFlag::rel_pos;
    if (name == "sup_phoneme" || name == "sup-phoneme") return DropFlag::sup_phoneme;
    throw ConfigError("unknown ablation flag '" + name + "' (ds-conv, rel-pos, sup-phoneme)");
}

inline Ablation apply_drop(Ablation base, DropFlag d) {
    switch (d) {
        case DropFlag::ds_conv: base.ds_conv = false; break;
        case DropFlag::rel_pos: base.rel_pos = false; break;
        case DropFlag::sup_phoneme: base.sup_phoneme = false; break;
    }
    return base;
}

// Independent runs per seed, in the listed order. A failure part-way reports
// which seeds had already completed.
template <typename T>
MultiSeedResult<T> run_seeds(const Dataset& train_ds, const Dataset& eval_ds, const SupPhoneVocab& vocab,
                             const ModelConfig& mcfg, const TrainConfig& tcfg) {
    validate_train_config(tcfg);
    MultiSeedResult<T> out;
    std::vector<SeedMetrics> metrics;
    for (std::uint64_t seed : tcfg.seeds) {
        try {
            SeedRun<T> run;
            run.seed = seed;
            run.result = train<T>(train_ds, vocab, mcfg, tcfg, seed);
            run.metrics = evaluate(predict_dataset(eval_ds, vocab, run.result.params, mcfg, tcfg.ablation));
            metrics.push_back(run.metrics);
            out.runs.push_back(std::move(run));
        } catch (const Error& e) {
            std::string done;
            for (const SeedRun<T>& r : out.runs) done += (done.empty() ? "" : ", ") + std::to_string(r.seed);
            throw TrainingError("seed " + std::to_string(seed) + " failed after " +
                                std::to_string(out.runs.size()) + " completed seed(s)" +
                                (done.empty() ? "" : " (" + done + ")") + ": " + e.what());
        }
    }
    out.report = aggregate_seeds(metrics);
    return out;
}

template <typename T>
struct AblationResult {
    DropFlag drop;
    MultiSeedResult<T> full;
    MultiSeedResult<T> ablated;
};

// Same data and seed list for both variants; only the dropped component
// differs.
template <typename T>
AblationResult<T> run_ablation(const Dataset& train_ds, const Dataset& eval_ds, const SupPhoneVocab& vocab,
                               const ModelConfig& mcfg, const TrainConfig& tcfg, DropFlag drop) {
    AblationResult<T> out{drop, {}, {}};
    out.full = run_seeds<T>(train_ds, eval_ds, vocab, mcfg, tcfg);
    TrainConfig dropped = tcfg;
    dropped.ablation = apply_drop(tcfg.ablation, drop);
    out.ablated = run_seeds<T>(train_ds, eval_ds, vocab, mcfg, dropped);
    return out;
}

}  // namespace apa
