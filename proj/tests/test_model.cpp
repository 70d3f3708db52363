#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "apa/data.hpp"
#include "apa/gradcheck.hpp"
#include "apa/model.hpp"
#include "apa/supphone.hpp"

using namespace apa;

namespace {

FeatureManifest tiny_manifest() {
    FeatureManifest m;
    m.dims = {2, 1, 1, 2, 2, 2};
    return m;
}

// Three base phones and the single merge (A,B).
SupPhoneVocab abc_vocab() {
    std::vector<std::vector<std::string>> corpus{{"A", "B"}, {"A", "B"}, {"B", "C"}, {"C"}};
    return train_bpe(corpus, 4, {"A", "B", "C"});
}

ModelConfig tiny_config(const SupPhoneVocab& vocab) {
    ModelConfig c;
    c.d_multi = tiny_manifest().total();
    c.d_model = 8;
    c.d_embed = 6;
    c.layers_phone = 1;
    c.layers_subword = 1;
    c.layers_utt = 1;
    c.heads = 2;
    c.conv_kernels = 6;
    c.conv_kernel_size = 3;
    c.max_len = 12;
    c.head_hidden = 5;
    c.phone_vocab_size = vocab.base_symbols.size();
    c.supphone_vocab_size = vocab.size();
    return c;
}

UtteranceEntry make_utt(Rng& rng, const FeatureManifest& m, const std::vector<std::size_t>& lens,
                        const std::vector<std::string>& symbols) {
    UtteranceEntry u;
    u.utt_id = "u0";
    u.speaker_id = "spk0";
    for (std::size_t len : lens) {
        WordEntry w;
        w.accuracy = w.stress = w.total = 1.0;
        for (std::size_t j = 0; j < len; ++j) {
            PhoneEntry p;
            p.symbol = symbols[rng.below(symbols.size())];
            for (std::size_t v = 0; v < kNumViews; ++v) {
                p.features[v].resize(m.dims[v]);
                for (double& x : p.features[v]) x = rng.uniform(-1.0, 1.0);
            }
            p.accuracy = 1.0;
            w.phones.push_back(std::move(p));
        }
        u.words.push_back(std::move(w));
    }
    u.accuracy = u.completeness = u.fluency = u.prosody = u.total = 1.0;
    return u;
}

std::size_t layer_param_count(const ModelConfig& c) {
    const std::size_t d = c.d_model, f = c.d_ffn();
    return 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d;
}

std::size_t mlp_param_count(std::size_t d_in, std::size_t hidden, std::size_t depth) {
    if (depth == 1) return d_in + 1;
    std::size_t n = d_in * hidden + hidden;
    n += (depth - 2) * (hidden * hidden + hidden);
    n += hidden + 1;
    return n;
}

std::size_t closed_form_count(const ModelConfig& c, const Ablation& a) {
    const std::size_t d = c.d_model, e = c.d_embed;
    std::size_t n = c.d_multi * d + d;
    n += c.phone_vocab_size * e + e * d + d;
    if (a.sup_phoneme) n += c.supphone_vocab_size * e + e * d + d;
    if (a.rel_pos) n += kBiesTags * e + e * d + d;
    n += c.max_len * d;
    n += (c.layers_phone + c.layers_subword + c.layers_utt) * layer_param_count(c);
    if (a.ds_conv)
        n += d * c.conv_kernel_size + d + d * c.conv_kernels + c.conv_kernels + c.conv_kernels * d + d;
    n += 4 + 1;
    n += 4 * mlp_param_count(d, c.head_hidden, 2);
    n += 5 * mlp_param_count(d, c.head_hidden, c.utt_head_depth);
    return n;
}

// Synthetic data plus a vocabulary trained on it, at the default geometry.
struct SynthFixture {
    Dataset data;
    SupPhoneVocab vocab;
    ModelConfig cfg;
};

const SynthFixture& default_fixture() {
    static const SynthFixture f = [] {
        SynthFixture fx;
        fx.data = gen_synthetic(40, 11, FeatureManifest{});
        std::vector<std::vector<std::string>> corpus;
        for (const UtteranceEntry& u : fx.data.utterances)
            for (const WordEntry& w : u.words) {
                std::vector<std::string> ph;
                for (const PhoneEntry& p : w.phones) ph.push_back(p.symbol);
                corpus.push_back(std::move(ph));
            }
        fx.vocab = train_bpe(corpus, 100, arpabet_inventory());
        fx.cfg.phone_vocab_size = fx.vocab.base_symbols.size();
        fx.cfg.supphone_vocab_size = fx.vocab.size();
        return fx;
    }();
    return f;
}

const UtteranceEntry& pick_utterance(const Dataset& d, std::size_t lo, std::size_t hi) {
    for (const UtteranceEntry& u : d.utterances) {
        const std::size_t n = u.phone_count();
        if (n >= lo && n <= hi) return u;
    }
    throw ContractError("fixture has no utterance in the requested length band");
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> collect_params(ModelParams<T>& p, const std::string& prefix = "") {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    visit_params(p, [&out, &prefix](const std::string& name, Tensor<T>& t, ParamKind) {
        if (prefix.empty() || name.starts_with(prefix)) out.emplace_back(name, t);
    });
    return out;
}

template <typename T>
void zero_tensor(Tensor<T>& t) {
    std::fill(t.values().begin(), t.values().end(), T(0));
}

double gelu_ref(double v) { return v * 0.5 * std::erfc(-v / std::sqrt(2.0)); }

template <typename T>
Tensor<T> scalar_loss(Tape<T>* tape, const ForwardOutputs<T>& out) {
    Tensor<T> loss = masked_sum(tape, out.p, out.live);
    loss = add(tape, loss, masked_sum(tape, out.w0, out.live));
    loss = add(tape, loss, masked_sum(tape, out.w1, out.live));
    loss = add(tape, loss, masked_sum(tape, out.w2, out.live));
    for (const Tensor<T>& u : out.u) loss = add(tape, loss, u);
    return loss;
}

template <typename T>
bool any_nonzero(const Tensor<T>& t) {
    REQUIRE(t.has_grad());
    for (T g : t.grad())
        if (g != T(0)) return true;
    return false;
}

}  // namespace

TEST_CASE("config validation rejects impossible geometry") {
    SupPhoneVocab v = abc_vocab();
    ModelConfig c = tiny_config(v);
    CHECK_NOTHROW(validate_config(c));
    c.heads = 3;  // does not divide d_model = 8
    CHECK_THROWS_WITH_AS(validate_config(c), doctest::Contains("divide"), ConfigError);
    c = tiny_config(v);
    c.conv_kernel_size = 4;
    CHECK_THROWS_WITH_AS(validate_config(c), doctest::Contains("odd"), ConfigError);
    c = tiny_config(v);
    c.conv_stride = 2;
    CHECK_THROWS_AS(validate_config(c), ConfigError);
    c = tiny_config(v);
    c.dropout = 1.0;
    CHECK_THROWS_AS(validate_config(c), ConfigError);
    c = tiny_config(v);
    c.d_model = 0;
    CHECK_THROWS_WITH_AS(validate_config(c), doctest::Contains("d_model"), ConfigError);
}

TEST_CASE("parameter count matches the closed form") {
    ModelConfig dflt;
    ModelParams<double> p0 = init_params<double>(dflt, 1);
    CHECK(param_count(p0) == closed_form_count(dflt, Ablation{}));

    SupPhoneVocab v = abc_vocab();
    ModelConfig c = tiny_config(v);
    c.utt_head_depth = 4;
    c.layers_phone = 2;
    ModelParams<double> p1 = init_params<double>(c, 2);
    CHECK(param_count(p1) == closed_form_count(c, Ablation{}));

    c.utt_head_depth = 1;
    ModelParams<double> p2 = init_params<double>(c, 2);
    CHECK(param_count(p2) == closed_form_count(c, Ablation{}));
}

TEST_CASE("ablations remove exactly the advertised parameters") {
    ModelConfig c;  // defaults: d_embed 36, d_model 24, sup vocab 100
    const std::size_t full = param_count(init_params<double>(c, Ablation{}, 3));

    Ablation no_sup;
    no_sup.sup_phoneme = false;
    CHECK(full - param_count(init_params<double>(c, no_sup, 3)) ==
          c.supphone_vocab_size * c.d_embed + c.d_embed * c.d_model + c.d_model);
    CHECK(full - param_count(init_params<double>(c, no_sup, 3)) == 100 * 36 + 36 * 24 + 24);

    Ablation no_rel;
    no_rel.rel_pos = false;
    CHECK(full - param_count(init_params<double>(c, no_rel, 3)) == 4 * 36 + 36 * 24 + 24);

    Ablation no_ds;
    no_ds.ds_conv = false;
    CHECK(full - param_count(init_params<double>(c, no_ds, 3)) ==
          (24 * 3 + 24) + (24 * 72 + 72) + (72 * 24 + 24));
}

TEST_CASE("initialization is deterministic and kind-aware") {
    ModelConfig c;
    ModelParams<double> a = init_params<double>(c, 7);
    ModelParams<double> b = init_params<double>(c, 7);
    ModelParams<double> other = init_params<double>(c, 8);

    auto va = collect_params(a), vb = collect_params(b), vo = collect_params(other);
    REQUIRE(va.size() == vb.size());
    bool all_equal = true, any_diff_other = false;
    for (std::size_t i = 0; i < va.size(); ++i) {
        if (va[i].second.values() != vb[i].second.values()) all_equal = false;
        if (va[i].second.values() != vo[i].second.values()) any_diff_other = true;
    }
    CHECK(all_equal);
    CHECK(any_diff_other);

    for (double x : a.ac_b.values()) CHECK(x == 0.0);
    for (double x : a.phone_layers[0].ln1_g.values()) CHECK(x == 1.0);
    for (double x : a.phone_layers[0].ln2_b.values()) CHECK(x == 0.0);

    const double bound = 1.0 / std::sqrt(static_cast<double>(c.d_multi));
    for (double x : a.ac_w.values()) {
        CHECK(x >= -bound);
        CHECK(x <= bound);
    }
    const double kbound = 1.0 / std::sqrt(3.0);
    for (double x : a.dw_k.values()) {
        CHECK(x >= -kbound);
        CHECK(x <= kbound);
    }

    double sq = 0.0;
    for (double x : a.e_phone.values()) sq += x * x;
    const double stddev = std::sqrt(sq / static_cast<double>(a.e_phone.size()));
    CHECK(stddev == doctest::Approx(0.02).epsilon(0.15));
}

TEST_CASE("input assembly lays out ids, tags, and features") {
    SupPhoneVocab v = abc_vocab();
    ModelConfig c = tiny_config(v);
    FeatureManifest m = tiny_manifest();

    UtteranceEntry u;
    u.utt_id = "u1";
    u.speaker_id = "s";
    Rng rng(5);
    u = make_utt(rng, m, {1, 2, 4}, {"A", "B", "C"});
    u.words[1].phones[0].symbol = "A";
    u.words[1].phones[1].symbol = "B";

    ModelInputs in = build_inputs(u, v, m, c, 10);
    CHECK(in.t_pad == 10);
    CHECK(in.n_live == 7);
    CHECK(in.bies == std::vector<int>{kBiesSingle, kBiesBegin, kBiesEnd, kBiesBegin, kBiesInside, kBiesInside,
                                      kBiesEnd, kBiesBegin, kBiesBegin, kBiesBegin});
    CHECK(in.live == std::vector<char>{1, 1, 1, 1, 1, 1, 1, 0, 0, 0});
    CHECK(in.word_spans == std::vector<std::pair<std::size_t, std::size_t>>{{0, 1}, {1, 2}, {3, 4}});

    const int ab = v.id_of("A+B");
    CHECK(in.sup_ids[1] == ab);
    CHECK(in.sup_ids[2] == ab);
    CHECK(in.phone_ids[1] == v.id_of("A"));
    CHECK(in.phone_ids[2] == v.id_of("B"));

    const std::vector<double> row = assemble_multiview(u.words[0].phones[0], m);
    for (std::size_t j = 0; j < row.size(); ++j) CHECK(in.features[j] == row[j]);
    for (std::size_t t = 7; t < 10; ++t)
        for (std::size_t j = 0; j < c.d_multi; ++j) CHECK(in.features[t * c.d_multi + j] == 0.0);
}

TEST_CASE("input assembly rejects contract violations") {
    SupPhoneVocab v = abc_vocab();
    ModelConfig c = tiny_config(v);
    FeatureManifest m = tiny_manifest();
    Rng rng(6);
    UtteranceEntry u = make_utt(rng, m, {2, 2}, {"A", "B", "C"});

    CHECK_THROWS_AS(build_inputs(u, v, m, c, 3), ContractError);
    CHECK_THROWS_AS(build_inputs(u, v, m, c, 13), RangeError);  // max_len is 12

    UtteranceEntry long_u = make_utt(rng, m, {5, 5, 3}, {"A", "B", "C"});
    CHECK_THROWS_AS(build_inputs(long_u, v, m, c), RangeError);

    FeatureManifest wrong = m;
    wrong.dims[0] = 3;
    CHECK_THROWS_AS(build_inputs(u, v, wrong, c), ConfigError);

    ModelConfig badv = c;
    badv.supphone_vocab_size = 9;
    CHECK_THROWS_AS(build_inputs(u, v, m, badv), ConfigError);

    UtteranceEntry empty;
    empty.utt_id = "e";
    CHECK_THROWS_AS(build_inputs(empty, v, m, c), DegenerateInputError);
}

TEST_CASE("zeroed residual branches with identity norm pass the input through") {
    SupPhoneVocab v = abc_vocab();
    ModelConfig c = tiny_config(v);
    FeatureManifest m = tiny_manifest();
    Rng rng(9);
    UtteranceEntry u = make_utt(rng, m, {2, 3}, {"A", "B", "C"});

    ModelParams<double> p = init_params<double>(c, 4);
    for (TransformerLayer<double>& L : p.phone_layers) {
        zero_tensor(L.o_w);
        zero_tensor(L.o_b);
        zero_tensor(L.f2_w);
        zero_tensor(L.f2_b);
    }
    TestHooks hooks;
    hooks.identity_layer_norm = true;

    ModelInputs in = build_inputs(u, v, m, c);
    std::vector<double> feat(in.features.begin(), in.features.end());
    Tensor<double> e_multi(Shape{in.t_pad, c.d_multi}, std::move(feat));
    Tensor<double> x_ac = acoustic_project<double>(nullptr, e_multi, p);
    Tensor<double> h = phone_encode<double>(nullptr, x_ac, in.phone_ids, in.live, p, c, &hooks);

    std::vector<int> positions(in.t_pad);
    for (std::size_t t = 0; t < positions.size(); ++t) positions[t] = static_cast<int>(t);
    Tensor<double> expect = add<double>(
        nullptr,
        add<double>(nullptr, x_ac,
                    affine<double>(nullptr, embedding_lookup<double>(nullptr, p.e_phone, in.phone_ids),
                                   p.phone_proj_w, p.phone_proj_b)),
        embedding_lookup<double>(nullptr, p.e_abs, positions));

    REQUIRE(h.shape() == expect.shape());
    for (std::size_t i = 0; i < h.size(); ++i) CHECK(h[i] == expect[i]);
}

TEST_CASE("padding never changes live outputs") {
    const SynthFixture& fx = default_fixture();
    const UtteranceEntry& u = pick_utterance(fx.data, 8, 40);
    const std::size_t n = u.phone_count();
    ModelParams<double> p = init_params<double>(fx.cfg, 5);

    ForwardOutputs<double> plain = forward<double>(nullptr, u, fx.vocab, fx.data.manifest, p, fx.cfg);
    ForwardOutputs<double> padded = forward<double>(nullptr, u, fx.vocab, fx.data.manifest, p, fx.cfg, {}, n + 5);

    REQUIRE(plain.n_live == n);
    REQUIRE(padded.n_live == n);
    for (std::size_t t = 0; t < n; ++t) {
        CHECK(plain.p[t] == padded.p[t]);
        CHECK(plain.w0[t] == padded.w0[t]);
        CHECK(plain.w1[t] == padded.w1[t]);
        CHECK(plain.w2[t] == padded.w2[t]);
        CHECK(plain.alpha[t] == padded.alpha[t]);
        for (std::size_t j = 0; j < fx.cfg.d_model; ++j) CHECK(plain.h_word.at(t, j) == padded.h_word.at(t, j));
    }
    for (std::size_t t = n; t < n + 5; ++t) CHECK(padded.alpha[t] == 0.0);
    for (std::size_t j = 0; j < fx.cfg.d_model; ++j) CHECK(plain.h_agg[j] == padded.h_agg[j]);
    for (std::size_t k = 0; k < 5; ++k) CHECK(plain.u[k].item() == padded.u[k].item());
}

TEST_CASE("padded positions cannot leak into live outputs") {
    SupPhoneVocab v = abc_vocab();
    ModelConfig c = tiny_config(v);
    FeatureManifest m = tiny_manifest();
    Rng rng(13);
    UtteranceEntry u = make_utt(rng, m, {2, 2}, {"A", "B", "C"});
    ModelParams<double> p = init_params<double>(c, 6);

    ModelInputs in = build_inputs(u, v, m, c, 7);
    ModelInputs poked = in;
    for (std::size_t t = in.n_live; t < in.t_pad; ++t) {
        for (std::size_t j = 0; j < c.d_multi; ++j) poked.features[t * c.d_multi + j] = 7.5;
        poked.phone_ids[t] = 2;
        poked.sup_ids[t] = 1;
        poked.bies[t] = kBiesEnd;
    }

    ForwardOutputs<double> a = forward_from_inputs<double>(nullptr, in, p, c, Ablation{});
    ForwardOutputs<double> b = forward_from_inputs<double>(nullptr, poked, p, c, Ablation{});
    for (std::size_t t = 0; t < in.n_live; ++t) {
        CHECK(a.p[t] == b.p[t]);
        CHECK(a.w0[t] == b.w0[t]);
        CHECK(a.alpha[t] == b.alpha[t]);
    }
    for (std::size_t j = 0; j < c.d_model; ++j) CHECK(a.h_agg[j] == b.h_agg[j]);
    for (std::size_t k = 0; k < 5; ++k) CHECK(a.u[k].item() == b.u[k].item());
}

TEST_CASE("ablated stages are exact pass-throughs") {
    SupPhoneVocab v = abc_vocab();
    ModelConfig c = tiny_config(v);
    FeatureManifest m = tiny_manifest();
    Rng rng(21);
    UtteranceEntry u = make_utt(rng, m, {2, 3}, {"A", "B", "C"});
    ModelInputs in = build_inputs(u, v, m, c);

    Ablation none;
    none.sup_phoneme = none.rel_pos = none.ds_conv = false;
    ModelParams<double> p = init_params<double>(c, 30);  // full set; extra tensors unused
    ModelParams<double> p_none = make_params<double>(c, none);
    // copy the shared tensors so both parameter sets agree where they overlap
    visit_params(p_none, [&p](const std::string& name, Tensor<double>& t, ParamKind) {
        visit_params(p, [&name, &t](const std::string& n2, Tensor<double>& src, ParamKind) {
            if (n2 == name) t = src;
        });
    });

    // without the sub-word embedding the sub-word encoder consumes h_phn as-is
    std::vector<double> feat(in.features.begin(), in.features.end());
    Tensor<double> e_multi(Shape{in.t_pad, c.d_multi}, std::move(feat));
    Tensor<double> x_ac = acoustic_project<double>(nullptr, e_multi, p_none);
    Tensor<double> h_phn = phone_encode<double>(nullptr, x_ac, in.phone_ids, in.live, p_none, c);
    Tensor<double> h_sub = subword_encode<double>(nullptr, h_phn, in.sup_ids, in.live, p_none, c, none);
    Tensor<double> h_sub_manual =
        detail::encoder_stack<double>(nullptr, h_phn, p_none.subword_layers, in.live, c, nullptr, nullptr);
    for (std::size_t i = 0; i < h_sub.size(); ++i) CHECK(h_sub[i] == h_sub_manual[i]);

    // without relative tags and the conv stage, the word encoding is the identity
    Tensor<double> h_word = word_encode<double>(nullptr, h_sub, in.bies, in.live, p_none, none);
    for (std::size_t i = 0; i < h_word.size(); ++i) CHECK(h_word[i] == h_sub[i]);
}

TEST_CASE("conv word stage matches a brute-force oracle") {
    ModelConfig c;  // default geometry: d_model 24, kernels 72, kernel size 3
    Ablation no_rel;
    no_rel.rel_pos = false;
    ModelParams<double> p = init_params<double>(c, 17);

    const std::size_t T = 10, d = c.d_model, K = c.conv_kernels;
    Rng rng(4);
    Tensor<double> x({T, d});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-2.0, 2.0);
    std::vector<char> live(T, 1);

    Tensor<double> got = word_encode<double>(nullptr, x, std::vector<int>(T, 0), live, p, no_rel);

    // direct evaluation: depthwise -> expand -> gelu -> reduce
    std::vector<double> conv(T * d);
    for (std::size_t ch = 0; ch < d; ++ch)
        for (std::size_t t = 0; t < T; ++t) {
            double acc = p.dw_b[ch];
            for (int tap = -1; tap <= 1; ++tap) {
                const int src = static_cast<int>(t) + tap;
                if (src >= 0 && src < static_cast<int>(T))
                    acc += p.dw_k.at(ch, static_cast<std::size_t>(tap + 1)) * x.at(static_cast<std::size_t>(src), ch);
            }
            conv[t * d + ch] = acc;
        }
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < d; ++j) {
            double out = p.pw2_b[j];
            for (std::size_t k = 0; k < K; ++k) {
                double mid = p.pw1_b[k];
                for (std::size_t ch = 0; ch < d; ++ch) mid += conv[t * d + ch] * p.pw1_w.at(ch, k);
                out += gelu_ref(mid) * p.pw2_w.at(k, j);
            }
            CHECK(std::abs(got.at(t, j) - out) < 1e-10);
        }
}

TEST_CASE("stress head stays inside its interval") {
    const SynthFixture& fx = default_fixture();
    const UtteranceEntry& u = pick_utterance(fx.data, 8, 40);
    ModelParams<double> p = init_params<double>(fx.cfg, 23);

    ForwardOutputs<double> out = forward<double>(nullptr, u, fx.vocab, fx.data.manifest, p, fx.cfg);
    for (std::size_t t = 0; t < out.n_live; ++t) {
        CHECK(out.w1[t] > 1.0);
        CHECK(out.w1[t] < 2.0);
    }

    for (auto& [w, b] : p.word_heads[1].layers) {
        zero_tensor(w);
        zero_tensor(b);
    }
    ForwardOutputs<double> mid = forward<double>(nullptr, u, fx.vocab, fx.data.manifest, p, fx.cfg);
    for (std::size_t t = 0; t < mid.n_live; ++t) CHECK(mid.w1[t] == 1.5);
}

TEST_CASE("score heads are independent") {
    SupPhoneVocab v = abc_vocab();
    ModelConfig c = tiny_config(v);
    FeatureManifest m = tiny_manifest();
    Rng rng(31);
    UtteranceEntry u = make_utt(rng, m, {3, 2}, {"A", "B", "C"});
    ModelParams<double> p = init_params<double>(c, 8);

    ForwardOutputs<double> base = forward<double>(nullptr, u, v, m, p, c);

    p.word_heads[0].layers[0].first[0] += 0.5;
    ForwardOutputs<double> after = forward<double>(nullptr, u, v, m, p, c);
    bool w0_changed = false;
    for (std::size_t t = 0; t < base.n_live; ++t) {
        if (base.w0[t] != after.w0[t]) w0_changed = true;
        CHECK(base.w1[t] == after.w1[t]);
        CHECK(base.w2[t] == after.w2[t]);
        CHECK(base.p[t] == after.p[t]);
    }
    CHECK(w0_changed);
    p.word_heads[0].layers[0].first[0] -= 0.5;

    p.utt_heads[3].layers[0].first[0] += 0.5;
    ForwardOutputs<double> after_u = forward<double>(nullptr, u, v, m, p, c);
    CHECK(base.u[3].item() != after_u.u[3].item());
    for (std::size_t k = 0; k < 5; ++k)
        if (k != 3) CHECK(base.u[k].item() == after_u.u[k].item());
}

TEST_CASE("a single live position pools to its own row") {
    SupPhoneVocab v = abc_vocab();
    ModelConfig c = tiny_config(v);
    FeatureManifest m = tiny_manifest();
    Rng rng(37);
    UtteranceEntry u = make_utt(rng, m, {1}, {"A", "B", "C"});
    ModelParams<double> p = init_params<double>(c, 9);

    ForwardOutputs<double> out = forward<double>(nullptr, u, v, m, p, c);
    REQUIRE(out.n_live == 1);
    CHECK(out.alpha[0] == 1.0);
    for (std::size_t j = 0; j < c.d_model; ++j) CHECK(out.h_agg[j] == out.h_utt.at(0, j));
}

TEST_CASE("constant salience pools uniformly") {
    SupPhoneVocab v = abc_vocab();
    ModelConfig c = tiny_config(v);
    FeatureManifest m = tiny_manifest();
    Rng rng(41);
    UtteranceEntry u = make_utt(rng, m, {3, 3}, {"A", "B", "C"});
    ModelParams<double> p = init_params<double>(c, 10);
    zero_tensor(p.pool_w);
    zero_tensor(p.pool_b);

    ForwardOutputs<double> out = forward<double>(nullptr, u, v, m, p, c);
    REQUIRE(out.n_live == 6);
    double total = 0.0;
    for (std::size_t t = 0; t < 6; ++t) {
        CHECK(out.s[t] == 0.0);
        CHECK(out.alpha[t] == out.alpha[0]);
        total += out.alpha[t];
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("pooled mean scaling flag changes only the aggregate scale") {
    SupPhoneVocab v = abc_vocab();
    ModelConfig c = tiny_config(v);
    FeatureManifest m = tiny_manifest();
    Rng rng(43);
    UtteranceEntry u = make_utt(rng, m, {2, 3}, {"A", "B", "C"});
    ModelParams<double> p = init_params<double>(c, 11);

    ModelConfig raw = c;
    raw.scale_pooled_mean = false;
    ForwardOutputs<double> scaled = forward<double>(nullptr, u, v, m, p, c);
    ForwardOutputs<double> unscaled = forward<double>(nullptr, u, v, m, p, raw);
    const double n = static_cast<double>(scaled.n_live);
    for (std::size_t j = 0; j < c.d_model; ++j)
        CHECK(scaled.h_agg[j] * n == doctest::Approx(unscaled.h_agg[j]).epsilon(1e-12));
}

TEST_CASE("phone loss does not reach sub-word or word parameters") {
    SupPhoneVocab v = abc_vocab();
    ModelConfig c = tiny_config(v);
    FeatureManifest m = tiny_manifest();
    Rng rng(47);
    UtteranceEntry u = make_utt(rng, m, {2, 2}, {"A", "B", "C"});
    ModelParams<double> p = init_params<double>(c, 12);

    Tape<double> tape;
    ForwardOutputs<double> out = forward<double>(&tape, u, v, m, p, c);
    tape.backward(masked_sum(&tape, out.p, out.live));

    CHECK(any_nonzero(p.ac_w));
    CHECK(any_nonzero(p.e_phone));
    CHECK_FALSE(any_nonzero(p.e_sup));
    CHECK_FALSE(any_nonzero(p.e_rel));
    CHECK_FALSE(any_nonzero(p.dw_k));
    CHECK_FALSE(any_nonzero(p.pool_w));
    CHECK_FALSE(any_nonzero(p.word_heads[0].layers[0].first));
    CHECK_FALSE(any_nonzero(p.utt_heads[0].layers[0].first));
}

TEST_CASE("utterance scores depend on every stage below them") {
    SupPhoneVocab v = abc_vocab();
    ModelConfig c = tiny_config(v);
    FeatureManifest m = tiny_manifest();
    Rng rng(53);
    UtteranceEntry u = make_utt(rng, m, {2, 2}, {"A", "B", "C"});
    ModelParams<double> p = init_params<double>(c, 13);

    Tape<double> tape;
    ForwardOutputs<double> out = forward<double>(&tape, u, v, m, p, c);
    tape.backward(out.u[0]);

    CHECK(any_nonzero(p.ac_w));
    CHECK(any_nonzero(p.e_phone));
    CHECK(any_nonzero(p.e_sup));
    CHECK(any_nonzero(p.e_rel));
    CHECK(any_nonzero(p.dw_k));
    CHECK(any_nonzero(p.pool_w));
    CHECK(any_nonzero(p.phone_head.layers[0].first));  // via the salience profile
    CHECK(any_nonzero(p.utt_heads[0].layers[0].first));
    CHECK_FALSE(any_nonzero(p.utt_heads[1].layers[0].first));
}

TEST_CASE("acoustic projection gradients agree with finite differences") {
    ModelConfig c;
    SupPhoneVocab v = abc_vocab();
    c = tiny_config(v);
    ModelParams<double> p = init_params<double>(c, 14);
    Rng rng(59);
    Tensor<double> e_multi({5, c.d_multi});
    for (std::size_t i = 0; i < e_multi.size(); ++i) e_multi[i] = rng.uniform(-1.0, 1.0);

    auto fwd = [&](Tape<double>& t) { return sum(&t, acoustic_project(&t, e_multi, p)); };
    GradCheckResult r = finite_difference_check<double>(
        fwd, {{"acoustic.w", p.ac_w}, {"acoustic.b", p.ac_b}, {"e_multi", e_multi}}, 1e-6);
    INFO(r.worst_tensor, "[", r.worst_index, "] analytic ", r.analytic_at_worst, " numeric ", r.numeric_at_worst);
    CHECK(r.pass);
}

TEST_CASE("phone head gradients agree with finite differences") {
    SupPhoneVocab v = abc_vocab();
    ModelConfig c = tiny_config(v);
    ModelParams<double> p = init_params<double>(c, 15);
    Rng rng(61);
    Tensor<double> h({4, c.d_model});
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = rng.uniform(-1.0, 1.0);

    auto fwd = [&](Tape<double>& t) { return sum(&t, phone_head(&t, h, p)); };
    auto params = collect_params(p, "head.phone");
    params.emplace_back("h", h);
    GradCheckResult r = finite_difference_check<double>(fwd, params, 1e-6);
    INFO(r.worst_tensor, "[", r.worst_index, "] analytic ", r.analytic_at_worst, " numeric ", r.numeric_at_worst);
    CHECK(r.pass);
}

TEST_CASE("phone encoder gradients agree with finite differences") {
    SupPhoneVocab v = abc_vocab();
    ModelConfig c = tiny_config(v);
    ModelParams<double> p = init_params<double>(c, 16);
    Rng rng(67);
    const std::size_t T = 5;
    Tensor<double> x_ac({T, c.d_model});
    for (std::size_t i = 0; i < x_ac.size(); ++i) x_ac[i] = rng.uniform(-1.0, 1.0);
    const std::vector<int> ids{0, 1, 2, 1, 0};
    const std::vector<char> live{1, 1, 1, 1, 0};

    auto fwd = [&](Tape<double>& t) {
        return sum(&t, phone_encode(&t, x_ac, ids, live, p, c));
    };
    auto params = collect_params(p, "phone_enc.");
    for (auto& entry : collect_params(p, "embed.phone")) params.push_back(entry);
    params.emplace_back("embed.abs", p.e_abs);
    params.emplace_back("x_ac", x_ac);
    GradCheckResult r = finite_difference_check<double>(fwd, params, 1e-4);
    INFO(r.worst_tensor, "[", r.worst_index, "] analytic ", r.analytic_at_worst, " numeric ", r.numeric_at_worst);
    CHECK(r.pass);
}

TEST_CASE("pooling and utterance head gradients agree with finite differences") {
    SupPhoneVocab v = abc_vocab();
    ModelConfig c = tiny_config(v);
    ModelParams<double> p = init_params<double>(c, 18);
    Rng rng(71);
    const std::size_t T = 5;
    const std::vector<char> live{1, 1, 1, 0, 0};
    Tensor<double> h_word({T, c.d_model});
    for (std::size_t i = 0; i < h_word.size(); ++i) h_word[i] = rng.uniform(-1.0, 1.0);
    Tensor<double> ps({T}), w0({T}), w1({T}), w2({T});
    for (std::size_t t = 0; t < T; ++t) {
        ps[t] = rng.uniform(-1.0, 1.0);
        w0[t] = rng.uniform(-1.0, 1.0);
        w1[t] = rng.uniform(1.1, 1.9);
        w2[t] = rng.uniform(-1.0, 1.0);
    }

    auto fwd = [&](Tape<double>& t) {
        Tensor<double> h_utt = utterance_encode(&t, h_word, live, p, c);
        WordScores<double> w{w0, w1, w2};
        PoolOutputs<double> pool = utterance_pool(&t, h_utt, ps, w, live, p, c);
        std::array<Tensor<double>, 5> u = utterance_heads(&t, pool.h_agg, p);
        Tensor<double> loss = u[0];
        for (std::size_t k = 1; k < 5; ++k) loss = add(&t, loss, u[k]);
        return sum(&t, loss);
    };
    auto params = collect_params(p, "utt_enc.");
    for (auto& entry : collect_params(p, "pool.")) params.push_back(entry);
    for (auto& entry : collect_params(p, "head.utt.")) params.push_back(entry);
    params.emplace_back("h_word", h_word);
    params.emplace_back("p", ps);
    params.emplace_back("w0", w0);
    params.emplace_back("w1", w1);
    params.emplace_back("w2", w2);
    GradCheckResult r = finite_difference_check<double>(fwd, params, 1e-4);
    INFO(r.worst_tensor, "[", r.worst_index, "] analytic ", r.analytic_at_worst, " numeric ", r.numeric_at_worst);
    CHECK(r.pass);
}

TEST_CASE("full model gradients agree with finite differences everywhere") {
    SupPhoneVocab v = abc_vocab();
    ModelConfig c = tiny_config(v);
    FeatureManifest m = tiny_manifest();
    Rng rng(73);
    UtteranceEntry u = make_utt(rng, m, {2, 3}, {"A", "B", "C"});
    ModelParams<double> p = init_params<double>(c, 19);
    const ModelInputs in = build_inputs(u, v, m, c, 7);

    auto fwd = [&](Tape<double>& t) {
        ForwardOutputs<double> out = forward_from_inputs(&t, in, p, c, Ablation{});
        return scalar_loss(&t, out);
    };
    GradCheckResult r = finite_difference_check<double>(fwd, collect_params(p), 1e-4);
    INFO(r.worst_tensor, "[", r.worst_index, "] analytic ", r.analytic_at_worst, " numeric ", r.numeric_at_worst);
    CHECK(r.pass);
    CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("default geometry gradients spot-checked against finite differences") {
    const SynthFixture& fx = default_fixture();
    const UtteranceEntry& u = pick_utterance(fx.data, 8, 14);
    ModelParams<double> p = init_params<double>(fx.cfg, 20);
    const ModelInputs in = build_inputs(u, fx.vocab, fx.data.manifest, fx.cfg);

    auto fwd = [&](Tape<double>& t) {
        ForwardOutputs<double> out = forward_from_inputs(&t, in, p, fx.cfg, Ablation{});
        return scalar_loss(&t, out);
    };
    auto params = collect_params(p);
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t pi = 0; pi < params.size(); ++pi) coords.emplace_back(pi, params[pi].second.size() / 2);
    GradCheckResult r = finite_difference_check<double>(fwd, params, 1e-4, coords);
    INFO(r.worst_tensor, "[", r.worst_index, "] analytic ", r.analytic_at_worst, " numeric ", r.numeric_at_worst);
    CHECK(r.pass);
}

TEST_CASE("forward is pure and tape-independent") {
    SupPhoneVocab v = abc_vocab();
    ModelConfig c = tiny_config(v);
    FeatureManifest m = tiny_manifest();
    Rng rng(79);
    UtteranceEntry u = make_utt(rng, m, {2, 2}, {"A", "B", "C"});
    ModelParams<double> p = init_params<double>(c, 21);

    std::vector<std::vector<double>> snapshot;
    visit_params(p, [&snapshot](const std::string&, Tensor<double>& t, ParamKind) { snapshot.push_back(t.values()); });

    Tape<double> tape;
    ForwardOutputs<double> traced = forward<double>(&tape, u, v, m, p, c);
    tape.backward(traced.u[0]);
    ForwardOutputs<double> plain = forward<double>(nullptr, u, v, m, p, c);

    for (std::size_t k = 0; k < 5; ++k) CHECK(traced.u[k].item() == plain.u[k].item());
    for (std::size_t t = 0; t < traced.n_live; ++t) CHECK(traced.p[t] == plain.p[t]);

    std::size_t i = 0;
    visit_params(p, [&snapshot, &i](const std::string& name, Tensor<double>& t, ParamKind) {
        INFO("parameter ", name);
        CHECK(t.values() == snapshot[i++]);
    });
}

TEST_CASE("dropout is inert at inference and seeded in training") {
    SupPhoneVocab v = abc_vocab();
    ModelConfig c = tiny_config(v);
    FeatureManifest m = tiny_manifest();
    Rng rng(83);
    UtteranceEntry u = make_utt(rng, m, {3, 2}, {"A", "B", "C"});
    ModelParams<double> p = init_params<double>(c, 22);

    ModelConfig cd = c;
    cd.dropout = 0.5;
    ForwardOutputs<double> base = forward<double>(nullptr, u, v, m, p, c);
    ForwardOutputs<double> inert = forward<double>(nullptr, u, v, m, p, cd);  // no rng: nothing drops
    for (std::size_t k = 0; k < 5; ++k) CHECK(base.u[k].item() == inert.u[k].item());

    Rng d1(7), d2(7), d3(8);
    ForwardOutputs<double> a = forward<double>(nullptr, u, v, m, p, cd, {}, 0, nullptr, &d1);
    ForwardOutputs<double> b = forward<double>(nullptr, u, v, m, p, cd, {}, 0, nullptr, &d2);
    ForwardOutputs<double> other = forward<double>(nullptr, u, v, m, p, cd, {}, 0, nullptr, &d3);
    CHECK(a.u[0].item() == b.u[0].item());
    CHECK(a.u[0].item() != other.u[0].item());
}

TEST_CASE("serialized models reload bit-for-bit") {
    SupPhoneVocab v = abc_vocab();
    ModelConfig c = tiny_config(v);
    FeatureManifest m = tiny_manifest();
    Rng rng(89);
    UtteranceEntry u = make_utt(rng, m, {2, 1}, {"A", "B", "C"});
    ModelParams<real> p = init_params<real>(c, 24);

    const std::string path =
        (std::filesystem::temp_directory_path() / "apa_model_roundtrip.apam").string();
    save_model(path, p, c, Ablation{});

    LoadedModel loaded = load_model(path);
    CHECK(loaded.config == c);
    CHECK(loaded.ablation == Ablation{});
    CHECK(param_count(loaded.params) == param_count(p));

    ForwardOutputs<real> before = forward<real>(nullptr, u, v, m, p, c);
    ForwardOutputs<real> after = forward<real>(nullptr, u, v, m, loaded.params, c);
    for (std::size_t t = 0; t < before.n_live; ++t) {
        CHECK(before.p[t] == after.p[t]);
        CHECK(before.w0[t] == after.w0[t]);
    }
    for (std::size_t k = 0; k < 5; ++k) CHECK(before.u[k].item() == after.u[k].item());

    CHECK_NOTHROW(load_params(path, c));
    ModelConfig other = c;
    other.head_hidden = 7;
    CHECK_THROWS_AS(load_params(path, other), ConfigMismatchError);
    Ablation no_ds;
    no_ds.ds_conv = false;
    CHECK_THROWS_AS(load_params(path, c, no_ds), ConfigMismatchError);
    std::filesystem::remove(path);
}

TEST_CASE("serialization detects corruption") {
    SupPhoneVocab v = abc_vocab();
    ModelConfig c = tiny_config(v);
    ModelParams<real> p = init_params<real>(c, 25);
    const std::string path =
        (std::filesystem::temp_directory_path() / "apa_model_corrupt.apam").string();
    save_model(path, p, c, Ablation{});

    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    {  // flipped bit inside the weight blob
        std::string bad = bytes;
        bad[bad.size() - 10] = static_cast<char>(bad[bad.size() - 10] ^ 0x40);
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << bad;
        out.close();
        CHECK_THROWS_AS(load_model(path), ChecksumError);
    }
    {  // truncated file
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << bytes.substr(0, 40);
        out.close();
        CHECK_THROWS_AS(load_model(path), ParseError);
    }
    {  // wrong magic
        std::string bad = bytes;
        bad[0] = 'X';
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << bad;
        out.close();
        CHECK_THROWS_WITH_AS(load_model(path), doctest::Contains("not a model file"), ParseError);
    }
    std::filesystem::remove(path);
    CHECK_THROWS_AS(load_model(path), IoError);
}

TEST_CASE("config text round trips and digests are sensitive") {
    SupPhoneVocab v = abc_vocab();
    ModelConfig c = tiny_config(v);
    Ablation a;
    a.rel_pos = false;

    ModelConfig c2;
    Ablation a2;
    config_from_json(config_to_json(c, a), c2, a2);
    CHECK(c2 == c);
    CHECK(a2 == a);
    CHECK(config_digest(c, a) == config_digest(c2, a2));

    ModelConfig c3 = c;
    c3.max_len = 13;
    CHECK(config_digest(c3, a) != config_digest(c, a));
    CHECK(config_digest(c, Ablation{}) != config_digest(c, a));

    CHECK_THROWS_AS(config_from_json("{\"d_model\": 4}", c2, a2), ParseError);
    CHECK_THROWS_AS(config_from_json("not json", c2, a2), ParseError);
}
