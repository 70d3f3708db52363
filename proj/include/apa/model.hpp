#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "apa/common.hpp"
#include "apa/data.hpp"
#include "apa/supphone.hpp"
#include "apa/tensor.hpp"

namespace apa {

// Components that can be removed wholesale for ablation runs. A disabled
// component contributes no parameters and its stage becomes a pass-through.
struct Ablation {
    bool sup_phoneme = true;
    bool rel_pos = true;
    bool ds_conv = true;

    bool operator==(const Ablation&) const = default;
};

struct ModelConfig {
    std::size_t d_multi = 192;  // concatenated feature width, must match the manifest
    std::size_t d_model = 24;
    std::size_t d_embed = 36;
    std::size_t layers_phone = 3;
    std::size_t layers_subword = 1;
    std::size_t layers_utt = 1;
    std::size_t heads = 1;
    std::size_t conv_kernels = 72;
    std::size_t conv_kernel_size = 3;
    std::size_t conv_stride = 1;
    std::size_t max_len = 50;
    std::size_t phone_vocab_size = 39;
    std::size_t supphone_vocab_size = 100;
    std::size_t ffn_multiplier = 4;
    std::size_t head_hidden = 24;
    std::size_t utt_head_depth = 2;  // affine layers per utterance head
    double dropout = 0.0;
    bool scale_pooled_mean = true;  // divide the aggregated utterance vector by live length

    std::size_t d_ffn() const { return d_model * ffn_multiplier; }

    bool operator==(const ModelConfig&) const = default;
};

inline void validate_config(const ModelConfig& c) {
    auto positive = [](std::size_t v, const char* name) {
        if (v == 0) throw ConfigError(std::string("config: ") + name + " must be positive");
    };
    positive(c.d_multi, "d_multi");
    positive(c.d_model, "d_model");
    positive(c.d_embed, "d_embed");
    positive(c.layers_phone, "layers_phone");
    positive(c.layers_subword, "layers_subword");
    positive(c.layers_utt, "layers_utt");
    positive(c.heads, "heads");
    positive(c.conv_kernels, "conv_kernels");
    positive(c.conv_kernel_size, "conv_kernel_size");
    positive(c.max_len, "max_len");
    positive(c.phone_vocab_size, "phone_vocab_size");
    positive(c.supphone_vocab_size, "supphone_vocab_size");
    positive(c.ffn_multiplier, "ffn_multiplier");
    positive(c.head_hidden, "head_hidden");
    positive(c.utt_head_depth, "utt_head_depth");
    if (c.d_model % c.heads != 0)
        throw ConfigError("config: heads (" + std::to_string(c.heads) + ") must divide d_model (" +
                          std::to_string(c.d_model) + ")");
    if (c.conv_kernel_size % 2 == 0)
        throw ConfigError("config: conv_kernel_size must be odd, got " + std::to_string(c.conv_kernel_size));
    if (c.conv_stride != 1)
        throw ConfigError("config: conv_stride must be 1, the word stage preserves sequence length");
    if (c.dropout < 0.0 || c.dropout >= 1.0)
        throw ConfigError("config: dropout must be in [0, 1)");
}

// Switches used only by structural tests; production paths pass nullptr.
struct TestHooks {
    bool identity_layer_norm = false;
};

inline constexpr double kLayerNormEps = 1e-5;

// BIES word-position tags (indices into the relative-position table).
inline constexpr int kBiesBegin = 0;
inline constexpr int kBiesInside = 1;
inline constexpr int kBiesEnd = 2;
inline constexpr int kBiesSingle = 3;
inline constexpr std::size_t kBiesTags = 4;

template <typename T>
struct TransformerLayer {
    Tensor<T> q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
    Tensor<T> ln1_g, ln1_b;
    Tensor<T> f1_w, f1_b, f2_w, f2_b;
    Tensor<T> ln2_g, ln2_b;
};

// Affine chain with GELU between layers and a linear last layer.
template <typename T>
struct Mlp {
    std::vector<std::pair<Tensor<T>, Tensor<T>>> layers;  // (w, b)
};

template <typename T>
struct ModelParams {
    Tensor<T> ac_w, ac_b;

    Tensor<T> e_phone, phone_proj_w, phone_proj_b;
    Tensor<T> e_sup, sup_proj_w, sup_proj_b;  // absent without sup_phoneme
    Tensor<T> e_rel, rel_proj_w, rel_proj_b;  // absent without rel_pos
    Tensor<T> e_abs;

    std::vector<TransformerLayer<T>> phone_layers, subword_layers, utt_layers;

    Tensor<T> dw_k, dw_b, pw1_w, pw1_b, pw2_w, pw2_b;  // absent without ds_conv

    Tensor<T> pool_w, pool_b;

    Mlp<T> phone_head;
    std::array<Mlp<T>, 3> word_heads;  // accuracy, stress, total
    std::array<Mlp<T>, 5> utt_heads;   // accuracy, completeness, fluency, prosody, total
};

enum class ParamKind { weight, kernel, bias, embed, gamma };

namespace detail {

template <typename P, typename F>
void visit_layer(P& layer, const std::string& prefix, F&& f) {
    f(prefix + ".attn.q.w", layer.q_w, ParamKind::weight);
    f(prefix + ".attn.q.b", layer.q_b, ParamKind::bias);
    f(prefix + ".attn.k.w", layer.k_w, ParamKind::weight);
    f(prefix + ".attn.k.b", layer.k_b, ParamKind::bias);
    f(prefix + ".attn.v.w", layer.v_w, ParamKind::weight);
    f(prefix + ".attn.v.b", layer.v_b, ParamKind::bias);
    f(prefix + ".attn.o.w", layer.o_w, ParamKind::weight);
    f(prefix + ".attn.o.b", layer.o_b, ParamKind::bias);
    f(prefix + ".ln1.g", layer.ln1_g, ParamKind::gamma);
    f(prefix + ".ln1.b", layer.ln1_b, ParamKind::bias);
    f(prefix + ".ffn.0.w", layer.f1_w, ParamKind::weight);
    f(prefix + ".ffn.0.b", layer.f1_b, ParamKind::bias);
    f(prefix + ".ffn.1.w", layer.f2_w, ParamKind::weight);
    f(prefix + ".ffn.1.b", layer.f2_b, ParamKind::bias);
    f(prefix + ".ln2.g", layer.ln2_g, ParamKind::gamma);
    f(prefix + ".ln2.b", layer.ln2_b, ParamKind::bias);
}

template <typename P, typename F>
void visit_mlp(P& mlp, const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
        f(prefix + "." + std::to_string(i) + ".w", mlp.layers[i].first, ParamKind::weight);
        f(prefix + "." + std::to_string(i) + ".b", mlp.layers[i].second, ParamKind::bias);
    }
}

}  // namespace detail

// Canonical parameter walk. Order is load-bearing: initialization draws,
// optimizer state, and the serialized layout all follow it. Absent
// (ablated) tensors are skipped.
template <typename P, typename F>
void visit_params(P& params, F&& f) {
    auto opt = [&f](const std::string& name, auto& t, ParamKind kind) {
        if (t.valid()) f(name, t, kind);
    };
    f("acoustic.w", params.ac_w, ParamKind::weight);
    f("acoustic.b", params.ac_b, ParamKind::bias);
    f("embed.phone", params.e_phone, ParamKind::embed);
    f("embed.phone_proj.w", params.phone_proj_w, ParamKind::weight);
    f("embed.phone_proj.b", params.phone_proj_b, ParamKind::bias);
    opt("embed.sup", params.e_sup, ParamKind::embed);
    opt("embed.sup_proj.w", params.sup_proj_w, ParamKind::weight);
    opt("embed.sup_proj.b", params.sup_proj_b, ParamKind::bias);
    opt("embed.rel", params.e_rel, ParamKind::embed);
    opt("embed.rel_proj.w", params.rel_proj_w, ParamKind::weight);
    opt("embed.rel_proj.b", params.rel_proj_b, ParamKind::bias);
    f("embed.abs", params.e_abs, ParamKind::embed);
    for (std::size_t i = 0; i < params.phone_layers.size(); ++i)
        detail::visit_layer(params.phone_layers[i], "phone_enc." + std::to_string(i), f);
    for (std::size_t i = 0; i < params.subword_layers.size(); ++i)
        detail::visit_layer(params.subword_layers[i], "subword_enc." + std::to_string(i), f);
    opt("ds_conv.depthwise.w", params.dw_k, ParamKind::kernel);
    opt("ds_conv.depthwise.b", params.dw_b, ParamKind::bias);
    opt("ds_conv.expand.w", params.pw1_w, ParamKind::weight);
    opt("ds_conv.expand.b", params.pw1_b, ParamKind::bias);
    opt("ds_conv.reduce.w", params.pw2_w, ParamKind::weight);
    opt("ds_conv.reduce.b", params.pw2_b, ParamKind::bias);
    for (std::size_t i = 0; i < params.utt_layers.size(); ++i)
        detail::visit_layer(params.utt_layers[i], "utt_enc." + std::to_string(i), f);
    f("pool.w", params.pool_w, ParamKind::weight);
    f("pool.b", params.pool_b, ParamKind::bias);
    detail::visit_mlp(params.phone_head, "head.phone", f);
    for (std::size_t i = 0; i < params.word_heads.size(); ++i)
        detail::visit_mlp(params.word_heads[i], "head.word." + std::to_string(i), f);
    for (std::size_t i = 0; i < params.utt_heads.size(); ++i)
        detail::visit_mlp(params.utt_heads[i], "head.utt." + std::to_string(i), f);
}

namespace detail {

template <typename T>
TransformerLayer<T> make_layer(const ModelConfig& c) {
    const std::size_t d = c.d_model, h = c.d_ffn();
    TransformerLayer<T> L;
    L.q_w = Tensor<T>({d, d});
    L.q_b = Tensor<T>({d});
    L.k_w = Tensor<T>({d, d});
    L.k_b = Tensor<T>({d});
    L.v_w = Tensor<T>({d, d});
    L.v_b = Tensor<T>({d});
    L.o_w = Tensor<T>({d, d});
    L.o_b = Tensor<T>({d});
    L.ln1_g = Tensor<T>({d});
    L.ln1_b = Tensor<T>({d});
    L.f1_w = Tensor<T>({d, h});
    L.f1_b = Tensor<T>({h});
    L.f2_w = Tensor<T>({h, d});
    L.f2_b = Tensor<T>({d});
    L.ln2_g = Tensor<T>({d});
    L.ln2_b = Tensor<T>({d});
    return L;
}

template <typename T>
Mlp<T> make_mlp(std::size_t d_in, std::size_t d_hidden, std::size_t depth) {
    Mlp<T> m;
    for (std::size_t i = 0; i < depth; ++i) {
        const std::size_t in = (i == 0) ? d_in : d_hidden;
        const std::size_t out = (i + 1 == depth) ? 1 : d_hidden;
        m.layers.emplace_back(Tensor<T>({in, out}), Tensor<T>({out}));
    }
    return m;
}

}  // namespace detail

// Allocates every tensor the (config, ablation) pair calls for, zero-filled.
template <typename T>
ModelParams<T> make_params(const ModelConfig& c, const Ablation& abl) {
    validate_config(c);
    ModelParams<T> p;
    p.ac_w = Tensor<T>({c.d_multi, c.d_model});
    p.ac_b = Tensor<T>({c.d_model});
    p.e_phone = Tensor<T>({c.phone_vocab_size, c.d_embed});
    p.phone_proj_w = Tensor<T>({c.d_embed, c.d_model});
    p.phone_proj_b = Tensor<T>({c.d_model});
    if (abl.sup_phoneme) {
        p.e_sup = Tensor<T>({c.supphone_vocab_size, c.d_embed});
        p.sup_proj_w = Tensor<T>({c.d_embed, c.d_model});
        p.sup_proj_b = Tensor<T>({c.d_model});
    }
    if (abl.rel_pos) {
        p.e_rel = Tensor<T>({kBiesTags, c.d_embed});
        p.rel_proj_w = Tensor<T>({c.d_embed, c.d_model});
        p.rel_proj_b = Tensor<T>({c.d_model});
    }
    p.e_abs = Tensor<T>({c.max_len, c.d_model});
    for (std::size_t i = 0; i < c.layers_phone; ++i) p.phone_layers.push_back(detail::make_layer<T>(c));
    for (std::size_t i = 0; i < c.layers_subword; ++i) p.subword_layers.push_back(detail::make_layer<T>(c));
    for (std::size_t i = 0; i < c.layers_utt; ++i) p.utt_layers.push_back(detail::make_layer<T>(c));
    if (abl.ds_conv) {
        p.dw_k = Tensor<T>({c.d_model, c.conv_kernel_size});
        p.dw_b = Tensor<T>({c.d_model});
        p.pw1_w = Tensor<T>({c.d_model, c.conv_kernels});
        p.pw1_b = Tensor<T>({c.conv_kernels});
        p.pw2_w = Tensor<T>({c.conv_kernels, c.d_model});
        p.pw2_b = Tensor<T>({c.d_model});
    }
    p.pool_w = Tensor<T>({4, 1});
    p.pool_b = Tensor<T>({1});
    p.phone_head = detail::make_mlp<T>(c.d_model, c.head_hidden, 2);
    for (Mlp<T>& h : p.word_heads) h = detail::make_mlp<T>(c.d_model, c.head_hidden, 2);
    for (Mlp<T>& h : p.utt_heads) h = detail::make_mlp<T>(c.d_model, c.head_hidden, c.utt_head_depth);
    return p;
}

// Deterministic per seed. Linear and conv weights draw U(-1/sqrt(fan_in),
// +1/sqrt(fan_in)), embeddings N(0, 0.02); biases start at zero and norm
// gains at one. Draw order is the canonical parameter order.
template <typename T>
ModelParams<T> init_params(const ModelConfig& c, const Ablation& abl, std::uint64_t seed) {
    ModelParams<T> p = make_params<T>(c, abl);
    Rng rng(seed);
    visit_params(p, [&rng](const std::string&, Tensor<T>& t, ParamKind kind) {
        switch (kind) {
            case ParamKind::weight:
            case ParamKind::kernel: {
                const std::size_t fan_in = (kind == ParamKind::weight) ? t.extent(0) : t.extent(1);
                const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
                for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(-bound, bound));
                break;
            }
            case ParamKind::embed:
                for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.normal(0.0, 0.02));
                break;
            case ParamKind::gamma:
                std::fill(t.values().begin(), t.values().end(), T(1));
                break;
            case ParamKind::bias:
                break;  // already zero
        }
    });
    return p;
}

template <typename T>
ModelParams<T> init_params(const ModelConfig& c, std::uint64_t seed) {
    return init_params<T>(c, Ablation{}, seed);
}

template <typename T>
std::size_t param_count(const ModelParams<T>& p) {
    std::size_t n = 0;
    visit_params(const_cast<ModelParams<T>&>(p),
                 [&n](const std::string&, Tensor<T>& t, ParamKind) { n += t.size(); });
    return n;
}

// Flat (name, tensor) view in canonical order. Tensors are shared handles, so
// mutating an entry mutates the model.
template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> collect_named_params(ModelParams<T>& p) {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    visit_params(p, [&out](const std::string& name, Tensor<T>& t, ParamKind) { out.emplace_back(name, t); });
    return out;
}

// ---------------------------------------------------------------------------
// Input assembly

// Everything the network consumes for one utterance, padded to a fixed
// length. Padded rows carry zero features, id 0, and live = 0.
struct ModelInputs {
    std::vector<double> features;  // t_pad x d_multi, row-major
    std::vector<int> phone_ids;
    std::vector<int> sup_ids;
    std::vector<int> bies;
    std::vector<char> live;
    std::vector<std::pair<std::size_t, std::size_t>> word_spans;  // (start, length)
    std::size_t t_pad = 0;
    std::size_t n_live = 0;
};

// pad_to == 0 pads to the utterance's own length. Phone ids index the
// vocabulary's base symbols, sub-word ids its full token table.
inline ModelInputs build_inputs(const UtteranceEntry& utt, const SupPhoneVocab& vocab,
                                const FeatureManifest& manifest, const ModelConfig& cfg, std::size_t pad_to = 0) {
    if (manifest.total() != cfg.d_multi)
        throw ConfigError("inputs: manifest supplies " + std::to_string(manifest.total()) +
                          " features per phone, config expects " + std::to_string(cfg.d_multi));
    if (vocab.size() != cfg.supphone_vocab_size)
        throw ConfigError("inputs: vocabulary has " + std::to_string(vocab.size()) + " tokens, config expects " +
                          std::to_string(cfg.supphone_vocab_size));
    if (vocab.base_symbols.size() != cfg.phone_vocab_size)
        throw ConfigError("inputs: vocabulary has " + std::to_string(vocab.base_symbols.size()) +
                          " base phones, config expects " + std::to_string(cfg.phone_vocab_size));
    const std::size_t n = utt.phone_count();
    if (n == 0) throw DegenerateInputError("inputs: utterance '" + utt.utt_id + "' has no phones");
    const std::size_t t_pad = (pad_to == 0) ? n : pad_to;
    if (t_pad < n)
        throw ContractError("inputs: pad_to " + std::to_string(t_pad) + " below utterance length " +
                            std::to_string(n));
    if (t_pad > cfg.max_len)
        throw RangeError("inputs: padded length " + std::to_string(t_pad) + " exceeds max_len " +
                         std::to_string(cfg.max_len));

    ModelInputs in;
    in.t_pad = t_pad;
    in.n_live = n;
    in.features.assign(t_pad * cfg.d_multi, 0.0);
    in.phone_ids.assign(t_pad, 0);
    in.sup_ids.assign(t_pad, 0);
    in.bies.assign(t_pad, kBiesBegin);
    in.live.assign(t_pad, 0);

    std::size_t t = 0;
    for (const WordEntry& word : utt.words) {
        std::vector<std::string> phones;
        phones.reserve(word.phones.size());
        for (const PhoneEntry& ph : word.phones) phones.push_back(ph.symbol);
        const SupPhoneEncoding enc = encode_word(phones, vocab);
        in.word_spans.emplace_back(t, word.phones.size());
        for (std::size_t j = 0; j < word.phones.size(); ++j, ++t) {
            const PhoneEntry& ph = word.phones[j];
            const std::vector<double> row = assemble_multiview(ph, manifest);
            std::copy(row.begin(), row.end(), in.features.begin() + t * cfg.d_multi);
            in.phone_ids[t] = vocab.id_of(ph.symbol);
            in.sup_ids[t] = enc.phone_broadcast[j];
            if (word.phones.size() == 1)
                in.bies[t] = kBiesSingle;
            else if (j == 0)
                in.bies[t] = kBiesBegin;
            else if (j + 1 == word.phones.size())
                in.bies[t] = kBiesEnd;
            else
                in.bies[t] = kBiesInside;
            in.live[t] = 1;
        }
    }
    return in;
}

// ---------------------------------------------------------------------------
// Stages

namespace detail {

template <typename T>
Tensor<T> maybe_norm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     const TestHooks* hooks) {
    if (hooks && hooks->identity_layer_norm) return x;
    return layer_norm(tape, x, gamma, beta, static_cast<T>(kLayerNormEps));
}

template <typename T>
Tensor<T> dropout_branch(Tape<T>* tape, const Tensor<T>& x, double rate, Rng* rng) {
    if (rate <= 0.0 || rng == nullptr) return x;
    Tensor<T> mask(x.shape());
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = (rng->uniform() < rate) ? T(0) : keep_scale;
    return mul(tape, x, mask);
}

template <typename T>
Tensor<T> self_attention(Tape<T>* tape, const Tensor<T>& x, const TransformerLayer<T>& L,
                         const std::vector<char>& live, std::size_t heads) {
    Tensor<T> q = affine(tape, x, L.q_w, L.q_b);
    Tensor<T> k = affine(tape, x, L.k_w, L.k_b);
    Tensor<T> v = affine(tape, x, L.v_w, L.v_b);
    const std::size_t d_head = q.extent(1) / heads;
    std::vector<Tensor<T>> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor<T> qh = slice_cols(tape, q, h * d_head, d_head);
        Tensor<T> kh = slice_cols(tape, k, h * d_head, d_head);
        Tensor<T> vh = slice_cols(tape, v, h * d_head, d_head);
        Tensor<T> scores = matmul(tape, qh, transpose(tape, kh));
        scores = scale(tape, scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(d_head))));
        Tensor<T> weights = masked_softmax_rows(tape, scores, live);
        outs.push_back(matmul(tape, weights, vh));
    }
    Tensor<T> cat = concat_cols(tape, outs);
    return affine(tape, cat, L.o_w, L.o_b);
}

template <typename T>
Tensor<T> encoder_layer(Tape<T>* tape, const Tensor<T>& x, const TransformerLayer<T>& L,
                        const std::vector<char>& live, const ModelConfig& cfg, const TestHooks* hooks,
                        Rng* dropout_rng) {
    Tensor<T> attn = self_attention(tape, x, L, live, cfg.heads);
    attn = dropout_branch(tape, attn, cfg.dropout, dropout_rng);
    Tensor<T> h = maybe_norm(tape, add(tape, x, attn), L.ln1_g, L.ln1_b, hooks);
    Tensor<T> ffn = affine(tape, gelu(tape, affine(tape, h, L.f1_w, L.f1_b)), L.f2_w, L.f2_b);
    ffn = dropout_branch(tape, ffn, cfg.dropout, dropout_rng);
    return maybe_norm(tape, add(tape, h, ffn), L.ln2_g, L.ln2_b, hooks);
}

template <typename T>
Tensor<T> encoder_stack(Tape<T>* tape, Tensor<T> x, const std::vector<TransformerLayer<T>>& layers,
                        const std::vector<char>& live, const ModelConfig& cfg, const TestHooks* hooks,
                        Rng* dropout_rng) {
    for (const TransformerLayer<T>& L : layers) x = encoder_layer(tape, x, L, live, cfg, hooks, dropout_rng);
    return x;
}

// Rows -> scalars: [T x d] -> [T].
template <typename T>
Tensor<T> mlp_apply(Tape<T>* tape, const Mlp<T>& mlp, const Tensor<T>& x) {
    Tensor<T> h = x;
    for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
        h = affine(tape, h, mlp.layers[i].first, mlp.layers[i].second);
        if (i + 1 < mlp.layers.size()) h = gelu(tape, h);
    }
    return reshape(tape, h, {x.extent(0)});
}

}  // namespace detail

template <typename T>
Tensor<T> acoustic_project(Tape<T>* tape, const Tensor<T>& e_multi, const ModelParams<T>& p) {
    return affine(tape, e_multi, p.ac_w, p.ac_b);
}

template <typename T>
Tensor<T> phone_encode(Tape<T>* tape, const Tensor<T>& x_acoustic, const std::vector<int>& phone_ids,
                       const std::vector<char>& live, const ModelParams<T>& p, const ModelConfig& cfg,
                       const TestHooks* hooks = nullptr, Rng* dropout_rng = nullptr) {
    Tensor<T> phone_emb = affine(tape, embedding_lookup(tape, p.e_phone, phone_ids), p.phone_proj_w, p.phone_proj_b);
    std::vector<int> positions(x_acoustic.extent(0));
    for (std::size_t t = 0; t < positions.size(); ++t) positions[t] = static_cast<int>(t);
    Tensor<T> abs_emb = embedding_lookup(tape, p.e_abs, positions);
    Tensor<T> x = add(tape, add(tape, x_acoustic, phone_emb), abs_emb);
    return detail::encoder_stack(tape, x, p.phone_layers, live, cfg, hooks, dropout_rng);
}

template <typename T>
Tensor<T> phone_head(Tape<T>* tape, const Tensor<T>& h_phn, const ModelParams<T>& p) {
    return detail::mlp_apply(tape, p.phone_head, h_phn);
}

template <typename T>
Tensor<T> subword_encode(Tape<T>* tape, const Tensor<T>& h_phn, const std::vector<int>& sup_ids,
                         const std::vector<char>& live, const ModelParams<T>& p, const ModelConfig& cfg,
                         const Ablation& abl, const TestHooks* hooks = nullptr, Rng* dropout_rng = nullptr) {
    Tensor<T> x = h_phn;
    if (abl.sup_phoneme) {
        Tensor<T> sup_emb = affine(tape, embedding_lookup(tape, p.e_sup, sup_ids), p.sup_proj_w, p.sup_proj_b);
        x = add(tape, x, sup_emb);
    }
    return detail::encoder_stack(tape, x, p.subword_layers, live, cfg, hooks, dropout_rng);
}

template <typename T>
Tensor<T> word_encode(Tape<T>* tape, const Tensor<T>& h_subword, const std::vector<int>& bies,
                      const std::vector<char>& live, const ModelParams<T>& p, const Ablation& abl) {
    Tensor<T> x = h_subword;
    if (abl.rel_pos) {
        Tensor<T> rel_emb = affine(tape, embedding_lookup(tape, p.e_rel, bies), p.rel_proj_w, p.rel_proj_b);
        x = add(tape, x, rel_emb);
    }
    if (!abl.ds_conv) return x;
    Tensor<T> z = zero_masked_rows(tape, x, live);
    Tensor<T> c = depthwise_conv1d(tape, z, p.dw_k, p.dw_b);
    Tensor<T> e = gelu(tape, affine(tape, c, p.pw1_w, p.pw1_b));
    return affine(tape, e, p.pw2_w, p.pw2_b);
}

template <typename T>
struct WordScores {
    Tensor<T> w0, w1, w2;  // accuracy, stress, total; stress is 1 + sigmoid
};

template <typename T>
WordScores<T> word_heads(Tape<T>* tape, const Tensor<T>& h_word, const ModelParams<T>& p) {
    WordScores<T> out;
    out.w0 = detail::mlp_apply(tape, p.word_heads[0], h_word);
    out.w1 = add_const(tape, sigmoid(tape, detail::mlp_apply(tape, p.word_heads[1], h_word)), T(1));
    out.w2 = detail::mlp_apply(tape, p.word_heads[2], h_word);
    return out;
}

template <typename T>
Tensor<T> utterance_encode(Tape<T>* tape, const Tensor<T>& h_word, const std::vector<char>& live,
                           const ModelParams<T>& p, const ModelConfig& cfg, const TestHooks* hooks = nullptr,
                           Rng* dropout_rng = nullptr) {
    return detail::encoder_stack(tape, h_word, p.utt_layers, live, cfg, hooks, dropout_rng);
}

template <typename T>
struct PoolOutputs {
    Tensor<T> s;      // pre-softmax salience, [T]
    Tensor<T> alpha;  // attention weights, exactly zero at padded positions
    Tensor<T> h_agg;  // [d_model]
};

// Content-aware aggregation: salience from the per-position score profile,
// softmax over live positions, weighted mean of the utterance encoding.
template <typename T>
PoolOutputs<T> utterance_pool(Tape<T>* tape, const Tensor<T>& h_utt, const Tensor<T>& p_scores,
                              const WordScores<T>& w, const std::vector<char>& live, const ModelParams<T>& params,
                              const ModelConfig& cfg) {
    std::size_t n_live = 0;
    for (char c : live) n_live += (c != 0);
    Tensor<T> feats = stack_cols(tape, std::vector<Tensor<T>>{p_scores, w.w0, w.w1, w.w2});
    Tensor<T> s = gelu(tape, reshape(tape, affine(tape, feats, params.pool_w, params.pool_b), {live.size()}));
    PoolOutputs<T> out;
    out.s = s;
    out.alpha = masked_softmax(tape, s, live);
    Tensor<T> agg = matmul(tape, reshape(tape, out.alpha, {std::size_t(1), live.size()}), h_utt);
    if (cfg.scale_pooled_mean) agg = scale(tape, agg, static_cast<T>(1.0 / static_cast<double>(n_live)));
    out.h_agg = reshape(tape, agg, {h_utt.extent(1)});
    return out;
}

template <typename T>
std::array<Tensor<T>, 5> utterance_heads(Tape<T>* tape, const Tensor<T>& h_agg, const ModelParams<T>& p) {
    Tensor<T> row = reshape(tape, h_agg, {std::size_t(1), h_agg.size()});
    std::array<Tensor<T>, 5> out;
    for (std::size_t k = 0; k < 5; ++k)
        out[k] = reshape(tape, detail::mlp_apply(tape, p.utt_heads[k], row), {std::size_t(1)});
    return out;
}

template <typename T>
struct ForwardOutputs {
    Tensor<T> x_acoustic, h_phn, h_subword, h_word, h_utt;  // [T x d_model]
    Tensor<T> p;                                            // [T] phone scores
    Tensor<T> w0, w1, w2;                                   // [T] word scores per position
    Tensor<T> s, alpha;                                     // [T] pooling internals
    Tensor<T> h_agg;                                        // [d_model]
    std::array<Tensor<T>, 5> u;                             // utterance scores, scalars
    std::vector<char> live;
    std::vector<std::pair<std::size_t, std::size_t>> word_spans;
    std::size_t n_live = 0;
};

template <typename T>
ForwardOutputs<T> forward_from_inputs(Tape<T>* tape, const ModelInputs& in, const ModelParams<T>& p,
                                      const ModelConfig& cfg, const Ablation& abl,
                                      const TestHooks* hooks = nullptr, Rng* dropout_rng = nullptr) {
    ForwardOutputs<T> out;
    out.live = in.live;
    out.word_spans = in.word_spans;
    out.n_live = in.n_live;
    std::vector<T> feat(in.features.begin(), in.features.end());
    Tensor<T> e_multi(Shape{in.t_pad, cfg.d_multi}, std::move(feat));
    out.x_acoustic = acoustic_project(tape, e_multi, p);
    out.h_phn = phone_encode(tape, out.x_acoustic, in.phone_ids, in.live, p, cfg, hooks, dropout_rng);
    out.p = phone_head(tape, out.h_phn, p);
    out.h_subword = subword_encode(tape, out.h_phn, in.sup_ids, in.live, p, cfg, abl, hooks, dropout_rng);
    out.h_word = word_encode(tape, out.h_subword, in.bies, in.live, p, abl);
    WordScores<T> w = word_heads(tape, out.h_word, p);
    out.w0 = w.w0;
    out.w1 = w.w1;
    out.w2 = w.w2;
    out.h_utt = utterance_encode(tape, out.h_word, in.live, p, cfg, hooks, dropout_rng);
    PoolOutputs<T> pool = utterance_pool(tape, out.h_utt, out.p, w, in.live, p, cfg);
    out.s = pool.s;
    out.alpha = pool.alpha;
    out.h_agg = pool.h_agg;
    out.u = utterance_heads(tape, out.h_agg, p);
    return out;
}

template <typename T>
ForwardOutputs<T> forward(Tape<T>* tape, const UtteranceEntry& utt, const SupPhoneVocab& vocab,
                          const FeatureManifest& manifest, const ModelParams<T>& p, const ModelConfig& cfg,
                          const Ablation& abl = {}, std::size_t pad_to = 0, const TestHooks* hooks = nullptr,
                          Rng* dropout_rng = nullptr) {
    const ModelInputs in = build_inputs(utt, vocab, manifest, cfg, pad_to);
    return forward_from_inputs(tape, in, p, cfg, abl, hooks, dropout_rng);
}

// ---------------------------------------------------------------------------
// Serialization (src/model_io.cpp)

// Canonical JSON form of (config, ablation); the digest is FNV-1a over it.
std::string config_to_json(const ModelConfig& c, const Ablation& a);
void config_from_json(const std::string& text, ModelConfig& c, Ablation& a);
std::uint64_t config_digest(const ModelConfig& c, const Ablation& a);

struct LoadedModel {
    ModelConfig config;
    Ablation ablation;
    ModelParams<real> params;
};

void save_model(const std::string& path, const ModelParams<real>& p, const ModelConfig& cfg, const Ablation& abl);
LoadedModel load_model(const std::string& path);
// Refuses (ConfigMismatchError) a file whose stored config or ablation flags
// differ from the expected ones.
ModelParams<real> load_params(const std::string& path, const ModelConfig& expect, const Ablation& expect_abl = {});

}  // namespace apa
