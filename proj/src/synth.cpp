#include <algorithm>
#include <cmath>
#include <set>

#include "apa/data.hpp"

namespace apa {

namespace {

constexpr std::size_t kWordsPerLength = 24;
constexpr std::size_t kMaxWordLen = 5;

// Fixed pseudo-lexicon: 24 phone sequences per length 1..5, drawn once from a
// constant seed so every dataset shares one language. Bins are indexed by
// length-1.
const std::array<std::vector<std::vector<std::size_t>>, kMaxWordLen>& lexicon() {
    static const auto bins = [] {
        std::array<std::vector<std::vector<std::size_t>>, kMaxWordLen> out;
        Rng rng(2468);
        const std::size_t n_phones = arpabet_inventory().size();
        for (std::size_t len = 1; len <= kMaxWordLen; ++len) {
            std::set<std::vector<std::size_t>> bin;
            while (bin.size() < kWordsPerLength) {
                std::vector<std::size_t> w(len);
                for (std::size_t i = 0; i < len; ++i) w[i] = rng.below(n_phones);
                bin.insert(std::move(w));
            }
            out[len - 1].assign(bin.begin(), bin.end());
        }
        return out;
    }();
    return bins;
}

double clip02(double x) { return std::clamp(x, 0.0, 2.0); }

double round_to_grade(double q) { return std::floor(q + 0.5); }

}  // namespace

Dataset gen_synthetic(std::size_t n_utts, std::uint64_t seed, const FeatureManifest& manifest,
                      const SynthParams& params, std::vector<double>* latent_q) {
    if (n_utts < 1) throw ConfigError("gen_synthetic: needs at least 1 utterance");
    Dataset d;
    d.manifest = manifest;
    d.phone_inventory = arpabet_inventory();
    d.scale = ScoreScale::normalized;
    if (latent_q) latent_q->clear();

    Rng rng(seed);

    // Per-view readout maps, row-major dims[v] x 3, drawn before any data.
    std::array<std::vector<double>, kNumViews> maps;
    for (std::size_t v = 0; v < kNumViews; ++v) {
        maps[v].resize(manifest.dims[v] * 3);
        for (double& m : maps[v]) m = rng.uniform(-1.0, 1.0);
    }

    const std::size_t n_speakers = std::max<std::size_t>(2, n_utts / 20);
    const auto& lex = lexicon();

    for (std::size_t ui = 0; ui < n_utts; ++ui) {
        UtteranceEntry u;
        u.utt_id = "utt" + std::to_string(ui);
        u.speaker_id = "spk" + std::to_string(ui % n_speakers);
        const double mu = rng.uniform(0.5, 2.0);
        const int n_words = rng.range_int(2, 6);

        std::size_t phones_total = 0, phones_good = 0;
        double word_acc_sum = 0.0;
        for (int wi = 0; wi < n_words; ++wi) {
            const int len = rng.range_int(1, int(kMaxWordLen));
            const auto& word_phones = lex[std::size_t(len) - 1][rng.below(kWordsPerLength)];
            const double f = double(rng.range_int(0, 1));
            WordEntry w;
            double q_sum = 0.0;
            for (std::size_t pid : word_phones) {
                const double q = clip02(mu + rng.normal(0.0, params.sigma_q));
                PhoneEntry p;
                p.symbol = d.phone_inventory[pid];
                p.accuracy = round_to_grade(q);
                const double lat[3] = {q, f, mu};
                for (std::size_t v = 0; v < kNumViews; ++v) {
                    p.features[v].resize(manifest.dims[v]);
                    for (std::size_t i = 0; i < manifest.dims[v]; ++i) {
                        const double* row = maps[v].data() + i * 3;
                        p.features[v][i] =
                            row[0] * lat[0] + row[1] * lat[1] + row[2] * lat[2] +
                            rng.normal(0.0, params.sigma_feat);
                    }
                }
                q_sum += q;
                ++phones_total;
                if (q > 0.25) ++phones_good;
                if (latent_q) latent_q->push_back(q);
                w.phones.push_back(std::move(p));
            }
            w.accuracy = clip02(q_sum / double(word_phones.size()));
            w.stress = 1.0 + f;
            w.total = w.accuracy;
            word_acc_sum += w.accuracy;
            u.words.push_back(std::move(w));
        }
        u.accuracy = word_acc_sum / double(n_words);
        u.completeness = 2.0 * double(phones_good) / double(phones_total);
        u.fluency = clip02(mu + rng.normal(0.0, params.sigma_fp));
        u.prosody = clip02(mu + rng.normal(0.0, params.sigma_fp));
        u.total = (u.accuracy + u.fluency + u.prosody) / 3.0;
        d.utterances.push_back(std::move(u));
    }
    return d;
}

}  // namespace apa
