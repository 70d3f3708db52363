#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "apa/common.hpp"

namespace apa {

inline constexpr std::size_t kNumViews = 6;

// Fixed feature-view order; concatenation and serialization both follow it.
inline constexpr std::array<const char*, kNumViews> kViewNames{"gop", "dur", "energy", "w2v2", "hubert", "wavlm"};

struct FeatureManifest {
    std::array<std::size_t, kNumViews> dims{84, 6, 6, 32, 32, 32};

    std::size_t total() const {
        std::size_t n = 0;
        for (std::size_t d : dims) n += d;
        return n;
    }
    bool operator==(const FeatureManifest&) const = default;
};

struct PhoneEntry {
    std::string symbol;
    std::array<std::vector<double>, kNumViews> features;
    double accuracy = 0.0;
};

struct WordEntry {
    std::vector<PhoneEntry> phones;
    double accuracy = 0.0;
    double stress = 0.0;
    double total = 0.0;
};

struct UtteranceEntry {
    std::string utt_id;
    std::string speaker_id;
    std::vector<WordEntry> words;
    double accuracy = 0.0;
    double completeness = 0.0;
    double fluency = 0.0;
    double prosody = 0.0;
    double total = 0.0;

    std::size_t phone_count() const {
        std::size_t n = 0;
        for (const WordEntry& w : words) n += w.phones.size();
        return n;
    }
};

enum class ScoreScale { raw, normalized };

struct Dataset {
    FeatureManifest manifest;
    std::vector<UtteranceEntry> utterances;
    std::vector<std::string> phone_inventory;
    ScoreScale scale = ScoreScale::normalized;
};

// The 39-symbol ARPAbet-style phone inventory used by the synthetic generator.
const std::vector<std::string>& arpabet_inventory();

// Throws on any schema violation: empty words, length mismatches against the
// manifest (naming utterance and view), scores outside the declared scale,
// unknown phone symbols, duplicate utterance ids, oversized utterances.
void validate_dataset(const Dataset& d, std::size_t max_phones = 50);

// JSON-lines file at `path`, sidecar manifest next to it. The caller declares
// which score scale the file is on; validation enforces it.
Dataset load_dataset(const std::string& path, ScoreScale scale, std::size_t max_phones = 50);
void save_dataset(const Dataset& d, const std::string& path);

// Path of the sidecar manifest for a dataset path ("x.jsonl" -> "x.manifest.json").
std::string manifest_path_for(const std::string& data_path);

// Raw scales: word accuracy/total and utterance scores on 0..10, stress in
// {5,10}. Output is the 0..2 scale with stress mapped to {1,2}; phone
// accuracy is already 0..2 and passes through.
Dataset normalize_scores(const Dataset& raw);

// Concatenates the per-view vectors in the fixed view order.
std::vector<double> assemble_multiview(const PhoneEntry& p, const FeatureManifest& m);

struct SynthParams {
    double sigma_q = 0.25;
    double sigma_feat = 0.1;
    double sigma_fp = 0.15;
};

// Deterministic synthetic corpus with a planted feature->score relationship.
// One latent proficiency per utterance drives per-phone quality, and every
// feature view is a fixed seed-derived linear readout of (quality, stress,
// proficiency) plus noise. `latent_q` (optional) receives the per-phone
// quality values in dataset order, for calibration tooling.
Dataset gen_synthetic(std::size_t n_utts, std::uint64_t seed, const FeatureManifest& manifest,
                      const SynthParams& params = {}, std::vector<double>* latent_q = nullptr);

// Speaker-disjoint partition, deterministic per seed.
std::pair<Dataset, Dataset> split_dataset(const Dataset& d, double train_fraction, std::uint64_t seed);

}  // namespace apa
