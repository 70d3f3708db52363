#include "apa/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <unordered_set>

#include <json.hpp>

namespace apa {

using nlohmann::json;

const std::vector<std::string>& arpabet_inventory() {
    static const std::vector<std::string> inv{
        "AA", "AE", "AH", "AO", "AW", "AY", "B",  "CH", "D",  "DH", "EH", "ER", "EY",
        "F",  "G",  "HH", "IH", "IY", "JH", "K",  "L",  "M",  "N",  "NG", "OW", "OY",
        "P",  "R",  "S",  "SH", "T",  "TH", "UH", "UW", "V",  "W",  "Y",  "Z",  "ZH"};
    return inv;
}

namespace {

void check_score(double v, double lo, double hi, const std::string& where) {
    if (!(v >= lo && v <= hi))
        throw RangeError(where + ": score " + std::to_string(v) + " outside [" + std::to_string(lo) + ", " +
                         std::to_string(hi) + "]");
}

void check_stress(double v, ScoreScale scale, const std::string& where) {
    if (scale == ScoreScale::raw) {
        if (v != 5.0 && v != 10.0)
            throw RangeError(where + ": stress " + std::to_string(v) + " not in {5, 10}");
    } else {
        if (v != 1.0 && v != 2.0)
            throw RangeError(where + ": stress " + std::to_string(v) + " not in {1, 2}");
    }
}

}  // namespace

void validate_dataset(const Dataset& d, std::size_t max_phones) {
    for (std::size_t v = 0; v < kNumViews; ++v)
        if (d.manifest.dims[v] < 1)
            throw ConfigError(std::string("manifest: view '") + kViewNames[v] + "' has dimension 0");
    const double hi = d.scale == ScoreScale::raw ? 10.0 : 2.0;
    std::unordered_set<std::string> ids;
    std::unordered_set<std::string> inventory(d.phone_inventory.begin(), d.phone_inventory.end());
    for (const UtteranceEntry& u : d.utterances) {
        if (!ids.insert(u.utt_id).second)
            throw ParseError("duplicate utterance id '" + u.utt_id + "'");
        if (u.words.empty())
            throw ParseError("utterance '" + u.utt_id + "' has no words");
        if (u.phone_count() > max_phones)
            throw RangeError("utterance '" + u.utt_id + "': " + std::to_string(u.phone_count()) +
                             " phones exceed the limit of " + std::to_string(max_phones));
        check_score(u.accuracy, 0, hi, "utterance '" + u.utt_id + "' accuracy");
        check_score(u.completeness, 0, hi, "utterance '" + u.utt_id + "' completeness");
        check_score(u.fluency, 0, hi, "utterance '" + u.utt_id + "' fluency");
        check_score(u.prosody, 0, hi, "utterance '" + u.utt_id + "' prosody");
        check_score(u.total, 0, hi, "utterance '" + u.utt_id + "' total");
        for (std::size_t wi = 0; wi < u.words.size(); ++wi) {
            const WordEntry& w = u.words[wi];
            const std::string where = "utterance '" + u.utt_id + "' word " + std::to_string(wi);
            if (w.phones.empty()) throw ParseError(where + " has no phones");
            check_score(w.accuracy, 0, hi, where + " accuracy");
            check_score(w.total, 0, hi, where + " total");
            check_stress(w.stress, d.scale, where);
            for (const PhoneEntry& p : w.phones) {
                if (!inventory.count(p.symbol))
                    throw VocabError(where + ": phone '" + p.symbol + "' not in the inventory");
                check_score(p.accuracy, 0, 2, where + " phone '" + p.symbol + "' accuracy");
                for (std::size_t v = 0; v < kNumViews; ++v)
                    if (p.features[v].size() != d.manifest.dims[v])
                        throw DimensionError("utterance '" + u.utt_id + "': view '" + kViewNames[v] +
                                             "' expects " + std::to_string(d.manifest.dims[v]) + " values, found " +
                                             std::to_string(p.features[v].size()));
            }
        }
    }
}

std::string manifest_path_for(const std::string& data_path) {
    const std::string suffix = ".jsonl";
    if (data_path.size() > suffix.size() &&
        data_path.compare(data_path.size() - suffix.size(), suffix.size(), suffix) == 0)
        return data_path.substr(0, data_path.size() - suffix.size()) + ".manifest.json";
    return data_path + ".manifest.json";
}

namespace {

json word_to_json(const WordEntry& w) {
    json jw;
    json feats;
    for (std::size_t v = 0; v < kNumViews; ++v) {
        json rows = json::array();
        for (const PhoneEntry& p : w.phones) rows.push_back(p.features[v]);
        feats[kViewNames[v]] = std::move(rows);
    }
    json phones = json::array();
    json acc = json::array();
    for (const PhoneEntry& p : w.phones) {
        phones.push_back(p.symbol);
        acc.push_back(p.accuracy);
    }
    jw["phones"] = std::move(phones);
    jw["phone_features"] = std::move(feats);
    jw["phone_accuracy"] = std::move(acc);
    jw["scores"] = {{"accuracy", w.accuracy}, {"stress", w.stress}, {"total", w.total}};
    return jw;
}

WordEntry word_from_json(const json& jw) {
    WordEntry w;
    const json& phones = jw.at("phones");
    const json& feats = jw.at("phone_features");
    const json& acc = jw.at("phone_accuracy");
    if (acc.size() != phones.size())
        throw ParseError("phone_accuracy has " + std::to_string(acc.size()) + " entries for " +
                         std::to_string(phones.size()) + " phones");
    w.phones.resize(phones.size());
    for (std::size_t i = 0; i < phones.size(); ++i) {
        w.phones[i].symbol = phones[i].get<std::string>();
        w.phones[i].accuracy = acc[i].get<double>();
    }
    for (std::size_t v = 0; v < kNumViews; ++v) {
        const json& rows = feats.at(kViewNames[v]);
        if (rows.size() != phones.size())
            throw ParseError(std::string("view '") + kViewNames[v] + "' has " + std::to_string(rows.size()) +
                             " rows for " + std::to_string(phones.size()) + " phones");
        for (std::size_t i = 0; i < rows.size(); ++i)
            w.phones[i].features[v] = rows[i].get<std::vector<double>>();
    }
    const json& sc = jw.at("scores");
    w.accuracy = sc.at("accuracy").get<double>();
    w.stress = sc.at("stress").get<double>();
    w.total = sc.at("total").get<double>();
    return w;
}

}  // namespace

void save_dataset(const Dataset& d, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    for (const UtteranceEntry& u : d.utterances) {
        json ju;
        ju["utt_id"] = u.utt_id;
        ju["speaker_id"] = u.speaker_id;
        ju["scores"] = {{"accuracy", u.accuracy},
                        {"completeness", u.completeness},
                        {"fluency", u.fluency},
                        {"prosody", u.prosody},
                        {"total", u.total}};
        json words = json::array();
        for (const WordEntry& w : u.words) words.push_back(word_to_json(w));
        ju["words"] = std::move(words);
        out << ju.dump() << '\n';
    }
    json jm;
    for (std::size_t v = 0; v < kNumViews; ++v) jm[kViewNames[v]] = d.manifest.dims[v];
    jm["phone_inventory"] = d.phone_inventory;
    std::ofstream mout(manifest_path_for(path), std::ios::binary);
    if (!mout) throw IoError("cannot open '" + manifest_path_for(path) + "' for writing");
    mout << jm.dump() << '\n';
}

Dataset load_dataset(const std::string& path, ScoreScale scale, std::size_t max_phones) {
    std::ifstream min(manifest_path_for(path), std::ios::binary);
    if (!min) throw IoError("cannot open manifest '" + manifest_path_for(path) + "'");
    Dataset d;
    d.scale = scale;
    try {
        json jm = json::parse(min);
        for (std::size_t v = 0; v < kNumViews; ++v) {
            if (!jm.contains(kViewNames[v]))
                throw ConfigError(std::string("manifest is missing view '") + kViewNames[v] + "'");
            d.manifest.dims[v] = jm.at(kViewNames[v]).get<std::size_t>();
        }
        if (jm.contains("phone_inventory"))
            d.phone_inventory = jm.at("phone_inventory").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw ParseError(manifest_path_for(path) + ": " + e.what());
    }

    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            json ju = json::parse(line);
            UtteranceEntry u;
            u.utt_id = ju.at("utt_id").get<std::string>();
            u.speaker_id = ju.at("speaker_id").get<std::string>();
            const json& sc = ju.at("scores");
            u.accuracy = sc.at("accuracy").get<double>();
            u.completeness = sc.at("completeness").get<double>();
            u.fluency = sc.at("fluency").get<double>();
            u.prosody = sc.at("prosody").get<double>();
            u.total = sc.at("total").get<double>();
            for (const json& jw : ju.at("words")) u.words.push_back(word_from_json(jw));
            d.utterances.push_back(std::move(u));
        } catch (const json::exception& e) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
        } catch (const ParseError& e) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }

    if (d.phone_inventory.empty()) {
        // No inventory recorded: adopt the symbols present, sorted.
        std::unordered_set<std::string> seen;
        for (const UtteranceEntry& u : d.utterances)
            for (const WordEntry& w : u.words)
                for (const PhoneEntry& p : w.phones) seen.insert(p.symbol);
        d.phone_inventory.assign(seen.begin(), seen.end());
        std::sort(d.phone_inventory.begin(), d.phone_inventory.end());
    }
    validate_dataset(d, max_phones);
    return d;
}

Dataset normalize_scores(const Dataset& raw) {
    if (raw.scale != ScoreScale::raw)
        throw RangeError("normalize_scores: dataset is already on the 0..2 scale");
    validate_dataset(raw, std::numeric_limits<std::size_t>::max());
    Dataset d = raw;
    d.scale = ScoreScale::normalized;
    for (UtteranceEntry& u : d.utterances) {
        u.accuracy /= 5.0;
        u.completeness /= 5.0;
        u.fluency /= 5.0;
        u.prosody /= 5.0;
        u.total /= 5.0;
        for (WordEntry& w : u.words) {
            w.accuracy /= 5.0;
            w.total /= 5.0;
            w.stress = w.stress == 5.0 ? 1.0 : 2.0;
        }
    }
    return d;
}

std::vector<double> assemble_multiview(const PhoneEntry& p, const FeatureManifest& m) {
    std::vector<double> out;
    out.reserve(m.total());
    for (std::size_t v = 0; v < kNumViews; ++v) {
        if (p.features[v].size() != m.dims[v])
            throw DimensionError(std::string("assemble_multiview: view '") + kViewNames[v] + "' expects " +
                                 std::to_string(m.dims[v]) + " values, found " +
                                 std::to_string(p.features[v].size()));
        out.insert(out.end(), p.features[v].begin(), p.features[v].end());
    }
    return out;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& d, double train_fraction, std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw ConfigError("split_dataset: train fraction " + std::to_string(train_fraction) +
                          " outside (0, 1)");
    std::vector<std::string> speakers;
    std::unordered_set<std::string> seen;
    for (const UtteranceEntry& u : d.utterances)
        if (seen.insert(u.speaker_id).second) speakers.push_back(u.speaker_id);
    if (speakers.size() < 2)
        throw SplitError("split_dataset: needs at least 2 speakers, found " + std::to_string(speakers.size()));
    Rng rng(seed);
    rng.shuffle(speakers);
    std::size_t n_train = static_cast<std::size_t>(std::llround(train_fraction * double(speakers.size())));
    n_train = std::min(std::max<std::size_t>(n_train, 1), speakers.size() - 1);
    std::unordered_set<std::string> train_set(speakers.begin(), speakers.begin() + n_train);
    Dataset a, b;
    a.manifest = b.manifest = d.manifest;
    a.phone_inventory = b.phone_inventory = d.phone_inventory;
    a.scale = b.scale = d.scale;
    for (const UtteranceEntry& u : d.utterances)
        (train_set.count(u.speaker_id) ? a : b).utterances.push_back(u);
    return {std::move(a), std::move(b)};
}

}  // namespace apa
