#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "apa/common.hpp"

namespace apa {

inline constexpr std::array<const char*, 3> kWordAspects{"accuracy", "stress", "total"};
inline constexpr std::array<const char*, 5> kUttAspects{"accuracy", "completeness", "fluency", "prosody", "total"};

double pcc(const std::vector<double>& x, const std::vector<double>& y);
double mse(const std::vector<double>& x, const std::vector<double>& y);

// Pooled predictions and gold values across one test set, in dataset order.
struct Predictions {
    std::vector<double> phone_pred, phone_gold;
    std::array<std::vector<double>, 3> word_pred, word_gold;
    std::array<std::vector<double>, 5> utt_pred, utt_gold;
};

// Per-seed metrics; a PCC is absent when either side has zero variance.
struct SeedMetrics {
    double phone_mse = 0.0;
    std::optional<double> phone_pcc;
    std::array<std::optional<double>, 3> word_pcc;
    std::array<std::optional<double>, 5> utt_pcc;
};

SeedMetrics evaluate(const Predictions& p);

struct AggMetric {
    double mean = 0.0;
    double stddev = 0.0;  // population
    std::size_t n = 0;
    std::size_t undefined = 0;
};

struct MetricReport {
    AggMetric phone_mse, phone_pcc;
    std::array<AggMetric, 3> word_pcc;
    std::array<AggMetric, 5> utt_pcc;
};

MetricReport aggregate_seeds(const std::vector<SeedMetrics>& seeds);

enum class ReportFormat { text, json };

std::string render_report(const MetricReport& r, ReportFormat format);
MetricReport parse_report_json(const std::string& text);

// Side-by-side word-score comparison between a full model and one with a
// component removed. Only the three word aspects appear.
std::string render_ablation_report(const MetricReport& full, const MetricReport& ablated,
                                   const std::string& drop_label, ReportFormat format);

}  // namespace apa
