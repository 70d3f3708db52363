#include "apa/eval.hpp"

#include <cmath>
#include <sstream>

#include <json.hpp>

namespace apa {

using nlohmann::json;

double pcc(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size())
        throw DimensionError("pcc: " + std::to_string(x.size()) + " vs " + std::to_string(y.size()) + " values");
    if (x.size() < 2) throw DegenerateInputError("pcc: needs at least 2 values");
    const double n = double(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0)
        throw UndefinedCorrelationError("pcc: zero variance in " + std::string(sxx == 0.0 ? "first" : "second") +
                                        " argument");
    return sxy / std::sqrt(sxx * syy);
}

double mse(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size())
        throw DimensionError("mse: " + std::to_string(x.size()) + " vs " + std::to_string(y.size()) + " values");
    if (x.empty()) throw DegenerateInputError("mse: empty input");
    double acc = 0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += (x[i] - y[i]) * (x[i] - y[i]);
    return acc / double(x.size());
}

namespace {

std::optional<double> pcc_or_undefined(const std::vector<double>& a, const std::vector<double>& b) {
    try {
        return pcc(a, b);
    } catch (const UndefinedCorrelationError&) {
        return std::nullopt;
    }
}

}  // namespace

SeedMetrics evaluate(const Predictions& p) {
    SeedMetrics m;
    m.phone_mse = mse(p.phone_pred, p.phone_gold);
    m.phone_pcc = pcc_or_undefined(p.phone_pred, p.phone_gold);
    for (std::size_t a = 0; a < 3; ++a) m.word_pcc[a] = pcc_or_undefined(p.word_pred[a], p.word_gold[a]);
    for (std::size_t a = 0; a < 5; ++a) m.utt_pcc[a] = pcc_or_undefined(p.utt_pred[a], p.utt_gold[a]);
    return m;
}

namespace {

AggMetric aggregate_values(const std::vector<std::optional<double>>& vals) {
    AggMetric out;
    std::vector<double> v;
    for (const auto& o : vals) {
        if (o)
            v.push_back(*o);
        else
            ++out.undefined;
    }
    out.n = v.size();
    if (v.empty()) return out;
    double mean = 0;
    for (double x : v) mean += x;
    mean /= double(v.size());
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= double(v.size());
    out.mean = mean;
    out.stddev = std::sqrt(var);
    return out;
}

}  // namespace

MetricReport aggregate_seeds(const std::vector<SeedMetrics>& seeds) {
    if (seeds.empty()) throw DegenerateInputError("aggregate_seeds: no seed metrics");
    MetricReport r;
    std::vector<std::optional<double>> col;
    auto collect = [&](auto getter) {
        col.clear();
        for (const SeedMetrics& s : seeds) col.push_back(getter(s));
        return aggregate_values(col);
    };
    r.phone_mse = collect([](const SeedMetrics& s) { return std::optional<double>(s.phone_mse); });
    r.phone_pcc = collect([](const SeedMetrics& s) { return s.phone_pcc; });
    for (std::size_t a = 0; a < 3; ++a)
        r.word_pcc[a] = collect([a](const SeedMetrics& s) { return s.word_pcc[a]; });
    for (std::size_t a = 0; a < 5; ++a)
        r.utt_pcc[a] = collect([a](const SeedMetrics& s) { return s.utt_pcc[a]; });
    return r;
}

namespace {

std::string cell(const AggMetric& m) {
    if (m.n == 0) return "n/a (zero variance)";
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(3);
    os << m.mean << " ± " << m.stddev;
    return os.str();
}

json agg_to_json(const AggMetric& m) {
    json j;
    j["mean"] = m.mean;
    j["std"] = m.stddev;
    j["n"] = m.n;
    j["undefined_count"] = m.undefined;
    return j;
}

AggMetric agg_from_json(const json& j) {
    AggMetric m;
    m.mean = j.at("mean").get<double>();
    m.stddev = j.at("std").get<double>();
    m.n = j.at("n").get<std::size_t>();
    m.undefined = j.at("undefined_count").get<std::size_t>();
    return m;
}

}  // namespace

std::string render_report(const MetricReport& r, ReportFormat format) {
    if (format == ReportFormat::json) {
        json j;
        j["phone"]["mse"] = agg_to_json(r.phone_mse);
        j["phone"]["pcc"] = agg_to_json(r.phone_pcc);
        for (std::size_t a = 0; a < 3; ++a) j["word"][kWordAspects[a]] = agg_to_json(r.word_pcc[a]);
        for (std::size_t a = 0; a < 5; ++a) j["utterance"][kUttAspects[a]] = agg_to_json(r.utt_pcc[a]);
        return j.dump(2) + "\n";
    }
    std::ostringstream os;
    os << "Phone Score\n";
    os << "  MSE          " << cell(r.phone_mse) << "\n";
    os << "  PCC          " << cell(r.phone_pcc) << "\n";
    os << "Word Score (PCC)\n";
    for (std::size_t a = 0; a < 3; ++a) {
        os << "  " << kWordAspects[a];
        for (std::size_t pad = std::string(kWordAspects[a]).size(); pad < 13; ++pad) os << ' ';
        os << cell(r.word_pcc[a]) << "\n";
    }
    os << "Utterance Score (PCC)\n";
    for (std::size_t a = 0; a < 5; ++a) {
        os << "  " << kUttAspects[a];
        for (std::size_t pad = std::string(kUttAspects[a]).size(); pad < 13; ++pad) os << ' ';
        os << cell(r.utt_pcc[a]) << "\n";
    }
    return os.str();
}

std::string render_ablation_report(const MetricReport& full, const MetricReport& ablated,
                                   const std::string& drop_label, ReportFormat format) {
    if (format == ReportFormat::json) {
        json j;
        j["drop"] = drop_label;
        for (std::size_t a = 0; a < 3; ++a) {
            j["word"][kWordAspects[a]]["full"] = agg_to_json(full.word_pcc[a]);
            j["word"][kWordAspects[a]]["ablated"] = agg_to_json(ablated.word_pcc[a]);
        }
        return j.dump(2) + "\n";
    }
    std::ostringstream os;
    os << "Word Score (PCC)\n";
    os << "              full              - " << drop_label << "\n";
    for (std::size_t a = 0; a < 3; ++a) {
        os << "  " << kWordAspects[a];
        for (std::size_t pad = std::string(kWordAspects[a]).size(); pad < 12; ++pad) os << ' ';
        std::string left = cell(full.word_pcc[a]);
        os << left;
        for (std::size_t pad = left.size(); pad < 18; ++pad) os << ' ';
        os << cell(ablated.word_pcc[a]) << "\n";
    }
    return os.str();
}

MetricReport parse_report_json(const std::string& text) {
    MetricReport r;
    try {
        json j = json::parse(text);
        r.phone_mse = agg_from_json(j.at("phone").at("mse"));
        r.phone_pcc = agg_from_json(j.at("phone").at("pcc"));
        for (std::size_t a = 0; a < 3; ++a) r.word_pcc[a] = agg_from_json(j.at("word").at(kWordAspects[a]));
        for (std::size_t a = 0; a < 5; ++a) r.utt_pcc[a] = agg_from_json(j.at("utterance").at(kUttAspects[a]));
    } catch (const json::exception& e) {
        throw ParseError(std::string("report: ") + e.what());
    }
    return r;
}

}  // namespace apa
