#include "apa/ridge.hpp"

#include <cmath>

namespace apa {

namespace {

// In-place Cholesky solve of A w = b for symmetric positive definite A.
std::vector<double> cholesky_solve(std::vector<double> a, std::vector<double> b, std::size_t d) {
    for (std::size_t j = 0; j < d; ++j) {
        double diag = a[j * d + j];
        for (std::size_t k = 0; k < j; ++k) diag -= a[j * d + k] * a[j * d + k];
        if (diag <= 0.0) throw TrainingError("ridge: matrix not positive definite");
        const double l = std::sqrt(diag);
        a[j * d + j] = l;
        for (std::size_t i = j + 1; i < d; ++i) {
            double v = a[i * d + j];
            for (std::size_t k = 0; k < j; ++k) v -= a[i * d + k] * a[j * d + k];
            a[i * d + j] = v / l;
        }
    }
    for (std::size_t i = 0; i < d; ++i) {
        double v = b[i];
        for (std::size_t k = 0; k < i; ++k) v -= a[i * d + k] * b[k];
        b[i] = v / a[i * d + i];
    }
    for (std::size_t ii = d; ii-- > 0;) {
        double v = b[ii];
        for (std::size_t k = ii + 1; k < d; ++k) v -= a[k * d + ii] * b[k];
        b[ii] = v / a[ii * d + ii];
    }
    return b;
}

}  // namespace

RidgeModel ridge_fit(const std::vector<std::vector<double>>& x, const std::vector<double>& y,
                     double lambda_scale) {
    if (x.empty() || x.size() != y.size())
        throw DimensionError("ridge_fit: " + std::to_string(x.size()) + " rows vs " + std::to_string(y.size()) +
                             " targets");
    const std::size_t n = x.size(), d = x[0].size();
    RidgeModel m;
    m.feat_mean.assign(d, 0.0);
    m.feat_sd.assign(d, 0.0);
    for (const auto& row : x) {
        if (row.size() != d)
            throw DimensionError("ridge_fit: ragged feature row of " + std::to_string(row.size()));
        for (std::size_t j = 0; j < d; ++j) m.feat_mean[j] += row[j];
    }
    for (std::size_t j = 0; j < d; ++j) m.feat_mean[j] /= double(n);
    for (const auto& row : x)
        for (std::size_t j = 0; j < d; ++j) {
            const double c = row[j] - m.feat_mean[j];
            m.feat_sd[j] += c * c;
        }
    for (std::size_t j = 0; j < d; ++j) m.feat_sd[j] = std::sqrt(m.feat_sd[j] / double(n)) + 1e-12;

    double ymean = 0;
    for (double v : y) ymean += v;
    ymean /= double(n);
    m.intercept = ymean;

    std::vector<double> gram(d * d, 0.0), rhs(d, 0.0), z(d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) z[j] = (x[i][j] - m.feat_mean[j]) / m.feat_sd[j];
        const double yc = y[i] - ymean;
        for (std::size_t j = 0; j < d; ++j) {
            rhs[j] += z[j] * yc;
            for (std::size_t k = j; k < d; ++k) gram[j * d + k] += z[j] * z[k];
        }
    }
    for (std::size_t j = 0; j < d; ++j)
        for (std::size_t k = 0; k < j; ++k) gram[j * d + k] = gram[k * d + j];
    const double lam = lambda_scale * double(n);
    for (std::size_t j = 0; j < d; ++j) gram[j * d + j] += lam;
    m.w = cholesky_solve(std::move(gram), std::move(rhs), d);
    return m;
}

std::vector<double> ridge_predict(const RidgeModel& m, const std::vector<std::vector<double>>& x) {
    std::vector<double> out;
    out.reserve(x.size());
    for (const auto& row : x) {
        if (row.size() != m.w.size())
            throw DimensionError("ridge_predict: row of " + std::to_string(row.size()) + " features vs model of " +
                                 std::to_string(m.w.size()));
        double acc = m.intercept;
        for (std::size_t j = 0; j < m.w.size(); ++j)
            acc += m.w[j] * (row[j] - m.feat_mean[j]) / m.feat_sd[j];
        out.push_back(acc);
    }
    return out;
}

}  // namespace apa
