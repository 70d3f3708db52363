#pragma once

#include <vector>

#include "apa/common.hpp"

namespace apa {

// Linear baseline used to calibrate learnability thresholds: ridge regression
// on standardized features, lambda scaled by the training-set size.
struct RidgeModel {
    std::vector<double> w;
    double intercept = 0.0;
    std::vector<double> feat_mean, feat_sd;
};

RidgeModel ridge_fit(const std::vector<std::vector<double>>& x, const std::vector<double>& y,
                     double lambda_scale = 1e-3);
std::vector<double> ridge_predict(const RidgeModel& m, const std::vector<std::vector<double>>& x);

}  // namespace apa
