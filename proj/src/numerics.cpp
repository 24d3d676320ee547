#include "neuron_probe/numerics.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace neuron_probe {

double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double dot(std::span<const float> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
    return acc;
}

double norm_l2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

void axpy(double alpha, std::span<const float> x, std::span<double> y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * static_cast<double>(x[i]);
}

DenseVector add(std::span<const double> a, std::span<const double> b) {
    DenseVector out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

DenseVector subtract(std::span<const double> a, std::span<const double> b) {
    DenseVector out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

DenseVector scaled(std::span<const double> v, double alpha) {
    DenseVector out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = alpha * v[i];
    return out;
}

void require_finite(std::span<const double> v, const char* where) {
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) {
            throw NumericError(std::string(where) + ": non-finite value at element " +
                               std::to_string(i));
        }
    }
}

double log_sum_exp(std::span<const double> scores) {
    if (scores.empty()) throw NumericError("log_sum_exp: empty input");
    require_finite(scores, "log_sum_exp");
    double max_score = -std::numeric_limits<double>::infinity();
    for (double s : scores) max_score = std::max(max_score, s);
    double sum = 0.0;
    for (double s : scores) sum += std::exp(s - max_score);
    return max_score + std::log(sum);
}

DenseVector softmax_stable(std::span<const double> scores) {
    if (scores.empty()) throw NumericError("softmax_stable: empty input");
    require_finite(scores, "softmax_stable");
    double max_score = scores[0];
    for (double s : scores) max_score = std::max(max_score, s);
    DenseVector out(scores.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        out[i] = std::exp(scores[i] - max_score);
        sum += out[i];
    }
    for (double& p : out) p /= sum;
    return out;
}

double log_softmax_at(std::span<const double> scores, std::size_t index) {
    if (index >= scores.size()) {
        throw NumericError("log_softmax_at: index " + std::to_string(index) +
                           " out of range for " + std::to_string(scores.size()) + " scores");
    }
    // Subtracting the max first keeps the result exact for shifted inputs and <= 0.
    double lp = scores[index] - log_sum_exp(scores);
    return std::min(lp, 0.0);
}

std::size_t descending_rank(std::span<const double> scores, std::size_t index) {
    if (index >= scores.size()) {
        throw NumericError("descending_rank: index " + std::to_string(index) + " out of range");
    }
    const double target = scores[index];
    std::size_t rank = 1;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (scores[i] > target || (scores[i] == target && i < index)) ++rank;
    }
    return rank;
}

} // namespace neuron_probe
