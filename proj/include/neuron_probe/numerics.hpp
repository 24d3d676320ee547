#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace neuron_probe {

/// Raised when a kernel receives (or would emit) a non-finite value, or an
/// index outside the vector it addresses.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using DenseVector = std::vector<double>;

/// Row-major matrix of doubles. Shape metadata always matches the element count.
class DenseMatrix {
public:
    DenseMatrix() = default;
    DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

    std::span<const double> values() const { return values_; }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> values_;
};

// Accumulation is always carried out in double, whatever the storage type.
double dot(std::span<const double> a, std::span<const double> b);
double dot(std::span<const float> a, std::span<const double> b);
double norm_l2(std::span<const double> v);

/// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);
void axpy(double alpha, std::span<const float> x, std::span<double> y);

DenseVector add(std::span<const double> a, std::span<const double> b);
DenseVector subtract(std::span<const double> a, std::span<const double> b);
DenseVector scaled(std::span<const double> v, double alpha);

/// Throws NumericError naming `where` if any element is NaN or infinite.
void require_finite(std::span<const double> v, const char* where);

double log_sum_exp(std::span<const double> scores);

/// Softmax with max-subtraction. Input must be nonempty and finite.
DenseVector softmax_stable(std::span<const double> scores);

/// scores[index] - logsumexp(scores); always <= 0.
double log_softmax_at(std::span<const double> scores, std::size_t index);

/// 1-based rank of scores[index] in descending order; ties go to the lower index.
std::size_t descending_rank(std::span<const double> scores, std::size_t index);

template <typename Key>
struct Scored {
    Key key;
    double score = 0.0;

    friend bool operator==(const Scored&, const Scored&) = default;
};

/// Descending by score; equal scores fall back to ascending key order, so the
/// result is a total order and reproducible. k larger than the input returns all.
template <typename Key>
std::vector<Scored<Key>> top_k(std::vector<Scored<Key>> items, std::size_t k) {
    auto before = [](const Scored<Key>& a, const Scored<Key>& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.key < b.key;
    };
    k = std::min(k, items.size());
    std::partial_sort(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(k), items.end(),
                      before);
    items.resize(k);
    return items;
}

} // namespace neuron_probe
