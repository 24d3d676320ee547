#pragma once

#include "neuron_probe/model.hpp"
#include "neuron_probe/numerics.hpp"

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace neuron_probe {

/// Before-softmax scores of one residual-stream vector over the vocabulary.
struct BsVector {
    DenseVector scores;
    std::string source;
    bool final_norm_applied = false;
};

/// Projects residual-stream vectors into vocabulary space. Whether the model's
/// final normalisation runs before the unembedding is fixed per lens and
/// recorded in every BsVector it produces.
class Lens {
public:
    /// Projection mode defaults to the model's final_norm_on_projection flag.
    explicit Lens(const Model& model, std::optional<bool> final_norm = std::nullopt);

    const Model& model() const { return *model_; }
    bool final_norm() const { return final_norm_; }

    BsVector bs_values(std::span<const double> vector, std::string source = {}) const;
    DenseVector probabilities(std::span<const double> vector) const;
    double log_prob(std::span<const double> vector, int token) const;
    double prob(std::span<const double> vector, int token) const;
    /// 1 = largest bs-value; ties broken by ascending token id.
    int token_rank(std::span<const double> vector, int token) const;
    /// Ids of the n largest bs-values in canonical order.
    std::vector<int> top_token_ids(std::span<const double> vector, std::size_t n) const;

    /// The projection is an affine map of x up to a per-vector scale and mean:
    /// bs(x) = finish(linear_part(x), x), with linear_part linear in x. Callers
    /// scoring many x = base + m * v reuse linear_part(base) and linear_part(v).
    DenseVector linear_part(std::span<const double> vector) const;
    BsVector finish(std::span<const double> linear, std::span<const double> vector,
                    std::string source = {}) const;

    /// linear_part of every subvalue of one layer: row k is FFN neuron k, or
    /// attention neuron (j, k) at row j * d_h + k. Computed on first use and
    /// shared by copies of this lens.
    const DenseMatrix& subvalue_linear(Site site, int layer) const;

private:
    void check_width(std::span<const double> vector) const;
    void check_token(int token) const;

    const Model* model_;
    bool final_norm_;
    DenseVector gain_;        // final-norm weight (ones when off)
    DenseVector gain_scores_; // E_u * gain, used to subtract the mean
    DenseVector bias_scores_; // E_u * final-norm bias

    struct Cache {
        std::vector<std::once_flag> ready;
        std::vector<DenseMatrix> linear;
        explicit Cache(std::size_t n) : ready(n), linear(n) {}
    };
    std::shared_ptr<Cache> cache_;
};

/// Token-string table loaded from a JSON object {"token": id, ...}.
class Tokenizer {
public:
    static Tokenizer load(const std::filesystem::path& path);
    static Tokenizer from_map(const std::unordered_map<std::string, int>& vocab);

    std::size_t size() const { return tokens_.size(); }
    const std::string& token(int id) const;
    std::optional<int> id(const std::string& token) const;

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
};

std::vector<std::string> top_tokens(const Lens& lens, std::span<const double> vector,
                                    std::size_t n, const Tokenizer& tokenizer);

} // namespace neuron_probe
