#include "neuron_probe/lens.hpp"

#include "neuron_probe/forward.hpp"

#include <json.hpp>

#include <fstream>
#include <stdexcept>

namespace neuron_probe {

Lens::Lens(const Model& model, std::optional<bool> final_norm)
    : model_(&model),
      final_norm_(final_norm.value_or(model.spec.final_norm_on_projection)),
      cache_(std::make_shared<Cache>(2 * static_cast<std::size_t>(model.spec.n_layer))) {
    const auto d = static_cast<std::size_t>(model.spec.d_model);
    const auto B = static_cast<std::size_t>(model.spec.n_vocab);
    const auto& w = model.weights;
    gain_.assign(d, 1.0);
    if (!final_norm_) return;
    const auto g = w.final_norm_weight.values();
    for (std::size_t t = 0; t < d; ++t) gain_[t] = g[t];
    gain_scores_.resize(B);
    bias_scores_.assign(B, 0.0);
    DenseVector beta(d, 0.0);
    const auto b = w.final_norm_bias.values();
    for (std::size_t t = 0; t < b.size(); ++t) beta[t] = b[t];
    for (std::size_t v = 0; v < B; ++v) {
        gain_scores_[v] = dot(w.unembedding.row(v), gain_);
        if (!b.empty()) bias_scores_[v] = dot(w.unembedding.row(v), beta);
    }
}

void Lens::check_width(std::span<const double> vector) const {
    if (static_cast<int>(vector.size()) != model_->spec.d_model) {
        throw std::invalid_argument("lens: vector width " + std::to_string(vector.size()) +
                                    " != model width " + std::to_string(model_->spec.d_model));
    }
}

void Lens::check_token(int token) const {
    if (token < 0 || token >= model_->spec.n_vocab) {
        throw std::out_of_range("lens: token " + std::to_string(token) + " outside vocabulary");
    }
}

DenseVector Lens::linear_part(std::span<const double> vector) const {
    check_width(vector);
    const auto& E = model_->weights.unembedding;
    DenseVector out(static_cast<std::size_t>(model_->spec.n_vocab));
    if (!final_norm_) {
        for (std::size_t v = 0; v < out.size(); ++v) out[v] = dot(E.row(v), vector);
        return out;
    }
    DenseVector gx(vector.size());
    for (std::size_t t = 0; t < gx.size(); ++t) gx[t] = gain_[t] * vector[t];
    for (std::size_t v = 0; v < out.size(); ++v) out[v] = dot(E.row(v), gx);
    return out;
}

BsVector Lens::finish(std::span<const double> linear, std::span<const double> vector,
                      std::string source) const {
    check_width(vector);
    BsVector out{DenseVector(linear.begin(), linear.end()), std::move(source), final_norm_};
    if (final_norm_) {
        // E_u (g * (x - mean) * r + beta) = r * (E_u g x - mean * E_u g) + E_u beta
        const NormStats s = norm_stats(model_->spec, vector);
        for (std::size_t v = 0; v < out.scores.size(); ++v) {
            out.scores[v] = s.inv_scale * (linear[v] - s.mean * gain_scores_[v]) + bias_scores_[v];
        }
    }
    require_finite(out.scores, "bs_values");
    return out;
}

const DenseMatrix& Lens::subvalue_linear(Site site, int layer) const {
    if (layer < 0 || layer >= model_->spec.n_layer) throw std::out_of_range("lens: layer out of range");
    const auto slot = 2 * static_cast<std::size_t>(layer) + static_cast<std::size_t>(site);
    std::call_once(cache_->ready[slot], [&] {
        const auto& lw = model_->weights.layers[static_cast<std::size_t>(layer)];
        const Tensor& w = site == Site::Ffn ? lw.fc2 : lw.wo;
        const std::size_t d = w.shape()[0], n = w.shape()[1];
        DenseMatrix out(n, static_cast<std::size_t>(model_->spec.n_vocab));
        DenseVector column(d);
        for (std::size_t k = 0; k < n; ++k) {
            for (std::size_t t = 0; t < d; ++t) column[t] = w.at(t, k);
            const auto lin = linear_part(column);
            std::copy(lin.begin(), lin.end(), out.row(k).begin());
        }
        cache_->linear[slot] = std::move(out);
    });
    return cache_->linear[slot];
}

BsVector Lens::bs_values(std::span<const double> vector, std::string source) const {
    return finish(linear_part(vector), vector, std::move(source));
}

DenseVector Lens::probabilities(std::span<const double> vector) const {
    return softmax_stable(bs_values(vector).scores);
}

double Lens::log_prob(std::span<const double> vector, int token) const {
    check_token(token);
    return log_softmax_at(bs_values(vector).scores, static_cast<std::size_t>(token));
}

double Lens::prob(std::span<const double> vector, int token) const {
    check_token(token);
    return softmax_stable(bs_values(vector).scores)[static_cast<std::size_t>(token)];
}

int Lens::token_rank(std::span<const double> vector, int token) const {
    check_token(token);
    return static_cast<int>(descending_rank(bs_values(vector).scores, static_cast<std::size_t>(token)));
}

std::vector<int> Lens::top_token_ids(std::span<const double> vector, std::size_t n) const {
    const auto bs = bs_values(vector);
    std::vector<Scored<int>> scored;
    scored.reserve(bs.scores.size());
    for (std::size_t t = 0; t < bs.scores.size(); ++t) scored.push_back({static_cast<int>(t), bs.scores[t]});
    std::vector<int> ids;
    for (const auto& s : top_k(std::move(scored), n)) ids.push_back(s.key);
    return ids;
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open tokenizer file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("tokenizer file " + path.string() + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw std::runtime_error("tokenizer file must hold a JSON object token -> id");
    std::unordered_map<std::string, int> vocab;
    for (const auto& [token, id] : j.items()) vocab[token] = id.get<int>();
    return from_map(vocab);
}

Tokenizer Tokenizer::from_map(const std::unordered_map<std::string, int>& vocab) {
    Tokenizer tok;
    int max_id = -1;
    for (const auto& [s, id] : vocab) {
        if (id < 0) throw std::invalid_argument("tokenizer: negative id for '" + s + "'");
        max_id = std::max(max_id, id);
    }
    tok.tokens_.assign(static_cast<std::size_t>(max_id + 1), std::string{});
    std::vector<bool> seen(tok.tokens_.size(), false);
    for (const auto& [s, id] : vocab) {
        if (seen[static_cast<std::size_t>(id)]) {
            throw std::invalid_argument("tokenizer: id " + std::to_string(id) + " assigned twice");
        }
        seen[static_cast<std::size_t>(id)] = true;
        tok.tokens_[static_cast<std::size_t>(id)] = s;
        tok.ids_[s] = id;
    }
    return tok;
}

const std::string& Tokenizer::token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw std::out_of_range("tokenizer has no token with id " + std::to_string(id));
    }
    return tokens_[static_cast<std::size_t>(id)];
}

std::optional<int> Tokenizer::id(const std::string& token) const {
    auto it = ids_.find(token);
    if (it == ids_.end()) return std::nullopt;
    return it->second;
}

std::vector<std::string> top_tokens(const Lens& lens, std::span<const double> vector, std::size_t n,
                                    const Tokenizer& tokenizer) {
    std::vector<std::string> out;
    for (int id : lens.top_token_ids(vector, n)) out.push_back(tokenizer.token(id));
    return out;
}

} // namespace neuron_probe
