#pragma once

#include "neuron_probe/attribution.hpp"
#include "neuron_probe/corpus.hpp"
#include "neuron_probe/intervention.hpp"
#include "neuron_probe/model.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace neuron_probe {

/// One sentence's outcome under the model's own output distribution.
struct SentenceEval {
    double reciprocal_rank = 0.0;
    double prob = 0.0; // percent
    double log_prob = 0.0;
};

/// Corpus averages: MRR, probability in percent, log probability.
struct EvalMetrics {
    double mrr = 0.0;
    double prob = 0.0;
    double logp = 0.0;
    std::size_t count = 0;
};

SentenceEval evaluate_sentence(const Model& model, const KnowledgeRecord& record);
SentenceEval evaluate_logits(std::span<const double> logits, int answer);
EvalMetrics aggregate(std::span<const SentenceEval> sentences);
/// Throws std::invalid_argument on an empty corpus.
EvalMetrics evaluate(const Model& model, const Corpus& corpus);

/// after - before, field by field.
EvalMetrics difference(const EvalMetrics& after, const EvalMetrics& before);
/// (before - after) / before * 100 for MRR and prob; 0 when before is 0.
struct PercentDecrease {
    double mrr = 0.0;
    double prob = 0.0;
};
PercentDecrease percent_decrease(const EvalMetrics& before, const EvalMetrics& after);

/// How neurons are picked per sentence: by an importance method, or uniformly
/// at random from the same site inventory with a per-sentence stream derived
/// from (seed, sentence index).
struct Selector {
    std::optional<Method> method;
    std::uint64_t seed = 0;

    static Selector by(Method m) { return {m, 0}; }
    static Selector random(std::uint64_t seed) { return {std::nullopt, seed}; }
    bool is_random() const { return !method.has_value(); }
    std::string label() const;
};

/// Parses a method id or letter, or "random" / "random(<seed>)".
std::optional<Selector> parse_selector(const std::string& text, std::uint64_t default_seed = 0);

struct SiteBudget {
    int ffn = 10;
    int attn = 0;
};

struct ExperimentConfig {
    Selector selector = Selector::by(Method::LogProbIncrease);
    SiteBudget budget;
    std::optional<bool> final_norm; // projection mode for scoring; model default when unset
};

struct SentenceOutcome {
    std::string id;
    SentenceEval before;
    SentenceEval after;
    std::vector<NeuronRef> selected;
};

struct ExperimentResult {
    EvalMetrics before;
    EvalMetrics after;
    EvalMetrics delta; // after - before
    std::vector<SentenceOutcome> sentences;
    std::vector<std::string> warnings;
};

/// Draws k distinct indices from [0, n) reproducibly for (seed, stream).
std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, std::uint64_t seed, std::uint64_t stream);

/// The neurons `selector` picks for one sentence under `budget`.
std::vector<NeuronRef> select_neurons(const Model& model, const ForwardTrace& trace, int answer,
                                      const Selector& selector, const SiteBudget& budget,
                                      std::size_t sentence_index, std::optional<bool> final_norm = {});

/// Per sentence: attribute, zero the picked neurons, re-run, record both sides.
ExperimentResult run_experiment(const Model& model, const Corpus& corpus, const ExperimentConfig& config);

/// One fixed intervention applied to every sentence.
ExperimentResult run_intervention(const Model& model, const Corpus& corpus, const InterventionSpec& spec);

struct CrossKnowledgeResult {
    std::vector<std::string> types;
    int heads_per_type = 0;
    std::map<std::string, std::vector<HeadRef>> heads; // by source type
    /// decrease[source][target] in percent.
    std::vector<std::vector<PercentDecrease>> decrease;
};

/// For every source type: rank heads by summed importance over its sentences,
/// zero the top floor(head_fraction * L * H), and evaluate every type. Zero
/// fraction gives a zero matrix; a positive fraction selecting no head throws.
CrossKnowledgeResult cross_knowledge_heads(const Model& model, const std::map<std::string, Corpus>& by_type,
                                           double head_fraction = 0.01, std::optional<bool> final_norm = {});

struct QueryExperimentConfig {
    int n_query = 1000;
    int attn_value_k = 200;
    QueryOptions options;
    std::optional<std::uint64_t> random_seed; // set: random FFN neurons instead
    std::optional<bool> final_norm;
};

/// FFN neurons that can act as queries of attention value neurons: layers
/// 0 .. L-2, in canonical order.
std::vector<NeuronRef> query_inventory(const ModelSpec& spec);

/// Summed attention-weighted query scores of FFN neurons over the sentence's
/// top attention value neurons (method a), unsorted.
std::vector<Scored<NeuronRef>> query_neuron_scores(const Model& model, const ForwardTrace& trace, int answer,
                                                   int attn_value_k, const QueryOptions& options = {},
                                                   std::optional<bool> final_norm = {});

/// Per sentence: zero the top-n query FFN neurons (or n random ones from the
/// same inventory) and evaluate. n beyond the inventory is clamped with a warning.
ExperimentResult query_neuron_experiment(const Model& model, const Corpus& corpus,
                                         const QueryExperimentConfig& config);

} // namespace neuron_probe
