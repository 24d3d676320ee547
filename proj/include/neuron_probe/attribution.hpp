#pragma once

#include "neuron_probe/forward.hpp"
#include "neuron_probe/lens.hpp"
#include "neuron_probe/model.hpp"
#include "neuron_probe/numerics.hpp"

#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace neuron_probe {

/// Importance scores. The first eight are the value-neuron methods compared
/// against each other (a-h); QueryInnerProduct scores query components.
enum class Method {
    LogProbIncrease, // a) log p(w|b + m v) - log p(w|b)
    LogProb,         // b) log p(w|m v)
    ProbIncrease,    // c) p(w|b + m v) - p(w|b)
    Norm,            // d) |v|
    Coefficient,     // e) |m|
    InvRank,         // f) 1 / rank(w) of v
    CoeffNorm,       // g) |m| * |v|
    CoeffInvRank,    // h) |m| / rank(w) of v
    QueryInnerProduct,
};

inline constexpr std::array<Method, 8> kValueMethods = {
    Method::LogProbIncrease, Method::LogProb,   Method::ProbIncrease, Method::Norm,
    Method::Coefficient,     Method::InvRank,   Method::CoeffNorm,    Method::CoeffInvRank,
};

std::string_view method_id(Method m);
char method_letter(Method m);
/// Accepts the long id ("log_prob_increase") or the letter ("a").
std::optional<Method> parse_method(std::string_view text);

using AttributionTarget = std::variant<NeuronRef, HeadRef, LayerRef>;
std::string to_string(const AttributionTarget& target);

struct ImportanceRecord {
    AttributionTarget target;
    Method method = Method::LogProbIncrease;
    double score = 0.0;
    int answer = 0;
    std::string sentence_id;
};

/// Coefficient, subvalue and written vector of a neuron at the last position.
/// Attention neurons without a position pin sum over all source positions.
struct NeuronContribution {
    double coefficient = 0.0;
    DenseVector subvalue;
    DenseVector vector;
};
NeuronContribution neuron_contribution(const Model& model, const ForwardTrace& trace,
                                       const NeuronRef& ref);

/// Per-head attention-neuron coefficients at query position i, laid out
/// head-major: sum_p alpha_{i,j,p} * value_k(p).
DenseVector attn_neuron_coefficients(const ForwardTrace& trace, int layer, int query_pos);

/// The vector a target writes at the last position, and the residual it is
/// added to: h^{l-1} for attention-site targets, h^{l-1} + A^l for FFN ones.
DenseVector target_vector(const Model& model, const ForwardTrace& trace, const AttributionTarget& target);
DenseVector target_baseline(const ForwardTrace& trace, const AttributionTarget& target);

/// log p(w | baseline + v) - log p(w | baseline).
double log_prob_increase(const Lens& lens, std::span<const double> baseline,
                         std::span<const double> v, int answer);

/// Log-probability increase of one neuron, head, or whole sublayer.
double value_importance(const Lens& lens, const ForwardTrace& trace, const AttributionTarget& target,
                        int answer);

/// One method over every neuron of `site` (attention neurons are summed over
/// source positions). Unsorted, in canonical neuron order.
std::vector<Scored<NeuronRef>> score_neurons(const Lens& lens, const ForwardTrace& trace, int answer,
                                             Site site, Method method);

/// All eight value methods for every neuron of `site`.
std::vector<ImportanceRecord> score_all_methods(const Lens& lens, const ForwardTrace& trace,
                                                int answer, Site site,
                                                const std::string& sentence_id = {});

std::vector<Scored<HeadRef>> head_importance(const Lens& lens, const ForwardTrace& trace, int answer);
std::vector<Scored<LayerRef>> layer_importance(const Lens& lens, const ForwardTrace& trace, int answer);

// ---------------------------------------------------------------------------
// Query neurons

enum class ComponentKind : std::uint8_t { Embedding, AttnNeuron, AttnBias, FfnNeuron, FfnBias };

/// One additive piece of a residual stream: the embedding, a neuron, or a
/// sublayer's constant bias.
struct ComponentRef {
    ComponentKind kind = ComponentKind::Embedding;
    int layer = -1;
    int head = 0;
    int index = 0;

    std::optional<NeuronRef> neuron() const;
    std::optional<LayerRef> layer_ref() const;

    friend auto operator<=>(const ComponentRef&, const ComponentRef&) = default;
    friend bool operator==(const ComponentRef&, const ComponentRef&) = default;
};
std::string to_string(const ComponentRef& c);

struct QueryScore {
    ComponentRef component;
    int position = 0;
    double score = 0.0;
};

struct QueryOptions {
    /// Off: raw inner products with the subkey, summing to subkey . input.
    /// On: the subkey is routed through the sublayer's normaliser (gain,
    /// centring, the position's recorded 1/scale), so scores sum to the actual
    /// pre-activation minus the normaliser-bias and subkey-bias terms.
    bool fold_norm = false;
};

/// The vector whose inner product with a candidate gives that candidate's score.
DenseVector ffn_query_key(const Model& model, const ForwardTrace& trace, const NeuronRef& value_neuron,
                          const QueryOptions& options = {});
DenseVector attn_query_key(const Model& model, const ForwardTrace& trace, const NeuronRef& value_neuron,
                           int position, const QueryOptions& options = {});

/// Scores every component of the value neuron's input at the last position:
/// the embedding, attention neurons and biases of layers <= l, FFN neurons and
/// biases of layers < l.
std::vector<QueryScore> query_scores_ffn(const Model& model, const ForwardTrace& trace,
                                         const NeuronRef& value_neuron, const QueryOptions& options = {});

/// Scores components of h_p (embedding and all neurons and biases of layers < l)
/// for every source position p, or only the pinned one, weighted by alpha_{T,j,p}.
std::vector<QueryScore> query_scores_attn(const Model& model, const ForwardTrace& trace,
                                          const NeuronRef& value_neuron, const QueryOptions& options = {});

/// Sums position-wise scores per component (optionally of absolute values).
std::vector<Scored<ComponentRef>> aggregate_by_component(std::span<const QueryScore> scores,
                                                         bool absolute = false);
/// Sums neuron and bias scores per (layer, site); the embedding is dropped.
std::vector<Scored<LayerRef>> aggregate_by_layer(std::span<const QueryScore> scores, bool absolute = false);

// ---------------------------------------------------------------------------

inline constexpr int kSegmentSteps = 60;

struct SegmentPoint {
    int index = 0;
    double prob = 0.0;
    double log_prob = 0.0;
};

/// p(w) and log p(w) along h^0 + S (h^L - h^0) / 60 for S = 0..60. The two
/// endpoints use h^0 and h^L themselves.
struct SegmentCurve {
    std::array<SegmentPoint, kSegmentSteps + 1> points{};
};
SegmentCurve segment_curve(const Lens& lens, const ForwardTrace& trace, int answer);

/// Neurons present in more than `threshold` of the per-sentence sets.
struct SharedNeurons {
    std::size_t count = 0;
    std::vector<NeuronRef> refs;
};
SharedNeurons shared_neurons(std::span<const std::vector<NeuronRef>> per_sentence, double threshold = 0.5);

} // namespace neuron_probe
