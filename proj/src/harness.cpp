#include "neuron_probe/harness.hpp"

#include "neuron_probe/forward.hpp"
#include "neuron_probe/lens.hpp"
#include "neuron_probe/parallel.hpp"

#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace neuron_probe {

SentenceEval evaluate_logits(std::span<const double> logits, int answer) {
    if (answer < 0 || static_cast<std::size_t>(answer) >= logits.size()) {
        throw std::out_of_range("answer token outside vocabulary");
    }
    const auto w = static_cast<std::size_t>(answer);
    SentenceEval e;
    e.reciprocal_rank = 1.0 / static_cast<double>(descending_rank(logits, w));
    e.prob = softmax_stable(logits)[w] * 100.0;
    e.log_prob = log_softmax_at(logits, w);
    return e;
}

SentenceEval evaluate_sentence(const Model& model, const KnowledgeRecord& record) {
    const auto trace = forward(model, record.tokens);
    return evaluate_logits(trace.logits(), record.answer);
}

EvalMetrics aggregate(std::span<const SentenceEval> sentences) {
    EvalMetrics m;
    for (const auto& s : sentences) {
        m.mrr += s.reciprocal_rank;
        m.prob += s.prob;
        m.logp += s.log_prob;
    }
    m.count = sentences.size();
    if (m.count > 0) {
        const auto n = static_cast<double>(m.count);
        m.mrr /= n;
        m.prob /= n;
        m.logp /= n;
    }
    return m;
}

EvalMetrics evaluate(const Model& model, const Corpus& corpus) {
    if (corpus.empty()) throw std::invalid_argument("evaluate: empty corpus");
    validate(corpus, model.spec);
    std::vector<SentenceEval> evals(corpus.size());
    parallel_for(corpus.size(), [&](std::size_t i) { evals[i] = evaluate_sentence(model, corpus[i]); });
    return aggregate(evals);
}

EvalMetrics difference(const EvalMetrics& after, const EvalMetrics& before) {
    return {after.mrr - before.mrr, after.prob - before.prob, after.logp - before.logp, after.count};
}

PercentDecrease percent_decrease(const EvalMetrics& before, const EvalMetrics& after) {
    auto pct = [](double b, double a) { return b == 0.0 ? 0.0 : (b - a) / b * 100.0; };
    return {pct(before.mrr, after.mrr), pct(before.prob, after.prob)};
}

std::string Selector::label() const {
    if (method) return std::string(method_id(*method));
    return "random(" + std::to_string(seed) + ")";
}

std::optional<Selector> parse_selector(const std::string& text, std::uint64_t default_seed) {
    if (text == "random") return Selector::random(default_seed);
    if (text.starts_with("random(") && text.ends_with(")")) {
        const std::string digits = text.substr(7, text.size() - 8);
        if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos) return std::nullopt;
        return Selector::random(std::stoull(digits));
    }
    auto m = parse_method(text);
    if (!m || *m == Method::QueryInnerProduct) return std::nullopt;
    return Selector::by(*m);
}

std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, std::uint64_t seed, std::uint64_t stream) {
    k = std::min(k, n);
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    std::mt19937_64 rng(seq);
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    // partial Fisher-Yates: the first k slots end up a uniform k-subset
    for (std::size_t i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(k);
    return pool;
}

namespace {

std::vector<NeuronRef> site_inventory(const ModelSpec& spec, Site site) {
    std::vector<NeuronRef> refs;
    for (int l = 0; l < spec.n_layer; ++l) {
        if (site == Site::Ffn) {
            for (int k = 0; k < spec.d_ffn; ++k) refs.push_back(NeuronRef::ffn(l, k));
        } else {
            for (int j = 0; j < spec.n_head; ++j) {
                for (int k = 0; k < spec.head_dim(); ++k) refs.push_back(NeuronRef::attn(l, j, k));
            }
        }
    }
    return refs;
}

std::vector<NeuronRef> select_with(const Lens& lens, const ForwardTrace& trace, int answer,
                                   const Selector& selector, const SiteBudget& budget,
                                   std::size_t sentence_index) {
    std::vector<NeuronRef> out;
    for (Site site : {Site::Attn, Site::Ffn}) {
        const int k = site == Site::Ffn ? budget.ffn : budget.attn;
        if (k <= 0) continue;
        if (selector.is_random()) {
            const auto inventory = site_inventory(lens.model().spec, site);
            const std::uint64_t stream = sentence_index * 2 + (site == Site::Ffn ? 1 : 0);
            for (auto i : sample_indices(inventory.size(), static_cast<std::size_t>(k), selector.seed, stream)) {
                out.push_back(inventory[i]);
            }
        } else {
            auto scored = score_neurons(lens, trace, answer, site, *selector.method);
            for (const auto& s : top_k(std::move(scored), static_cast<std::size_t>(k))) out.push_back(s.key);
        }
    }
    return out;
}

SentenceEval evaluate_with(const Model& model, const KnowledgeRecord& record, const std::vector<NeuronRef>& refs,
                           const SentenceEval& unchanged) {
    if (refs.empty()) return unchanged;
    InterventionSpec spec;
    for (const auto& r : refs) spec.targets.emplace_back(r);
    const Model changed = apply_intervention(model, spec);
    return evaluate_sentence(changed, record);
}

ExperimentResult finish_result(std::vector<SentenceOutcome> outcomes) {
    ExperimentResult result;
    std::vector<SentenceEval> before, after;
    for (const auto& o : outcomes) {
        before.push_back(o.before);
        after.push_back(o.after);
    }
    result.before = aggregate(before);
    result.after = aggregate(after);
    result.delta = difference(result.after, result.before);
    result.sentences = std::move(outcomes);
    return result;
}

} // namespace

std::vector<NeuronRef> select_neurons(const Model& model, const ForwardTrace& trace, int answer,
                                      const Selector& selector, const SiteBudget& budget,
                                      std::size_t sentence_index, std::optional<bool> final_norm) {
    const Lens lens(model, final_norm);
    return select_with(lens, trace, answer, selector, budget, sentence_index);
}

ExperimentResult run_experiment(const Model& model, const Corpus& corpus, const ExperimentConfig& config) {
    if (corpus.empty()) throw std::invalid_argument("run_experiment: empty corpus");
    if (config.budget.ffn < 0 || config.budget.attn < 0) throw std::invalid_argument("budgets must be >= 0");
    if (config.selector.method == Method::QueryInnerProduct) {
        throw std::invalid_argument("query_inner_product selects query neurons; use the query experiment");
    }
    validate(corpus, model.spec);
    const Lens lens(model, config.final_norm);
    std::vector<SentenceOutcome> outcomes(corpus.size());
    parallel_for(corpus.size(), [&](std::size_t i) {
        const auto& r = corpus[i];
        const auto trace = forward(model, r.tokens);
        auto& o = outcomes[i];
        o.id = r.id;
        o.before = evaluate_logits(trace.logits(), r.answer);
        o.selected = select_with(lens, trace, r.answer, config.selector, config.budget, i);
        o.after = evaluate_with(model, r, o.selected, o.before);
    });
    return finish_result(std::move(outcomes));
}

ExperimentResult run_intervention(const Model& model, const Corpus& corpus, const InterventionSpec& spec) {
    if (corpus.empty()) throw std::invalid_argument("run_intervention: empty corpus");
    validate(spec, model.spec);
    validate(corpus, model.spec);
    const Model changed = apply_intervention(model, spec);
    std::vector<SentenceOutcome> outcomes(corpus.size());
    parallel_for(corpus.size(), [&](std::size_t i) {
        auto& o = outcomes[i];
        o.id = corpus[i].id;
        o.before = evaluate_sentence(model, corpus[i]);
        o.after = spec.is_identity() ? o.before : evaluate_sentence(changed, corpus[i]);
    });
    return finish_result(std::move(outcomes));
}

CrossKnowledgeResult cross_knowledge_heads(const Model& model, const std::map<std::string, Corpus>& by_type,
                                           double head_fraction, std::optional<bool> final_norm) {
    if (by_type.size() < 2) throw std::invalid_argument("cross_knowledge_heads needs at least two knowledge types");
    if (!(head_fraction >= 0.0 && head_fraction <= 1.0)) {
        throw std::invalid_argument("head fraction must lie in [0, 1]");
    }
    const int total = model.spec.n_layer * model.spec.n_head;
    const int n_heads = static_cast<int>(std::floor(head_fraction * total + 1e-9));
    if (head_fraction > 0.0 && n_heads < 1) {
        throw std::invalid_argument("head fraction " + std::to_string(head_fraction) + " of " +
                                    std::to_string(total) + " heads selects no head");
    }

    CrossKnowledgeResult result;
    result.heads_per_type = n_heads;
    for (const auto& [t, c] : by_type) {
        if (c.empty()) throw std::invalid_argument("knowledge type '" + t + "' has no records");
        validate(c, model.spec);
        result.types.push_back(t);
    }
    const std::size_t n_types = result.types.size();
    result.decrease.assign(n_types, std::vector<PercentDecrease>(n_types));
    if (n_heads == 0) return result;

    const Lens lens(model, final_norm);
    std::vector<EvalMetrics> before(n_types);
    for (std::size_t t = 0; t < n_types; ++t) before[t] = evaluate(model, by_type.at(result.types[t]));

    for (std::size_t s = 0; s < n_types; ++s) {
        const auto& corpus = by_type.at(result.types[s]);
        std::vector<std::vector<Scored<HeadRef>>> per_sentence(corpus.size());
        parallel_for(corpus.size(), [&](std::size_t i) {
            const auto trace = forward(model, corpus[i].tokens);
            per_sentence[i] = head_importance(lens, trace, corpus[i].answer);
        });
        std::vector<Scored<HeadRef>> sums = per_sentence.front();
        for (std::size_t i = 1; i < per_sentence.size(); ++i) {
            for (std::size_t h = 0; h < sums.size(); ++h) sums[h].score += per_sentence[i][h].score;
        }
        InterventionSpec spec;
        spec.label = "heads:" + result.types[s];
        auto& heads = result.heads[result.types[s]];
        for (const auto& h : top_k(std::move(sums), static_cast<std::size_t>(n_heads))) {
            heads.push_back(h.key);
            spec.targets.emplace_back(h.key);
        }
        const Model changed = apply_intervention(model, spec);
        for (std::size_t t = 0; t < n_types; ++t) {
            const auto after = evaluate(changed, by_type.at(result.types[t]));
            result.decrease[s][t] = percent_decrease(before[t], after);
        }
    }
    return result;
}

std::vector<NeuronRef> query_inventory(const ModelSpec& spec) {
    std::vector<NeuronRef> refs;
    for (int l = 0; l + 1 < spec.n_layer; ++l) {
        for (int k = 0; k < spec.d_ffn; ++k) refs.push_back(NeuronRef::ffn(l, k));
    }
    return refs;
}

namespace {

std::vector<Scored<NeuronRef>> query_scores_with(const Lens& lens, const ForwardTrace& trace, int answer,
                                                 int attn_value_k, const QueryOptions& options) {
    const Model& model = lens.model();
    const int N = model.spec.d_ffn;
    std::vector<Scored<NeuronRef>> out;
    for (const auto& r : query_inventory(model.spec)) out.push_back({r, 0.0});
    if (attn_value_k <= 0 || out.empty()) return out;
    auto values = top_k(score_neurons(lens, trace, answer, Site::Attn, Method::LogProbIncrease),
                        static_cast<std::size_t>(attn_value_k));
    for (const auto& v : values) {
        for (const auto& q : query_scores_attn(model, trace, v.key, options)) {
            if (q.component.kind != ComponentKind::FfnNeuron) continue;
            out[static_cast<std::size_t>(q.component.layer * N + q.component.index)].score += q.score;
        }
    }
    return out;
}

} // namespace

std::vector<Scored<NeuronRef>> query_neuron_scores(const Model& model, const ForwardTrace& trace, int answer,
                                                   int attn_value_k, const QueryOptions& options,
                                                   std::optional<bool> final_norm) {
    const Lens lens(model, final_norm);
    return query_scores_with(lens, trace, answer, attn_value_k, options);
}

ExperimentResult query_neuron_experiment(const Model& model, const Corpus& corpus,
                                         const QueryExperimentConfig& config) {
    if (corpus.empty()) throw std::invalid_argument("query_neuron_experiment: empty corpus");
    if (config.n_query < 0 || config.attn_value_k < 0) throw std::invalid_argument("budgets must be >= 0");
    validate(corpus, model.spec);
    const auto inventory = query_inventory(model.spec);
    std::vector<std::string> warnings;
    std::size_t n = static_cast<std::size_t>(config.n_query);
    if (n > inventory.size()) {
        warnings.push_back("n_query " + std::to_string(n) + " exceeds the query-neuron inventory of " +
                           std::to_string(inventory.size()) + "; clamped");
        n = inventory.size();
    }
    const Lens lens(model, config.final_norm);
    std::vector<SentenceOutcome> outcomes(corpus.size());
    parallel_for(corpus.size(), [&](std::size_t i) {
        const auto& r = corpus[i];
        const auto trace = forward(model, r.tokens);
        auto& o = outcomes[i];
        o.id = r.id;
        o.before = evaluate_logits(trace.logits(), r.answer);
        if (n > 0) {
            if (config.random_seed) {
                for (auto idx : sample_indices(inventory.size(), n, *config.random_seed, i)) {
                    o.selected.push_back(inventory[idx]);
                }
            } else {
                auto scored = query_scores_with(lens, trace, r.answer, config.attn_value_k, config.options);
                for (const auto& s : top_k(std::move(scored), n)) o.selected.push_back(s.key);
            }
        }
        o.after = evaluate_with(model, r, o.selected, o.before);
    });
    auto result = finish_result(std::move(outcomes));
    result.warnings = std::move(warnings);
    return result;
}

} // namespace neuron_probe
