#include "neuron_probe/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace neuron_probe {

namespace {

struct MethodInfo {
    Method method;
    std::string_view id;
    char letter;
};

constexpr std::array<MethodInfo, 9> kMethods = {{
    {Method::LogProbIncrease, "log_prob_increase", 'a'},
    {Method::LogProb, "log_prob", 'b'},
    {Method::ProbIncrease, "prob_increase", 'c'},
    {Method::Norm, "norm", 'd'},
    {Method::Coefficient, "coefficient", 'e'},
    {Method::InvRank, "inv_rank", 'f'},
    {Method::CoeffNorm, "coeff_norm", 'g'},
    {Method::CoeffInvRank, "coeff_inv_rank", 'h'},
    {Method::QueryInnerProduct, "query_inner_product", 'q'},
}};

const MethodInfo& info(Method m) {
    for (const auto& i : kMethods) {
        if (i.method == m) return i;
    }
    throw std::invalid_argument("unknown method");
}

DenseVector to_double(std::span<const float> v) { return DenseVector(v.begin(), v.end()); }

int last(const ForwardTrace& trace) { return trace.last_position(); }

} // namespace

std::string_view method_id(Method m) { return info(m).id; }
char method_letter(Method m) { return info(m).letter; }

std::optional<Method> parse_method(std::string_view text) {
    for (const auto& i : kMethods) {
        if (text == i.id || (text.size() == 1 && text[0] == i.letter)) return i.method;
    }
    return std::nullopt;
}

std::string to_string(const AttributionTarget& target) {
    return std::visit([](const auto& t) { return neuron_probe::to_string(t); }, target);
}

DenseVector attn_neuron_coefficients(const ForwardTrace& trace, int layer, int query_pos) {
    const int H = trace.n_head(), dh = trace.head_dim();
    DenseVector c(static_cast<std::size_t>(H * dh), 0.0);
    for (int j = 0; j < H; ++j) {
        const auto alpha = trace.attention_row(layer, j, query_pos);
        for (int p = 0; p <= query_pos; ++p) {
            axpy(alpha[p], trace.head_value(layer, j, p),
                 std::span(c).subspan(static_cast<std::size_t>(j * dh), static_cast<std::size_t>(dh)));
        }
    }
    return c;
}

NeuronContribution neuron_contribution(const Model& model, const ForwardTrace& trace, const NeuronRef& ref) {
    validate(ref, model.spec);
    const int T = last(trace);
    NeuronContribution out;
    if (ref.site == Site::Ffn) {
        out.coefficient = trace.ffn_coefficients(ref.layer, T)[static_cast<std::size_t>(ref.index)];
        out.subvalue = ffn_subvalue(model, ref.layer, ref.index);
    } else {
        const auto alpha = trace.attention_row(ref.layer, ref.head, T);
        const auto k = static_cast<std::size_t>(ref.index);
        if (ref.position) {
            const int p = *ref.position;
            if (p > T) throw std::out_of_range("attention neuron position beyond the last token");
            out.coefficient = alpha[p] * trace.head_value(ref.layer, ref.head, p)[k];
        } else {
            for (int p = 0; p <= T; ++p) out.coefficient += alpha[p] * trace.head_value(ref.layer, ref.head, p)[k];
        }
        out.subvalue = attn_subvalue(model, ref.layer, ref.head, ref.index);
    }
    out.vector = scaled(out.subvalue, out.coefficient);
    return out;
}

DenseVector target_vector(const Model& model, const ForwardTrace& trace, const AttributionTarget& target) {
    const int T = last(trace);
    if (const auto* n = std::get_if<NeuronRef>(&target)) return neuron_contribution(model, trace, *n).vector;
    if (const auto* h = std::get_if<HeadRef>(&target)) {
        validate(*h, model.spec);
        const auto v = trace.head_output(h->layer, h->head, T);
        return DenseVector(v.begin(), v.end());
    }
    const auto& l = std::get<LayerRef>(target);
    const auto v = l.site == Site::Attn ? trace.attn_output(l.layer, T) : trace.ffn_output(l.layer, T);
    return DenseVector(v.begin(), v.end());
}

DenseVector target_baseline(const ForwardTrace& trace, const AttributionTarget& target) {
    const int T = last(trace);
    int layer = 0;
    Site site = Site::Attn;
    if (const auto* n = std::get_if<NeuronRef>(&target)) {
        layer = n->layer;
        site = n->site;
    } else if (const auto* h = std::get_if<HeadRef>(&target)) {
        layer = h->layer;
    } else {
        layer = std::get<LayerRef>(target).layer;
        site = std::get<LayerRef>(target).site;
    }
    const auto b = site == Site::Attn ? trace.residual(layer, T) : trace.ffn_input(layer, T);
    return DenseVector(b.begin(), b.end());
}

double log_prob_increase(const Lens& lens, std::span<const double> baseline, std::span<const double> v,
                         int answer) {
    if (baseline.size() != v.size()) throw std::invalid_argument("log_prob_increase: width mismatch");
    const DenseVector x = add(baseline, v);
    return lens.log_prob(x, answer) - lens.log_prob(baseline, answer);
}

double value_importance(const Lens& lens, const ForwardTrace& trace, const AttributionTarget& target,
                        int answer) {
    const DenseVector v = target_vector(lens.model(), trace, target);
    const DenseVector base = target_baseline(trace, target);
    return log_prob_increase(lens, base, v, answer);
}

namespace {

/// Scores of one neuron under every value method.
struct NeuronScores {
    std::array<double, 8> by_method{};
};

/// Per-layer, per-site context shared by all neurons scored against one baseline.
struct SiteContext {
    const Lens* lens;
    int answer;
    DenseVector base;
    DenseVector lin_base;
    double log_p_base;
    double p_base;

    SiteContext(const Lens& l, int w, std::span<const double> b)
        : lens(&l), answer(w), base(b.begin(), b.end()), lin_base(l.linear_part(b)) {
        const auto bs = l.finish(lin_base, base).scores;
        log_p_base = log_softmax_at(bs, static_cast<std::size_t>(w));
        p_base = std::exp(log_p_base);
    }
};

bool needs_projection(Method m) {
    return m == Method::LogProbIncrease || m == Method::LogProb || m == Method::ProbIncrease ||
           m == Method::InvRank || m == Method::CoeffInvRank;
}

/// Fills the requested methods of `out` for a neuron with coefficient m and subvalue v.
void score_neuron(const SiteContext& ctx, double m, std::span<const double> v, std::span<const double> lin_v,
                  std::span<const Method> methods, NeuronScores& out) {
    const auto w = static_cast<std::size_t>(ctx.answer);
    bool projected = false;
    for (Method method : methods) projected = projected || needs_projection(method);

    double log_p_x = 0.0, log_p_mv = 0.0;
    double inv_rank = 0.0;
    if (projected) {
        DenseVector lin(lin_v.size());
        for (std::size_t t = 0; t < lin.size(); ++t) lin[t] = ctx.lin_base[t] + m * lin_v[t];
        DenseVector x = ctx.base;
        axpy(m, v, x);
        log_p_x = log_softmax_at(ctx.lens->finish(lin, x).scores, w);

        for (std::size_t t = 0; t < lin.size(); ++t) lin[t] = m * lin_v[t];
        const DenseVector mv = scaled(v, m);
        log_p_mv = log_softmax_at(ctx.lens->finish(lin, mv).scores, w);

        const auto bs_v = ctx.lens->finish(lin_v, v).scores;
        inv_rank = 1.0 / static_cast<double>(descending_rank(bs_v, w));
    }
    const double norm_v = norm_l2(v);
    for (Method method : methods) {
        double s = 0.0;
        switch (method) {
        case Method::LogProbIncrease: s = log_p_x - ctx.log_p_base; break;
        case Method::LogProb: s = log_p_mv; break;
        case Method::ProbIncrease: s = std::exp(log_p_x) - ctx.p_base; break;
        case Method::Norm: s = norm_v; break;
        case Method::Coefficient: s = std::abs(m); break;
        case Method::InvRank: s = inv_rank; break;
        case Method::CoeffNorm: s = std::abs(m) * norm_v; break;
        case Method::CoeffInvRank: s = std::abs(m) * inv_rank; break;
        case Method::QueryInnerProduct: throw std::invalid_argument("query_inner_product is not a value method");
        }
        out.by_method[static_cast<std::size_t>(method)] = s;
    }
}

/// Calls fn(ref, coefficient, subvalue, row) for every neuron of `site` at the
/// last position, layer by layer, where row indexes Lens::subvalue_linear;
/// `layer_start` runs before each layer's neurons.
template <typename LayerFn, typename NeuronFn>
void for_each_neuron(const Model& model, const ForwardTrace& trace, Site site, LayerFn&& layer_start,
                     NeuronFn&& fn) {
    const int T = last(trace);
    for (int l = 0; l < model.spec.n_layer; ++l) {
        layer_start(l);
        if (site == Site::Ffn) {
            const auto m = trace.ffn_coefficients(l, T);
            for (int k = 0; k < model.spec.d_ffn; ++k) {
                fn(NeuronRef::ffn(l, k), m[k], ffn_subvalue(model, l, k), static_cast<std::size_t>(k));
            }
        } else {
            const auto c = attn_neuron_coefficients(trace, l, T);
            const int dh = model.spec.head_dim();
            for (int j = 0; j < model.spec.n_head; ++j) {
                for (int k = 0; k < dh; ++k) {
                    const auto row = static_cast<std::size_t>(j * dh + k);
                    fn(NeuronRef::attn(l, j, k), c[row], attn_subvalue(model, l, j, k), row);
                }
            }
        }
    }
}

std::vector<std::pair<NeuronRef, NeuronScores>> score_site(const Lens& lens, const ForwardTrace& trace,
                                                           int answer, Site site,
                                                           std::span<const Method> methods) {
    const Model& model = lens.model();
    if (answer < 0 || answer >= model.spec.n_vocab) throw std::out_of_range("answer token outside vocabulary");
    const int T = last(trace);
    std::vector<std::pair<NeuronRef, NeuronScores>> out;
    bool projected = false;
    for (Method method : methods) projected = projected || needs_projection(method);
    std::optional<SiteContext> ctx;
    const DenseMatrix* lin = nullptr;
    for_each_neuron(
        model, trace, site,
        [&](int l) {
            ctx.emplace(lens, answer, site == Site::Attn ? trace.residual(l, T) : trace.ffn_input(l, T));
            if (projected) lin = &lens.subvalue_linear(site, l);
        },
        [&](const NeuronRef& ref, double m, const DenseVector& v, std::size_t row) {
            NeuronScores s;
            score_neuron(*ctx, m, v, projected ? lin->row(row) : std::span<const double>{}, methods, s);
            out.emplace_back(ref, s);
        });
    return out;
}

} // namespace

std::vector<Scored<NeuronRef>> score_neurons(const Lens& lens, const ForwardTrace& trace, int answer, Site site,
                                             Method method) {
    const std::array<Method, 1> methods{method};
    std::vector<Scored<NeuronRef>> out;
    for (const auto& [ref, s] : score_site(lens, trace, answer, site, methods)) {
        out.push_back({ref, s.by_method[static_cast<std::size_t>(method)]});
    }
    return out;
}

std::vector<ImportanceRecord> score_all_methods(const Lens& lens, const ForwardTrace& trace, int answer,
                                                Site site, const std::string& sentence_id) {
    std::vector<ImportanceRecord> out;
    for (const auto& [ref, s] : score_site(lens, trace, answer, site, kValueMethods)) {
        for (Method m : kValueMethods) {
            out.push_back({ref, m, s.by_method[static_cast<std::size_t>(m)], answer, sentence_id});
        }
    }
    return out;
}

std::vector<Scored<HeadRef>> head_importance(const Lens& lens, const ForwardTrace& trace, int answer) {
    std::vector<Scored<HeadRef>> out;
    for (int l = 0; l < trace.num_layers(); ++l) {
        for (int j = 0; j < trace.n_head(); ++j) {
            const HeadRef h{l, j};
            out.push_back({h, value_importance(lens, trace, h, answer)});
        }
    }
    return out;
}

std::vector<Scored<LayerRef>> layer_importance(const Lens& lens, const ForwardTrace& trace, int answer) {
    std::vector<Scored<LayerRef>> out;
    for (int l = 0; l < trace.num_layers(); ++l) {
        for (Site s : {Site::Attn, Site::Ffn}) {
            const LayerRef ref{l, s};
            out.push_back({ref, value_importance(lens, trace, ref, answer)});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

std::optional<NeuronRef> ComponentRef::neuron() const {
    if (kind == ComponentKind::FfnNeuron) return NeuronRef::ffn(layer, index);
    if (kind == ComponentKind::AttnNeuron) return NeuronRef::attn(layer, head, index);
    return std::nullopt;
}

std::optional<LayerRef> ComponentRef::layer_ref() const {
    switch (kind) {
    case ComponentKind::Embedding: return std::nullopt;
    case ComponentKind::AttnNeuron:
    case ComponentKind::AttnBias: return LayerRef{layer, Site::Attn};
    case ComponentKind::FfnNeuron:
    case ComponentKind::FfnBias: return LayerRef{layer, Site::Ffn};
    }
    return std::nullopt;
}

std::string to_string(const ComponentRef& c) {
    switch (c.kind) {
    case ComponentKind::Embedding: return "emb";
    case ComponentKind::AttnNeuron: return to_string(NeuronRef::attn(c.layer, c.head, c.index));
    case ComponentKind::AttnBias: return "a" + std::to_string(c.layer) + ".bias";
    case ComponentKind::FfnNeuron: return to_string(NeuronRef::ffn(c.layer, c.index));
    case ComponentKind::FfnBias: return "f" + std::to_string(c.layer) + ".bias";
    }
    return "?";
}

namespace {

/// r * (u - mean(u)) with u = row * gain (mean dropped for RMSNorm).
DenseVector fold_through_norm(const ModelSpec& spec, std::span<const float> row, std::span<const float> gain,
                              NormStats stats) {
    DenseVector u(row.size());
    for (std::size_t t = 0; t < u.size(); ++t) u[t] = static_cast<double>(row[t]) * gain[t];
    if (spec.norm == NormKind::LayerNorm) {
        double mean = 0.0;
        for (double x : u) mean += x;
        mean /= static_cast<double>(u.size());
        for (double& x : u) x -= mean;
    }
    for (double& x : u) x *= stats.inv_scale;
    return u;
}

/// Appends weight * (key . c) for every component c of h_pos^{layer} plus, when
/// `with_attn_of_layer`, that layer's own attention components.
void append_components(const Model& model, const ForwardTrace& trace, std::span<const double> key, int pos,
                       int layer, bool with_attn_of_layer, double weight, std::vector<QueryScore>& out) {
    const auto d = static_cast<std::size_t>(model.spec.d_model);
    out.push_back({{ComponentKind::Embedding, -1, 0, 0}, pos, weight * dot(key, trace.embedding(pos))});
    const int attn_layers = with_attn_of_layer ? layer + 1 : layer;
    const int dh = model.spec.head_dim();
    DenseVector proj;
    for (int l = 0; l < attn_layers; ++l) {
        const auto& lw = model.weights.layers[static_cast<std::size_t>(l)];
        // key . (column c of wo) for every c
        proj.assign(d, 0.0);
        for (std::size_t t = 0; t < d; ++t) axpy(key[t], lw.wo.row(t), std::span(proj));
        const auto c = attn_neuron_coefficients(trace, l, pos);
        for (int j = 0; j < model.spec.n_head; ++j) {
            for (int k = 0; k < dh; ++k) {
                const auto col = static_cast<std::size_t>(j * dh + k);
                out.push_back({{ComponentKind::AttnNeuron, l, j, k}, pos, weight * c[col] * proj[col]});
            }
        }
        if (!lw.bo.empty()) {
            out.push_back({{ComponentKind::AttnBias, l, 0, 0}, pos, weight * dot(lw.bo.values(), key)});
        }
        if (l >= layer) continue;
        // key . (column k of fc2) for every k
        proj.assign(static_cast<std::size_t>(model.spec.d_ffn), 0.0);
        for (std::size_t t = 0; t < d; ++t) axpy(key[t], lw.fc2.row(t), std::span(proj));
        const auto m = trace.ffn_coefficients(l, pos);
        for (int k = 0; k < model.spec.d_ffn; ++k) {
            out.push_back({{ComponentKind::FfnNeuron, l, 0, k}, pos, weight * m[k] * proj[static_cast<std::size_t>(k)]});
        }
        if (!lw.b2.empty()) {
            out.push_back({{ComponentKind::FfnBias, l, 0, 0}, pos, weight * dot(lw.b2.values(), key)});
        }
    }
}

} // namespace

DenseVector ffn_query_key(const Model& model, const ForwardTrace& trace, const NeuronRef& value_neuron,
                          const QueryOptions& options) {
    validate(value_neuron, model.spec);
    if (value_neuron.site != Site::Ffn) throw std::invalid_argument("ffn_query_key: not an FFN neuron");
    const auto& lw = model.weights.layers[static_cast<std::size_t>(value_neuron.layer)];
    const auto row = lw.fc1.row(static_cast<std::size_t>(value_neuron.index));
    if (!options.fold_norm) return to_double(row);
    return fold_through_norm(model.spec, row, lw.ffn_norm_weight.values(),
                             trace.ffn_norm_stats(value_neuron.layer, last(trace)));
}

DenseVector attn_query_key(const Model& model, const ForwardTrace& trace, const NeuronRef& value_neuron,
                           int position, const QueryOptions& options) {
    validate(value_neuron, model.spec);
    if (value_neuron.site != Site::Attn) throw std::invalid_argument("attn_query_key: not an attention neuron");
    const auto& lw = model.weights.layers[static_cast<std::size_t>(value_neuron.layer)];
    const auto row =
        lw.wv.row(static_cast<std::size_t>(value_neuron.head * model.spec.head_dim() + value_neuron.index));
    if (!options.fold_norm) return to_double(row);
    return fold_through_norm(model.spec, row, lw.attn_norm_weight.values(),
                             trace.attn_norm_stats(value_neuron.layer, position));
}

std::vector<QueryScore> query_scores_ffn(const Model& model, const ForwardTrace& trace,
                                         const NeuronRef& value_neuron, const QueryOptions& options) {
    const DenseVector key = ffn_query_key(model, trace, value_neuron, options);
    std::vector<QueryScore> out;
    append_components(model, trace, key, last(trace), value_neuron.layer, true, 1.0, out);
    return out;
}

std::vector<QueryScore> query_scores_attn(const Model& model, const ForwardTrace& trace,
                                          const NeuronRef& value_neuron, const QueryOptions& options) {
    validate(value_neuron, model.spec);
    if (value_neuron.site != Site::Attn) throw std::invalid_argument("query_scores_attn: not an attention neuron");
    const int T = last(trace);
    int first = 0, end = T + 1;
    if (value_neuron.position) {
        if (*value_neuron.position > T) throw std::out_of_range("attention neuron position beyond the last token");
        first = *value_neuron.position;
        end = first + 1;
    }
    const auto alpha = trace.attention_row(value_neuron.layer, value_neuron.head, T);
    std::vector<QueryScore> out;
    for (int p = first; p < end; ++p) {
        const DenseVector key = attn_query_key(model, trace, value_neuron, p, options);
        append_components(model, trace, key, p, value_neuron.layer, false, alpha[p], out);
    }
    return out;
}

std::vector<Scored<ComponentRef>> aggregate_by_component(std::span<const QueryScore> scores, bool absolute) {
    std::map<ComponentRef, double> sums;
    for (const auto& s : scores) sums[s.component] += absolute ? std::abs(s.score) : s.score;
    std::vector<Scored<ComponentRef>> out;
    out.reserve(sums.size());
    for (const auto& [c, v] : sums) out.push_back({c, v});
    return out;
}

std::vector<Scored<LayerRef>> aggregate_by_layer(std::span<const QueryScore> scores, bool absolute) {
    std::map<LayerRef, double> sums;
    for (const auto& s : scores) {
        if (auto l = s.component.layer_ref()) sums[*l] += absolute ? std::abs(s.score) : s.score;
    }
    std::vector<Scored<LayerRef>> out;
    for (const auto& [l, v] : sums) out.push_back({l, v});
    return out;
}

// ---------------------------------------------------------------------------

SegmentCurve segment_curve(const Lens& lens, const ForwardTrace& trace, int answer) {
    const auto h0 = trace.embedding(last(trace));
    const auto hL = trace.final_residual();
    const DenseVector delta = subtract(hL, h0);
    SegmentCurve curve;
    for (int s = 0; s <= kSegmentSteps; ++s) {
        DenseVector x;
        if (s == 0) {
            x.assign(h0.begin(), h0.end());
        } else if (s == kSegmentSteps) {
            x.assign(hL.begin(), hL.end());
        } else {
            x.assign(h0.begin(), h0.end());
            axpy(static_cast<double>(s) / kSegmentSteps, delta, x);
        }
        auto& pt = curve.points[static_cast<std::size_t>(s)];
        pt.index = s;
        pt.prob = lens.prob(x, answer);
        pt.log_prob = lens.log_prob(x, answer);
    }
    return curve;
}

SharedNeurons shared_neurons(std::span<const std::vector<NeuronRef>> per_sentence, double threshold) {
    if (per_sentence.empty()) throw std::invalid_argument("shared_neurons: no sentences");
    std::map<NeuronRef, std::size_t> counts;
    for (const auto& set : per_sentence) {
        std::vector<NeuronRef> unique(set.begin(), set.end());
        std::sort(unique.begin(), unique.end());
        unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
        for (const auto& r : unique) ++counts[r];
    }
    SharedNeurons out;
    const double n = static_cast<double>(per_sentence.size());
    for (const auto& [ref, c] : counts) {
        if (static_cast<double>(c) > threshold * n) out.refs.push_back(ref);
    }
    out.count = out.refs.size();
    return out;
}

} // namespace neuron_probe
