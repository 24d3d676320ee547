#include "neuron_probe/forward.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace neuron_probe {

ForwardTrace::ForwardTrace(const ModelSpec& spec, std::vector<int> tokens)
    : n_layer_(spec.n_layer),
      n_pos_(static_cast<int>(tokens.size())),
      d_(spec.d_model),
      n_head_(spec.n_head),
      d_head_(spec.head_dim()),
      d_ffn_(spec.d_ffn),
      tokens_(std::move(tokens)) {
    const auto L = static_cast<std::size_t>(n_layer_);
    const auto T = static_cast<std::size_t>(n_pos_);
    const auto d = static_cast<std::size_t>(d_);
    const auto H = static_cast<std::size_t>(n_head_);
    residual_.assign((L + 1) * T * d, 0.0);
    attn_out_.assign(L * T * d, 0.0);
    ffn_in_.assign(L * T * d, 0.0);
    ffn_out_.assign(L * T * d, 0.0);
    ffn_coeff_.assign(L * T * static_cast<std::size_t>(d_ffn_), 0.0);
    attn_weight_.assign(L * H * T * T, 0.0);
    head_value_.assign(L * H * T * static_cast<std::size_t>(d_head_), 0.0);
    value_out_.assign(L * H * T * d, 0.0);
    head_out_.assign(L * H * T * d, 0.0);
    attn_norm_.assign(L * T, {});
    ffn_norm_.assign(L * T, {});
}

void ForwardTrace::check(int layer, int pos, int layer_limit) const {
    if (layer < 0 || layer >= layer_limit || pos < 0 || pos >= n_pos_) {
        throw std::out_of_range("trace index (layer " + std::to_string(layer) + ", position " +
                                std::to_string(pos) + ") out of range");
    }
}

void ForwardTrace::check_head(int layer, int head, int pos) const {
    check(layer, pos, n_layer_);
    if (head < 0 || head >= n_head_) {
        throw std::out_of_range("trace head " + std::to_string(head) + " out of range");
    }
}

namespace {
template <typename V>
auto slice(V& v, std::size_t index, std::size_t width) {
    return std::span(v.data() + index * width, width);
}
} // namespace

#define NP_LT(l, i) (static_cast<std::size_t>(l) * n_pos_ + static_cast<std::size_t>(i))
#define NP_LHT(l, j, i) \
    ((static_cast<std::size_t>(l) * n_head_ + static_cast<std::size_t>(j)) * n_pos_ + static_cast<std::size_t>(i))

std::span<const double> ForwardTrace::residual(int layer, int pos) const {
    check(layer, pos, n_layer_ + 1);
    return slice(residual_, NP_LT(layer, pos), d_);
}
std::span<const double> ForwardTrace::attn_output(int layer, int pos) const {
    check(layer, pos, n_layer_);
    return slice(attn_out_, NP_LT(layer, pos), d_);
}
std::span<const double> ForwardTrace::ffn_input(int layer, int pos) const {
    check(layer, pos, n_layer_);
    return slice(ffn_in_, NP_LT(layer, pos), d_);
}
std::span<const double> ForwardTrace::ffn_output(int layer, int pos) const {
    check(layer, pos, n_layer_);
    return slice(ffn_out_, NP_LT(layer, pos), d_);
}
std::span<const double> ForwardTrace::ffn_coefficients(int layer, int pos) const {
    check(layer, pos, n_layer_);
    return slice(ffn_coeff_, NP_LT(layer, pos), d_ffn_);
}
std::span<const double> ForwardTrace::attention_row(int layer, int head, int query_pos) const {
    check_head(layer, head, query_pos);
    return slice(attn_weight_, NP_LHT(layer, head, query_pos), n_pos_);
}
double ForwardTrace::attention_weight(int layer, int head, int query_pos, int key_pos) const {
    check(layer, key_pos, n_layer_);
    return attention_row(layer, head, query_pos)[static_cast<std::size_t>(key_pos)];
}
std::span<const double> ForwardTrace::head_value(int layer, int head, int pos) const {
    check_head(layer, head, pos);
    return slice(head_value_, NP_LHT(layer, head, pos), d_head_);
}
std::span<const double> ForwardTrace::value_output(int layer, int head, int pos) const {
    check_head(layer, head, pos);
    return slice(value_out_, NP_LHT(layer, head, pos), d_);
}
std::span<const double> ForwardTrace::head_output(int layer, int head, int pos) const {
    check_head(layer, head, pos);
    return slice(head_out_, NP_LHT(layer, head, pos), d_);
}
NormStats ForwardTrace::attn_norm_stats(int layer, int pos) const {
    check(layer, pos, n_layer_);
    return attn_norm_[NP_LT(layer, pos)];
}
NormStats ForwardTrace::ffn_norm_stats(int layer, int pos) const {
    check(layer, pos, n_layer_);
    return ffn_norm_[NP_LT(layer, pos)];
}

std::span<double> ForwardTrace::residual_mut(int layer, int pos) {
    return slice(residual_, NP_LT(layer, pos), d_);
}
std::span<double> ForwardTrace::attn_output_mut(int layer, int pos) {
    return slice(attn_out_, NP_LT(layer, pos), d_);
}
std::span<double> ForwardTrace::ffn_input_mut(int layer, int pos) {
    return slice(ffn_in_, NP_LT(layer, pos), d_);
}
std::span<double> ForwardTrace::ffn_output_mut(int layer, int pos) {
    return slice(ffn_out_, NP_LT(layer, pos), d_);
}
std::span<double> ForwardTrace::ffn_coefficients_mut(int layer, int pos) {
    return slice(ffn_coeff_, NP_LT(layer, pos), d_ffn_);
}
std::span<double> ForwardTrace::attention_row_mut(int layer, int head, int query_pos) {
    return slice(attn_weight_, NP_LHT(layer, head, query_pos), n_pos_);
}
std::span<double> ForwardTrace::head_value_mut(int layer, int head, int pos) {
    return slice(head_value_, NP_LHT(layer, head, pos), d_head_);
}
std::span<double> ForwardTrace::value_output_mut(int layer, int head, int pos) {
    return slice(value_out_, NP_LHT(layer, head, pos), d_);
}
std::span<double> ForwardTrace::head_output_mut(int layer, int head, int pos) {
    return slice(head_out_, NP_LHT(layer, head, pos), d_);
}
NormStats& ForwardTrace::attn_norm_stats_mut(int layer, int pos) { return attn_norm_[NP_LT(layer, pos)]; }
NormStats& ForwardTrace::ffn_norm_stats_mut(int layer, int pos) { return ffn_norm_[NP_LT(layer, pos)]; }

#undef NP_LT
#undef NP_LHT

double gelu(double x) {
    // tanh approximation, as in GPT-2
    constexpr double k = 0.7978845608028654; // sqrt(2/pi)
    return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

NormStats norm_stats(const ModelSpec& spec, std::span<const double> x) {
    const auto n = static_cast<double>(x.size());
    if (spec.norm == NormKind::LayerNorm) {
        double mean = 0.0;
        for (double v : x) mean += v;
        mean /= n;
        double var = 0.0;
        for (double v : x) var += (v - mean) * (v - mean);
        var /= n;
        return {mean, 1.0 / std::sqrt(var + spec.norm_eps)};
    }
    double ms = 0.0;
    for (double v : x) ms += v * v;
    return {0.0, 1.0 / std::sqrt(ms / n + spec.norm_eps)};
}

DenseVector normalize(const ModelSpec& spec, std::span<const float> weight,
                      std::span<const float> bias, std::span<const double> x, NormStats* stats) {
    const NormStats s = norm_stats(spec, x);
    DenseVector y(x.size());
    for (std::size_t t = 0; t < x.size(); ++t) {
        y[t] = (x[t] - s.mean) * s.inv_scale * weight[t];
        if (!bias.empty()) y[t] += bias[t];
    }
    if (stats) *stats = s;
    return y;
}

namespace {

/// y = W x (+ b) for a row-major [rows, cols] weight.
DenseVector matvec(const Tensor& w, std::span<const double> x, const Tensor& b) {
    const auto rows = w.shape()[0];
    DenseVector y(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        y[r] = dot(w.row(r), x);
        if (!b.empty()) y[r] += b.values()[r];
    }
    return y;
}

void apply_rotary(std::span<double> x, int pos, double theta) {
    const std::size_t half = x.size() / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(x.size()));
        const double angle = pos * freq;
        const double c = std::cos(angle), s = std::sin(angle);
        const double x1 = x[i], x2 = x[i + half];
        x[i] = x1 * c - x2 * s;
        x[i + half] = x2 * c + x1 * s;
    }
}

} // namespace

DenseVector output_logits(const Model& model, std::span<const double> h) {
    const auto& w = model.weights;
    if (model.spec.final_norm_on_projection) {
        const auto x = normalize(model.spec, w.final_norm_weight.values(), w.final_norm_bias.values(), h);
        return matvec(w.unembedding, x, Tensor{});
    }
    return matvec(w.unembedding, h, Tensor{});
}

ForwardTrace forward(const Model& model, std::span<const int> tokens) {
    const auto& spec = model.spec;
    const auto& w = model.weights;
    const int T = static_cast<int>(tokens.size());
    if (T < 1) throw InputError("forward: empty token sequence");
    int limit = context_limit();
    if (spec.positions == PositionKind::Learned) limit = std::min(limit, spec.n_ctx);
    if (T > limit) {
        throw InputError("forward: sequence of " + std::to_string(T) +
                         " tokens exceeds context limit " + std::to_string(limit));
    }
    for (int t : tokens) {
        if (t < 0 || t >= spec.n_vocab) {
            throw InputError("forward: token id " + std::to_string(t) + " outside vocabulary of " +
                             std::to_string(spec.n_vocab));
        }
    }

    ForwardTrace trace(spec, std::vector<int>(tokens.begin(), tokens.end()));
    const int d = spec.d_model, H = spec.n_head, dh = spec.head_dim(), N = spec.d_ffn;
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    for (int i = 0; i < T; ++i) {
        auto h0 = trace.residual_mut(0, i);
        const auto tok = w.token_embedding.row(static_cast<std::size_t>(tokens[i]));
        for (int t = 0; t < d; ++t) h0[t] = tok[t];
        if (spec.positions == PositionKind::Learned) {
            const auto pe = w.position_embedding.row(static_cast<std::size_t>(i));
            for (int t = 0; t < d; ++t) h0[t] += pe[t];
        }
    }

    std::vector<DenseVector> q(T), k(T), v(T);
    for (int l = 0; l < spec.n_layer; ++l) {
        const auto& lw = w.layers[static_cast<std::size_t>(l)];
        for (int i = 0; i < T; ++i) {
            NormStats stats;
            const auto x = normalize(spec, lw.attn_norm_weight.values(), lw.attn_norm_bias.values(),
                                     trace.residual(l, i), &stats);
            trace.attn_norm_stats_mut(l, i) = stats;
            q[i] = matvec(lw.wq, x, lw.bq);
            k[i] = matvec(lw.wk, x, lw.bk);
            v[i] = matvec(lw.wv, x, lw.bv);
            if (spec.positions == PositionKind::Rotary) {
                for (int j = 0; j < H; ++j) {
                    apply_rotary(std::span(q[i]).subspan(j * dh, dh), i, spec.rope_theta);
                    apply_rotary(std::span(k[i]).subspan(j * dh, dh), i, spec.rope_theta);
                }
            }
        }

        for (int j = 0; j < H; ++j) {
            const auto off = static_cast<std::size_t>(j * dh);
            for (int p = 0; p < T; ++p) {
                auto hv = trace.head_value_mut(l, j, p);
                for (int c = 0; c < dh; ++c) hv[c] = v[p][off + c];
                auto vo = trace.value_output_mut(l, j, p);
                for (int t = 0; t < d; ++t) {
                    const auto row = lw.wo.row(static_cast<std::size_t>(t)).subspan(off, dh);
                    vo[t] = dot(row, std::span<const double>(hv));
                }
            }
            for (int i = 0; i < T; ++i) {
                DenseVector scores(static_cast<std::size_t>(i + 1));
                const std::span<const double> qi(q[i].data() + off, dh);
                for (int p = 0; p <= i; ++p) {
                    scores[p] = dot(qi, std::span<const double>(k[p].data() + off, dh)) * attn_scale;
                }
                const auto alpha = softmax_stable(scores);
                auto row = trace.attention_row_mut(l, j, i);
                auto out = trace.head_output_mut(l, j, i);
                for (int p = 0; p <= i; ++p) {
                    row[p] = alpha[p];
                    axpy(alpha[p], trace.value_output(l, j, p), out);
                }
            }
        }

        for (int i = 0; i < T; ++i) {
            auto a = trace.attn_output_mut(l, i);
            for (int j = 0; j < H; ++j) axpy(1.0, trace.head_output(l, j, i), a);
            if (!lw.bo.empty()) axpy(1.0, lw.bo.values(), a);

            auto fin = trace.ffn_input_mut(l, i);
            const auto h = trace.residual(l, i);
            for (int t = 0; t < d; ++t) fin[t] = h[t] + a[t];

            NormStats stats;
            const auto x = normalize(spec, lw.ffn_norm_weight.values(), lw.ffn_norm_bias.values(),
                                     trace.ffn_input(l, i), &stats);
            trace.ffn_norm_stats_mut(l, i) = stats;
            auto m = trace.ffn_coefficients_mut(l, i);
            for (int n = 0; n < N; ++n) {
                double pre = dot(lw.fc1.row(static_cast<std::size_t>(n)), x);
                if (!lw.b1.empty()) pre += lw.b1.values()[n];
                if (spec.activation == Activation::Gelu) {
                    m[n] = gelu(pre);
                } else {
                    m[n] = silu(pre) * dot(lw.up.row(static_cast<std::size_t>(n)), x);
                }
            }

            auto f = trace.ffn_output_mut(l, i);
            for (int t = 0; t < d; ++t) {
                f[t] = dot(lw.fc2.row(static_cast<std::size_t>(t)), std::span<const double>(m.data(), m.size()));
                if (!lw.b2.empty()) f[t] += lw.b2.values()[t];
            }

            auto out = trace.residual_mut(l + 1, i);
            for (int t = 0; t < d; ++t) out[t] = fin[t] + f[t];
        }
        require_finite(trace.residual(l + 1, T - 1), "forward");
    }

    trace.logits_mut() = output_logits(model, trace.final_residual());
    return trace;
}

DenseVector ffn_subvalue(const Model& model, int layer, int index) {
    validate(NeuronRef::ffn(layer, index), model.spec);
    const auto& fc2 = model.weights.layers[static_cast<std::size_t>(layer)].fc2;
    DenseVector v(static_cast<std::size_t>(model.spec.d_model));
    for (std::size_t t = 0; t < v.size(); ++t) v[t] = fc2.at(t, static_cast<std::size_t>(index));
    return v;
}

DenseVector attn_subvalue(const Model& model, int layer, int head, int index) {
    validate(NeuronRef::attn(layer, head, index), model.spec);
    const auto& wo = model.weights.layers[static_cast<std::size_t>(layer)].wo;
    const auto col = static_cast<std::size_t>(head * model.spec.head_dim() + index);
    DenseVector v(static_cast<std::size_t>(model.spec.d_model));
    for (std::size_t t = 0; t < v.size(); ++t) v[t] = wo.at(t, col);
    return v;
}

std::vector<NeuronTerm> ffn_neurons(const Model& model, const ForwardTrace& trace, int layer,
                                    int position) {
    const auto m = trace.ffn_coefficients(layer, position);
    std::vector<NeuronTerm> terms;
    terms.reserve(m.size());
    for (int k = 0; k < static_cast<int>(m.size()); ++k) {
        NeuronTerm term{NeuronRef::ffn(layer, k), m[k], ffn_subvalue(model, layer, k), {}};
        term.contribution = scaled(term.subvalue, term.coefficient);
        terms.push_back(std::move(term));
    }
    return terms;
}

std::vector<NeuronTerm> attention_neurons(const Model& model, const ForwardTrace& trace, int layer,
                                          int head, int query_pos, int key_pos) {
    const double alpha = trace.attention_weight(layer, head, query_pos, key_pos);
    const auto value = trace.head_value(layer, head, key_pos);
    std::vector<NeuronTerm> terms;
    terms.reserve(value.size());
    for (int k = 0; k < static_cast<int>(value.size()); ++k) {
        NeuronTerm term{NeuronRef::attn(layer, head, k, key_pos), alpha * value[k],
                        attn_subvalue(model, layer, head, k), {}};
        term.contribution = scaled(term.subvalue, term.coefficient);
        terms.push_back(std::move(term));
    }
    return terms;
}

std::size_t neuron_vector_count(const ModelSpec& spec, int num_positions) {
    const auto L = static_cast<std::size_t>(spec.n_layer);
    const auto T = static_cast<std::size_t>(num_positions);
    const auto H = static_cast<std::size_t>(spec.n_head);
    return L * (T * H * static_cast<std::size_t>(spec.head_dim()) + static_cast<std::size_t>(spec.d_ffn)) + 1;
}

} // namespace neuron_probe
