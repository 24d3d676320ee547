#pragma once

#include "neuron_probe/model.hpp"
#include "neuron_probe/numerics.hpp"

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace neuron_probe {

/// Mean and reciprocal scale of one normalisation call, so later consumers can
/// fold the normaliser's linear part into a subkey. Mean is zero for RMSNorm.
struct NormStats {
    double mean = 0.0;
    double inv_scale = 1.0;
};

/// Everything the attribution engine needs from one forward pass. Layers are
/// 0-based: layer l reads residual(l, i) and writes residual(l + 1, i), so
/// residual(0, i) is the embedding and residual(L, i) the final stream.
class ForwardTrace {
public:
    ForwardTrace(const ModelSpec& spec, std::vector<int> tokens);

    int num_layers() const { return n_layer_; }
    int num_positions() const { return n_pos_; }
    int last_position() const { return n_pos_ - 1; }
    int d_model() const { return d_; }
    int n_head() const { return n_head_; }
    int head_dim() const { return d_head_; }
    int d_ffn() const { return d_ffn_; }
    const std::vector<int>& tokens() const { return tokens_; }

    /// h_i^l for l in [0, L].
    std::span<const double> residual(int layer, int pos) const;
    std::span<const double> embedding(int pos) const { return residual(0, pos); }
    std::span<const double> final_residual() const { return residual(n_layer_, last_position()); }

    std::span<const double> attn_output(int layer, int pos) const;  // A_i^l
    std::span<const double> ffn_input(int layer, int pos) const;    // h_i^{l-1} + A_i^l
    std::span<const double> ffn_output(int layer, int pos) const;   // F_i^l
    std::span<const double> ffn_coefficients(int layer, int pos) const; // m_{i,k}^l
    double attention_weight(int layer, int head, int query_pos, int key_pos) const;
    std::span<const double> attention_row(int layer, int head, int query_pos) const;
    /// W^v h_p (+ value bias) for one head; head_dim long.
    std::span<const double> head_value(int layer, int head, int pos) const;
    /// W^o (W^v h_p), the position's value-output vector; d long.
    std::span<const double> value_output(int layer, int head, int pos) const;
    /// Sum_p alpha_{i,j,p} * value_output(p); d long, excludes the output bias.
    std::span<const double> head_output(int layer, int head, int pos) const;
    NormStats attn_norm_stats(int layer, int pos) const;
    NormStats ffn_norm_stats(int layer, int pos) const;

    /// Output distribution scores of the model at the last position.
    std::span<const double> logits() const { return logits_; }

    // Writable views used while the trace is filled in.
    std::span<double> residual_mut(int layer, int pos);
    std::span<double> attn_output_mut(int layer, int pos);
    std::span<double> ffn_input_mut(int layer, int pos);
    std::span<double> ffn_output_mut(int layer, int pos);
    std::span<double> ffn_coefficients_mut(int layer, int pos);
    std::span<double> attention_row_mut(int layer, int head, int query_pos);
    std::span<double> head_value_mut(int layer, int head, int pos);
    std::span<double> value_output_mut(int layer, int head, int pos);
    std::span<double> head_output_mut(int layer, int head, int pos);
    NormStats& attn_norm_stats_mut(int layer, int pos);
    NormStats& ffn_norm_stats_mut(int layer, int pos);
    DenseVector& logits_mut() { return logits_; }

private:
    void check(int layer, int pos, int layer_limit) const;
    void check_head(int layer, int head, int pos) const;

    int n_layer_, n_pos_, d_, n_head_, d_head_, d_ffn_;
    std::vector<int> tokens_;
    std::vector<double> residual_;     // (L+1) x T x d
    std::vector<double> attn_out_;     // L x T x d
    std::vector<double> ffn_in_;       // L x T x d
    std::vector<double> ffn_out_;      // L x T x d
    std::vector<double> ffn_coeff_;    // L x T x N
    std::vector<double> attn_weight_;  // L x H x T x T
    std::vector<double> head_value_;   // L x H x T x d_h
    std::vector<double> value_out_;    // L x H x T x d
    std::vector<double> head_out_;     // L x H x T x d
    std::vector<NormStats> attn_norm_; // L x T
    std::vector<NormStats> ffn_norm_;  // L x T
    DenseVector logits_;
};

class InputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Runs the model over `tokens` and records the full trace. Throws InputError for
/// empty or over-long sequences and out-of-vocabulary ids.
ForwardTrace forward(const Model& model, std::span<const int> tokens);

/// Applies the model's final normalisation (when the ModelSpec enables it) and the
/// unembedding: the scores the model itself would emit for vector h.
DenseVector output_logits(const Model& model, std::span<const double> h);

/// Normalisation as used inside every sublayer and at the output.
DenseVector normalize(const ModelSpec& spec, std::span<const float> weight,
                      std::span<const float> bias, std::span<const double> x,
                      NormStats* stats = nullptr);

NormStats norm_stats(const ModelSpec& spec, std::span<const double> x);

double gelu(double x);
double silu(double x);

/// Column k of fc2 (an FFN subvalue), as doubles.
DenseVector ffn_subvalue(const Model& model, int layer, int index);
/// Column `index` of head `head` in wo (an attention subvalue).
DenseVector attn_subvalue(const Model& model, int layer, int head, int index);

struct NeuronTerm {
    NeuronRef ref;
    double coefficient = 0.0;
    DenseVector subvalue;
    DenseVector contribution; // coefficient * subvalue
};

/// FFN neurons at (layer, position): sum of contributions plus b2 equals F.
std::vector<NeuronTerm> ffn_neurons(const Model& model, const ForwardTrace& trace, int layer,
                                    int position);

/// Attention neurons of one head carrying position p's value into query
/// position i: coefficient alpha_{i,j,p} * value_k(p), contributions summing to
/// alpha_{i,j,p} * value_output(p).
std::vector<NeuronTerm> attention_neurons(const Model& model, const ForwardTrace& trace, int layer,
                                          int head, int query_pos, int key_pos);

/// Number of additive vectors making up the final stream when attention and
/// FFN neurons are the units: L * (T * H * d_h + N) + 1.
std::size_t neuron_vector_count(const ModelSpec& spec, int num_positions);

} // namespace neuron_probe
