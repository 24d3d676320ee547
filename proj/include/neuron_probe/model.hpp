#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace neuron_probe {

enum class Activation { Gelu, SiluGated };
enum class NormKind { LayerNorm, RmsNorm };
enum class PositionKind { Learned, Rotary };

/// Architecture hyperparameters of a pre-norm decoder-only transformer.
struct ModelSpec {
    int n_layer = 1;
    int n_head = 1;
    int d_model = 1;
    int d_ffn = 1;
    int n_vocab = 2;
    int n_ctx = 256;
    Activation activation = Activation::Gelu;
    NormKind norm = NormKind::LayerNorm;
    PositionKind positions = PositionKind::Learned;
    bool final_norm_on_projection = true;
    bool biases = true;
    double norm_eps = 1e-5;
    double rope_theta = 10000.0;

    int head_dim() const { return d_model / n_head; }

    /// Throws std::invalid_argument when counts or divisibility are violated.
    void validate() const;

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

std::string to_string(Activation a);
std::string to_string(NormKind n);
std::string to_string(PositionKind p);

/// Row-major float tensor with shared, copy-on-write storage. Copies of a model
/// share every tensor until one side asks for mutable access.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<std::size_t> shape, std::vector<float> values);
    static Tensor zeros(std::vector<std::size_t> shape);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t size() const { return data_ ? data_->size() : 0; }
    bool empty() const { return size() == 0; }

    std::span<const float> values() const;
    /// Detaches from any other owner before handing out write access.
    std::span<float> mutable_values();

    /// Row r of a 2-D tensor.
    std::span<const float> row(std::size_t r) const;
    float at(std::size_t r, std::size_t c) const;

private:
    std::vector<std::size_t> shape_;
    std::shared_ptr<std::vector<float>> data_;
};

/// Weights of one layer. Attention projections are stored as full d x d
/// matrices with head j occupying rows (wq/wk/wv) or columns (wo)
/// [j*d_h, (j+1)*d_h). Rows of fc1 are FFN subkeys, columns of fc2 subvalues;
/// for gated FFNs fc1 is the gate and `up` the up-projection.
struct LayerWeights {
    Tensor attn_norm_weight, attn_norm_bias;
    Tensor wq, bq, wk, bk, wv, bv;
    Tensor wo, bo;
    Tensor ffn_norm_weight, ffn_norm_bias;
    Tensor fc1, b1, up, fc2, b2;
};

struct WeightStore {
    Tensor token_embedding;    // B x d
    Tensor position_embedding; // n_ctx x d, learned positions only
    Tensor unembedding;        // B x d
    Tensor final_norm_weight, final_norm_bias;
    std::vector<LayerWeights> layers;
};

struct Model {
    ModelSpec spec;
    WeightStore weights;
};

/// Every tensor a ModelSpec requires, with its file name and expected shape.
struct TensorSlot {
    std::string name;
    std::vector<std::size_t> shape;
    Tensor* tensor = nullptr;
};
std::vector<TensorSlot> tensor_slots(Model& model);

/// A model with every tensor present and zero-filled (norm gains set to one).
Model make_zero_model(const ModelSpec& spec);

/// Shape-checks every tensor against the ModelSpec; throws std::invalid_argument.
void check_shapes(const Model& model);

class LoadError : public std::runtime_error {
public:
    enum class Kind { Io, Header, MissingTensor, ShapeMismatch, Checksum };
    LoadError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

std::string to_string(LoadError::Kind kind);

/// Weight file: 8-byte little-endian header length, a JSON header carrying the
/// spec and a tensor manifest (name, shape, byte offset, crc32), then raw
/// little-endian float32 tensors, row-major.
Model load_model(const std::filesystem::path& path);
void save_model(const Model& model, const std::filesystem::path& path);

/// Maximum sequence length; NEURON_PROBE_CONTEXT_LIMIT overrides the default 256.
int context_limit();

enum class Site : std::uint8_t { Attn = 0, Ffn = 1 };
std::string to_string(Site s);

/// Address of one neuron: an FFN subvalue (column of fc2) or an attention
/// subvalue (column k of head `head` in wo). `position` optionally pins an
/// attention neuron to one source position; FFN neurons carry neither head
/// nor position.
struct NeuronRef {
    int layer = 0;
    Site site = Site::Ffn;
    int head = 0;
    int index = 0;
    std::optional<int> position;

    static NeuronRef ffn(int layer, int index) { return {layer, Site::Ffn, 0, index, {}}; }
    static NeuronRef attn(int layer, int head, int index, std::optional<int> position = {}) {
        return {layer, Site::Attn, head, index, position};
    }

    friend auto operator<=>(const NeuronRef&, const NeuronRef&) = default;
    friend bool operator==(const NeuronRef&, const NeuronRef&) = default;
};

struct HeadRef {
    int layer = 0;
    int head = 0;
    friend auto operator<=>(const HeadRef&, const HeadRef&) = default;
    friend bool operator==(const HeadRef&, const HeadRef&) = default;
};

struct LayerRef {
    int layer = 0;
    Site site = Site::Attn;
    friend auto operator<=>(const LayerRef&, const LayerRef&) = default;
    friend bool operator==(const LayerRef&, const LayerRef&) = default;
};

/// Throws std::out_of_range if any field falls outside the model.
void validate(const NeuronRef& ref, const ModelSpec& spec);
void validate(const HeadRef& ref, const ModelSpec& spec);

/// Compact labels: "f3-120" (FFN), "a2.1-5" (attention), "a2.1-5@4" (at position 4),
/// "h2.1" (head), "a2"/"f2" (layer). Layers and heads are 0-based.
std::string to_string(const NeuronRef& ref);
std::string to_string(const HeadRef& ref);
std::string to_string(const LayerRef& ref);
NeuronRef parse_neuron_ref(const std::string& text);
HeadRef parse_head_ref(const std::string& text);

} // namespace neuron_probe
