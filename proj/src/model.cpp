#include "neuron_probe/model.hpp"

#include <json.hpp>
#include <zlib.h>

#include <array>
#include <bit>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace neuron_probe {

using json = nlohmann::json;

namespace {

constexpr const char* kFormatName = "neuron-probe-weights";
constexpr int kFormatVersion = 1;

std::uint32_t crc32_of(std::span<const char> bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks for large tensors.
    std::size_t offset = 0;
    while (offset < bytes.size()) {
        const std::size_t n = std::min<std::size_t>(bytes.size() - offset, 1u << 30);
        crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + offset),
                    static_cast<uInt>(n));
        offset += n;
    }
    return static_cast<std::uint32_t>(crc);
}

std::vector<char> to_le_bytes(std::span<const float> values) {
    std::vector<char> bytes(values.size() * sizeof(float));
    std::memcpy(bytes.data(), values.data(), bytes.size());
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = 0; i < bytes.size(); i += 4) {
            std::swap(bytes[i], bytes[i + 3]);
            std::swap(bytes[i + 1], bytes[i + 2]);
        }
    }
    return bytes;
}

std::vector<float> from_le_bytes(std::span<const char> bytes) {
    std::vector<char> copy(bytes.begin(), bytes.end());
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = 0; i < copy.size(); i += 4) {
            std::swap(copy[i], copy[i + 3]);
            std::swap(copy[i + 1], copy[i + 2]);
        }
    }
    std::vector<float> values(copy.size() / sizeof(float));
    std::memcpy(values.data(), copy.data(), values.size() * sizeof(float));
    return values;
}

std::size_t element_count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
}

std::string shape_string(const std::vector<std::size_t>& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
    out << ']';
    return out.str();
}

json spec_to_json(const ModelSpec& s) {
    return json{{"n_layer", s.n_layer},
                {"n_head", s.n_head},
                {"d_model", s.d_model},
                {"d_ffn", s.d_ffn},
                {"n_vocab", s.n_vocab},
                {"n_ctx", s.n_ctx},
                {"activation", to_string(s.activation)},
                {"norm", to_string(s.norm)},
                {"positions", to_string(s.positions)},
                {"final_norm_on_projection", s.final_norm_on_projection},
                {"biases", s.biases},
                {"norm_eps", s.norm_eps},
                {"rope_theta", s.rope_theta}};
}

ModelSpec spec_from_json(const json& j) {
    ModelSpec s;
    s.n_layer = j.at("n_layer").get<int>();
    s.n_head = j.at("n_head").get<int>();
    s.d_model = j.at("d_model").get<int>();
    s.d_ffn = j.at("d_ffn").get<int>();
    s.n_vocab = j.at("n_vocab").get<int>();
    s.n_ctx = j.at("n_ctx").get<int>();
    const auto act = j.at("activation").get<std::string>();
    if (act == "gelu") s.activation = Activation::Gelu;
    else if (act == "silu_gated") s.activation = Activation::SiluGated;
    else throw std::invalid_argument("unknown activation '" + act + "'");
    const auto norm = j.at("norm").get<std::string>();
    if (norm == "layernorm") s.norm = NormKind::LayerNorm;
    else if (norm == "rmsnorm") s.norm = NormKind::RmsNorm;
    else throw std::invalid_argument("unknown norm '" + norm + "'");
    const auto pos = j.at("positions").get<std::string>();
    if (pos == "learned") s.positions = PositionKind::Learned;
    else if (pos == "rotary") s.positions = PositionKind::Rotary;
    else throw std::invalid_argument("unknown positions '" + pos + "'");
    s.final_norm_on_projection = j.at("final_norm_on_projection").get<bool>();
    s.biases = j.value("biases", true);
    s.norm_eps = j.value("norm_eps", s.norm == NormKind::LayerNorm ? 1e-5 : 1e-6);
    s.rope_theta = j.value("rope_theta", 10000.0);
    return s;
}

} // namespace

void ModelSpec::validate() const {
    if (n_layer < 1 || n_head < 1 || d_model < 1 || d_ffn < 1 || n_ctx < 1) {
        throw std::invalid_argument("model spec: all counts must be >= 1");
    }
    if (n_vocab < 2) throw std::invalid_argument("model spec: vocabulary must hold >= 2 tokens");
    if (d_model % n_head != 0) {
        throw std::invalid_argument("model spec: d_model " + std::to_string(d_model) +
                                    " not divisible by n_head " + std::to_string(n_head));
    }
    if (positions == PositionKind::Rotary && head_dim() % 2 != 0) {
        throw std::invalid_argument("model spec: rotary positions need an even head width");
    }
    if (!(norm_eps > 0.0)) throw std::invalid_argument("model spec: norm_eps must be positive");
}

std::string to_string(Activation a) { return a == Activation::Gelu ? "gelu" : "silu_gated"; }
std::string to_string(NormKind n) { return n == NormKind::LayerNorm ? "layernorm" : "rmsnorm"; }
std::string to_string(PositionKind p) { return p == PositionKind::Learned ? "learned" : "rotary"; }
std::string to_string(Site s) { return s == Site::Ffn ? "ffn" : "attn"; }

std::string to_string(LoadError::Kind kind) {
    switch (kind) {
    case LoadError::Kind::Io: return "io";
    case LoadError::Kind::Header: return "header";
    case LoadError::Kind::MissingTensor: return "missing_tensor";
    case LoadError::Kind::ShapeMismatch: return "shape_mismatch";
    case LoadError::Kind::Checksum: return "checksum";
    }
    return "unknown";
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<float> values)
    : shape_(std::move(shape)), data_(std::make_shared<std::vector<float>>(std::move(values))) {
    if (element_count(shape_) != data_->size()) {
        throw std::invalid_argument("tensor: shape " + shape_string(shape_) + " does not hold " +
                                    std::to_string(data_->size()) + " elements");
    }
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    const auto n = element_count(shape);
    return Tensor(std::move(shape), std::vector<float>(n, 0.0f));
}

std::span<const float> Tensor::values() const {
    if (!data_) return {};
    return *data_;
}

std::span<float> Tensor::mutable_values() {
    if (!data_) return {};
    if (data_.use_count() > 1) data_ = std::make_shared<std::vector<float>>(*data_);
    return *data_;
}

std::span<const float> Tensor::row(std::size_t r) const {
    const std::size_t cols = shape_.size() > 1 ? shape_.back() : shape_.at(0);
    return values().subspan(r * cols, cols);
}

float Tensor::at(std::size_t r, std::size_t c) const { return (*data_)[r * shape_.back() + c]; }

std::vector<TensorSlot> tensor_slots(Model& model) {
    const auto& s = model.spec;
    const auto d = static_cast<std::size_t>(s.d_model);
    const auto n = static_cast<std::size_t>(s.d_ffn);
    const auto b = static_cast<std::size_t>(s.n_vocab);
    const bool layernorm = s.norm == NormKind::LayerNorm;
    auto& w = model.weights;
    w.layers.resize(static_cast<std::size_t>(s.n_layer));

    std::vector<TensorSlot> slots;
    slots.push_back({"token_embedding", {b, d}, &w.token_embedding});
    if (s.positions == PositionKind::Learned) {
        slots.push_back({"position_embedding", {static_cast<std::size_t>(s.n_ctx), d},
                         &w.position_embedding});
    }
    slots.push_back({"unembedding", {b, d}, &w.unembedding});
    slots.push_back({"final_norm.weight", {d}, &w.final_norm_weight});
    if (layernorm) slots.push_back({"final_norm.bias", {d}, &w.final_norm_bias});

    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        auto& lw = w.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        slots.push_back({p + "attn_norm.weight", {d}, &lw.attn_norm_weight});
        if (layernorm) slots.push_back({p + "attn_norm.bias", {d}, &lw.attn_norm_bias});
        slots.push_back({p + "attn.wq", {d, d}, &lw.wq});
        slots.push_back({p + "attn.wk", {d, d}, &lw.wk});
        slots.push_back({p + "attn.wv", {d, d}, &lw.wv});
        slots.push_back({p + "attn.wo", {d, d}, &lw.wo});
        if (s.biases) {
            slots.push_back({p + "attn.bq", {d}, &lw.bq});
            slots.push_back({p + "attn.bk", {d}, &lw.bk});
            slots.push_back({p + "attn.bv", {d}, &lw.bv});
            slots.push_back({p + "attn.bo", {d}, &lw.bo});
        }
        slots.push_back({p + "ffn_norm.weight", {d}, &lw.ffn_norm_weight});
        if (layernorm) slots.push_back({p + "ffn_norm.bias", {d}, &lw.ffn_norm_bias});
        slots.push_back({p + "ffn.fc1", {n, d}, &lw.fc1});
        if (s.activation == Activation::SiluGated) slots.push_back({p + "ffn.up", {n, d}, &lw.up});
        slots.push_back({p + "ffn.fc2", {d, n}, &lw.fc2});
        if (s.biases) {
            slots.push_back({p + "ffn.b1", {n}, &lw.b1});
            slots.push_back({p + "ffn.b2", {d}, &lw.b2});
        }
    }
    return slots;
}

Model make_zero_model(const ModelSpec& spec) {
    spec.validate();
    Model model{spec, {}};
    for (auto& slot : tensor_slots(model)) {
        *slot.tensor = Tensor::zeros(slot.shape);
        if (slot.name.ends_with("norm.weight")) {
            auto v = slot.tensor->mutable_values();
            std::fill(v.begin(), v.end(), 1.0f);
        }
    }
    return model;
}

void check_shapes(const Model& model) {
    model.spec.validate();
    Model view = model; // shares storage; slots only need addresses
    for (const auto& slot : tensor_slots(view)) {
        if (slot.tensor->shape() != slot.shape) {
            throw std::invalid_argument("tensor " + slot.name + " has shape " +
                                        shape_string(slot.tensor->shape()) + ", expected " +
                                        shape_string(slot.shape));
        }
    }
}

void save_model(const Model& model, const std::filesystem::path& path) {
    check_shapes(model);
    Model view = model;
    auto slots = tensor_slots(view);

    json manifest = json::array();
    std::vector<std::vector<char>> blobs;
    std::size_t offset = 0;
    for (const auto& slot : slots) {
        blobs.push_back(to_le_bytes(slot.tensor->values()));
        manifest.push_back({{"name", slot.name},
                            {"shape", slot.shape},
                            {"offset", offset},
                            {"crc32", crc32_of(blobs.back())}});
        offset += blobs.back().size();
    }
    json header{{"format", kFormatName},
                {"version", kFormatVersion},
                {"spec", spec_to_json(model.spec)},
                {"tensors", manifest}};
    const std::string text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError(LoadError::Kind::Io, "cannot write " + path.string());
    const std::uint64_t len = text.size();
    std::array<char, 8> len_bytes{};
    for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<char>((len >> (8 * i)) & 0xff);
    out.write(len_bytes.data(), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& blob : blobs) out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw LoadError(LoadError::Kind::Io, "short write to " + path.string());
}

Model load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError(LoadError::Kind::Io, "cannot open weight file " + path.string());
    std::vector<char> file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (file.size() < 8) throw LoadError(LoadError::Kind::Header, "weight file too short for header");

    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(file[i])) << (8 * i);
    if (len > file.size() - 8) throw LoadError(LoadError::Kind::Header, "header length exceeds file size");

    json header;
    try {
        header = json::parse(file.begin() + 8, file.begin() + 8 + static_cast<std::ptrdiff_t>(len));
    } catch (const json::exception& e) {
        throw LoadError(LoadError::Kind::Header, std::string("header is not valid JSON: ") + e.what());
    }
    if (header.value("format", "") != kFormatName || header.value("version", 0) != kFormatVersion) {
        throw LoadError(LoadError::Kind::Header, "unrecognised weight file format");
    }

    Model model;
    try {
        model.spec = spec_from_json(header.at("spec"));
        model.spec.validate();
    } catch (const std::exception& e) {
        throw LoadError(LoadError::Kind::Header, std::string("bad model spec: ") + e.what());
    }

    struct Entry {
        std::vector<std::size_t> shape;
        std::size_t offset;
        std::uint32_t crc;
    };
    std::map<std::string, Entry> entries;
    try {
        for (const auto& t : header.at("tensors")) {
            entries[t.at("name").get<std::string>()] = {t.at("shape").get<std::vector<std::size_t>>(),
                                                       t.at("offset").get<std::size_t>(),
                                                       t.at("crc32").get<std::uint32_t>()};
        }
    } catch (const json::exception& e) {
        throw LoadError(LoadError::Kind::Header, std::string("bad tensor manifest: ") + e.what());
    }

    const std::span<const char> data(file.data() + 8 + len, file.size() - 8 - len);
    for (auto& slot : tensor_slots(model)) {
        auto it = entries.find(slot.name);
        if (it == entries.end()) {
            throw LoadError(LoadError::Kind::MissingTensor, "missing tensor " + slot.name);
        }
        const auto& e = it->second;
        if (e.shape != slot.shape) {
            throw LoadError(LoadError::Kind::ShapeMismatch,
                            "tensor " + slot.name + " has shape " + shape_string(e.shape) +
                                ", spec requires " + shape_string(slot.shape));
        }
        const std::size_t nbytes = element_count(e.shape) * sizeof(float);
        // A truncated file leaves a short (or empty) byte range, which can never
        // reproduce the recorded checksum.
        const std::size_t start = std::min(e.offset, data.size());
        const auto bytes = data.subspan(start, std::min(nbytes, data.size() - start));
        if (bytes.size() != nbytes || crc32_of(bytes) != e.crc) {
            throw LoadError(LoadError::Kind::Checksum, "checksum mismatch for tensor " + slot.name);
        }
        *slot.tensor = Tensor(e.shape, from_le_bytes(bytes));
    }
    return model;
}

int context_limit() {
    constexpr int kDefault = 256;
    const char* env = std::getenv("NEURON_PROBE_CONTEXT_LIMIT");
    if (env == nullptr || *env == '\0') return kDefault;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) {
        throw std::invalid_argument(std::string("NEURON_PROBE_CONTEXT_LIMIT must be a positive integer, got '") +
                                    env + "'");
    }
    return static_cast<int>(v);
}

void validate(const NeuronRef& ref, const ModelSpec& spec) {
    auto fail = [&](const std::string& why) {
        throw std::out_of_range("invalid neuron " + to_string(ref) + ": " + why);
    };
    if (ref.layer < 0 || ref.layer >= spec.n_layer) fail("layer out of range");
    if (ref.site == Site::Ffn) {
        if (ref.index < 0 || ref.index >= spec.d_ffn) fail("index out of range");
        if (ref.head != 0 || ref.position) fail("FFN neurons carry no head or position");
    } else {
        if (ref.head < 0 || ref.head >= spec.n_head) fail("head out of range");
        if (ref.index < 0 || ref.index >= spec.head_dim()) fail("index out of range");
        if (ref.position && *ref.position < 0) fail("negative position");
    }
}

void validate(const HeadRef& ref, const ModelSpec& spec) {
    if (ref.layer < 0 || ref.layer >= spec.n_layer || ref.head < 0 || ref.head >= spec.n_head) {
        throw std::out_of_range("invalid head " + to_string(ref));
    }
}

std::string to_string(const NeuronRef& ref) {
    if (ref.site == Site::Ffn) return "f" + std::to_string(ref.layer) + "-" + std::to_string(ref.index);
    std::string s = "a" + std::to_string(ref.layer) + "." + std::to_string(ref.head) + "-" +
                    std::to_string(ref.index);
    if (ref.position) s += "@" + std::to_string(*ref.position);
    return s;
}

std::string to_string(const HeadRef& ref) {
    return "h" + std::to_string(ref.layer) + "." + std::to_string(ref.head);
}

std::string to_string(const LayerRef& ref) {
    return (ref.site == Site::Ffn ? "f" : "a") + std::to_string(ref.layer);
}

namespace {

int parse_int(const std::string& text, std::size_t& pos, const std::string& whole) {
    std::size_t used = 0;
    int v = 0;
    try {
        v = std::stoi(text.substr(pos), &used);
    } catch (const std::exception&) {
        throw std::invalid_argument("cannot parse reference '" + whole + "'");
    }
    if (used == 0 || v < 0) throw std::invalid_argument("cannot parse reference '" + whole + "'");
    pos += used;
    return v;
}

void expect(const std::string& text, std::size_t& pos, char c, const std::string& whole) {
    if (pos >= text.size() || text[pos] != c) {
        throw std::invalid_argument("cannot parse reference '" + whole + "'");
    }
    ++pos;
}

} // namespace

NeuronRef parse_neuron_ref(const std::string& text) {
    if (text.empty()) throw std::invalid_argument("empty neuron reference");
    std::size_t pos = 1;
    NeuronRef ref;
    if (text[0] == 'f') {
        ref.site = Site::Ffn;
        ref.layer = parse_int(text, pos, text);
        expect(text, pos, '-', text);
        ref.index = parse_int(text, pos, text);
    } else if (text[0] == 'a') {
        ref.site = Site::Attn;
        ref.layer = parse_int(text, pos, text);
        expect(text, pos, '.', text);
        ref.head = parse_int(text, pos, text);
        expect(text, pos, '-', text);
        ref.index = parse_int(text, pos, text);
        if (pos < text.size() && text[pos] == '@') {
            ++pos;
            ref.position = parse_int(text, pos, text);
        }
    } else {
        throw std::invalid_argument("neuron reference must start with 'f' or 'a': '" + text + "'");
    }
    if (pos != text.size()) throw std::invalid_argument("trailing characters in '" + text + "'");
    return ref;
}

HeadRef parse_head_ref(const std::string& text) {
    if (text.empty() || text[0] != 'h') {
        throw std::invalid_argument("head reference must look like h<layer>.<head>: '" + text + "'");
    }
    std::size_t pos = 1;
    HeadRef ref;
    ref.layer = parse_int(text, pos, text);
    expect(text, pos, '.', text);
    ref.head = parse_int(text, pos, text);
    if (pos != text.size()) throw std::invalid_argument("trailing characters in '" + text + "'");
    return ref;
}

} // namespace neuron_probe
