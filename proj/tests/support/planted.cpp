#include "planted.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace planted {

using namespace neuron_probe;

void set(Tensor& t, std::size_t r, std::size_t c, float v) { t.mutable_values()[r * t.shape()[1] + c] = v; }
void set(Tensor& t, std::size_t i, float v) { t.mutable_values()[i] = v; }

namespace {

void fill_normal(Tensor& t, std::mt19937_64& rng, double sd) {
    std::normal_distribution<double> nd(0.0, sd);
    for (auto& x : t.mutable_values()) x = static_cast<float>(nd(rng));
}

Corpus random_prompts(std::mt19937_64& rng, int n, int first_token, int end_token, int answer,
                      const std::string& type) {
    std::uniform_int_distribution<int> len(3, 6), tok(first_token, end_token - 1);
    Corpus c;
    for (int i = 0; i < n; ++i) {
        KnowledgeRecord r;
        r.id = type + "-" + std::to_string(i);
        const int T = len(rng);
        for (int t = 0; t < T; ++t) r.tokens.push_back(tok(rng));
        r.answer = answer;
        r.type = type;
        c.push_back(std::move(r));
    }
    return c;
}

ModelSpec small_spec() {
    ModelSpec s;
    s.n_layer = 2;
    s.n_head = 2;
    s.d_model = 16;
    s.d_ffn = 32;
    s.n_vocab = 16;
    s.n_ctx = 8;
    s.final_norm_on_projection = false;
    return s;
}

void identity_unembedding(Model& m) {
    const auto B = static_cast<std::size_t>(m.spec.n_vocab);
    const auto d = static_cast<std::size_t>(m.spec.d_model);
    for (std::size_t i = 0; i < std::min(B, d); ++i) set(m.weights.unembedding, i, i, 1.0f);
}

} // namespace

Model identity_toy(int d) {
    ModelSpec s;
    s.n_layer = 1;
    s.n_head = 1;
    s.d_model = d;
    s.d_ffn = 1;
    s.n_vocab = d;
    s.n_ctx = 4;
    s.final_norm_on_projection = false;
    Model m = make_zero_model(s);
    identity_unembedding(m);
    return m;
}

ValueModel value_model(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ValueModel out;
    Model m = make_zero_model(small_spec());
    identity_unembedding(m);
    fill_normal(m.weights.token_embedding, rng, 0.5);
    for (auto& lw : m.weights.layers) {
        fill_normal(lw.fc1, rng, 0.3);
        fill_normal(lw.fc2, rng, 0.05);
    }
    const std::size_t d = 16;
    auto& lw = m.weights.layers[1];
    auto plant = [&](std::size_t k, float bias, auto column) {
        for (std::size_t t = 0; t < d; ++t) {
            set(lw.fc1, k, t, 0.0f);
            set(lw.fc2, t, k, column(t));
        }
        set(lw.b1, k, bias);
    };
    const auto w = static_cast<std::size_t>(out.answer);
    plant(7, 4.0f, [&](std::size_t t) { return t == w ? 2.0f : 0.0f; });
    plant(12, 1.0f, [](std::size_t) { return 5.0f; });
    plant(20, 10.0f, [](std::size_t) { return 0.05f; });
    out.planted = NeuronRef::ffn(1, 7);
    out.norm_decoy = NeuronRef::ffn(1, 12);
    out.coeff_decoy = NeuronRef::ffn(1, 20);
    out.corpus = random_prompts(rng, 12, 4, 16, out.answer, "planted");
    out.model = std::move(m);
    return out;
}

QueryModel query_model(std::uint64_t seed, bool attention) {
    std::mt19937_64 rng(seed);
    Model m = make_zero_model(small_spec());
    identity_unembedding(m);
    fill_normal(m.weights.token_embedding, rng, 0.3);
    for (auto& lw : m.weights.layers) {
        fill_normal(lw.wq, rng, 0.05);
        fill_normal(lw.wk, rng, 0.05);
        fill_normal(lw.wv, rng, 0.05);
        fill_normal(lw.wo, rng, 0.05);
        fill_normal(lw.fc1, rng, 0.3);
        fill_normal(lw.fc2, rng, 0.05);
    }
    const std::size_t d = 16;
    const int answer = 5;
    std::normal_distribution<double> nd;
    std::vector<double> u(d);
    for (auto& x : u) x = nd(rng);
    const double n = std::sqrt(std::inner_product(u.begin(), u.end(), u.begin(), 0.0));
    for (auto& x : u) x /= n;

    QueryModel out;
    auto& l0 = m.weights.layers[0];
    auto& l1 = m.weights.layers[1];
    const std::size_t q = 9;
    for (std::size_t t = 0; t < d; ++t) {
        set(l0.fc1, q, t, 0.0f);
        set(l0.fc2, t, q, static_cast<float>(2.0 * u[t]));
    }
    set(l0.b1, q, 3.0f);
    out.query = NeuronRef::ffn(0, static_cast<int>(q));

    if (attention) {
        const std::size_t row = 0 * 8 + 2; // head 0, index 2
        for (std::size_t t = 0; t < d; ++t) {
            set(l1.wv, row, t, static_cast<float>(u[t]));
            set(l1.wo, t, row, t == static_cast<std::size_t>(answer) ? 2.0f : 0.0f);
        }
        out.value = NeuronRef::attn(1, 0, 2);
    } else {
        const std::size_t k = 5;
        for (std::size_t t = 0; t < d; ++t) {
            set(l1.fc1, k, t, static_cast<float>(u[t]));
            set(l1.fc2, t, k, t == static_cast<std::size_t>(answer) ? 2.0f : 0.0f);
        }
        out.value = NeuronRef::ffn(1, static_cast<int>(k));
    }
    out.corpus = random_prompts(rng, 6, 0, 16, answer, "planted");
    out.model = std::move(m);
    return out;
}

WideQueryModel wide_query_model(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ModelSpec s;
    s.n_layer = 2;
    s.n_head = 2;
    s.d_model = 32;
    s.d_ffn = 8192;
    s.n_vocab = 32;
    s.n_ctx = 8;
    s.norm = NormKind::RmsNorm;
    s.norm_eps = 1e-6;
    s.final_norm_on_projection = false;
    Model m = make_zero_model(s);
    identity_unembedding(m);

    // triggers 0..3 and fillers 4..15 embed as basis vectors
    for (std::size_t t = 0; t < 16; ++t) set(m.weights.token_embedding, t, t, 1.0f);

    auto& l0 = m.weights.layers[0];
    auto& l1 = m.weights.layers[1];
    for (std::size_t k = 0; k < 8192; ++k) set(l0.b1, k, -3.0f);
    std::vector<int> perm(8192);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);

    WideQueryModel out;
    constexpr int kGroup = 50;
    const float gain = 8.0f;
    for (int c = 0; c < 4; ++c) {
        std::vector<NeuronRef> group;
        for (int i = 0; i < kGroup; ++i) {
            const auto k = static_cast<std::size_t>(perm[static_cast<std::size_t>(c * kGroup + i)]);
            set(l0.fc1, k, static_cast<std::size_t>(c), 1.0f);
            set(l0.fc2, static_cast<std::size_t>(16 + c), k, 0.2f);
            group.push_back(NeuronRef::ffn(0, static_cast<int>(k)));
        }
        std::sort(group.begin(), group.end());
        out.groups.push_back(std::move(group));
        // head 0, index c reads dim 16+c and writes the channel's answer
        set(l1.wv, static_cast<std::size_t>(c), static_cast<std::size_t>(16 + c), 1.0f);
        set(l1.wo, static_cast<std::size_t>(24 + c), static_cast<std::size_t>(c), gain);
        out.answers.push_back(24 + c);
    }

    std::uniform_int_distribution<int> len(3, 6), filler(4, 15);
    for (int c = 0; c < 4; ++c) {
        for (int i = 0; i < 8; ++i) {
            KnowledgeRecord r;
            r.type = "channel" + std::to_string(c);
            r.id = r.type + "-" + std::to_string(i);
            const int T = len(rng);
            std::uniform_int_distribution<int> where(0, T - 2);
            const int trig = where(rng);
            for (int t = 0; t < T; ++t) r.tokens.push_back(t == trig ? c : filler(rng));
            r.answer = out.answers[static_cast<std::size_t>(c)];
            out.corpus.push_back(std::move(r));
        }
    }
    out.model = std::move(m);
    return out;
}

HeadModel head_model(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ModelSpec s;
    s.n_layer = 2;
    s.n_head = 4;
    s.d_model = 40;
    s.d_ffn = 8;
    s.n_vocab = 64;
    s.n_ctx = 8;
    s.norm = NormKind::RmsNorm;
    s.norm_eps = 1e-6;
    s.biases = false;
    s.final_norm_on_projection = false;
    Model m = make_zero_model(s);

    const std::vector<std::string> types = {"color", "month", "number"};
    const std::size_t dh = 10;
    const float gain = 8.0f;
    auto& l1 = m.weights.layers[1];
    HeadModel out;
    for (std::size_t t = 0; t < types.size(); ++t) {
        for (std::size_t i = 0; i < 4; ++i) {
            set(m.weights.token_embedding, 4 * t + i, 8 * t + i, 1.0f);                 // subject
            set(m.weights.unembedding, 32 + 4 * t + i, 8 * t + 4 + i, 1.0f);           // answer
            set(l1.wv, t * dh + i, 8 * t + i, 1.0f);
            set(l1.wo, 8 * t + 4 + i, t * dh + i, gain);
        }
        set(m.weights.token_embedding, 12 + t, 32 + t, 1.0f); // relation word
        out.head[types[t]] = HeadRef{1, static_cast<int>(t)};
    }
    set(m.weights.token_embedding, 16, 36, 1.0f); // bos
    set(m.weights.token_embedding, 17, 37, 1.0f); // filler

    std::bernoulli_distribution longer(0.5);
    for (std::size_t t = 0; t < types.size(); ++t) {
        auto& corpus = out.by_type[types[t]];
        for (int i = 0; i < 4; ++i) {
            for (int v = 0; v < 2; ++v) {
                KnowledgeRecord r;
                r.type = types[t];
                r.id = r.type + "-" + std::to_string(i) + "-" + std::to_string(v);
                r.tokens = {16};
                if (longer(rng)) r.tokens.push_back(17);
                r.tokens.push_back(static_cast<int>(4 * t) + i);
                r.tokens.push_back(static_cast<int>(12 + t));
                r.answer = 32 + static_cast<int>(4 * t) + i;
                corpus.push_back(std::move(r));
            }
        }
    }
    out.model = std::move(m);
    return out;
}

std::filesystem::path data_dir() { return NEURON_PROBE_DATA_DIR; }

} // namespace planted
