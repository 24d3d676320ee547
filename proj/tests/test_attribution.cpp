#include "neuron_probe/attribution.hpp"
#include "neuron_probe/corpus.hpp"
#include "neuron_probe/intervention.hpp"
#include "planted.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

using namespace neuron_probe;

namespace {

const Model& tiny() {
    static const Model m = load_model(planted::data_dir() / "tiny" / "model.npw");
    return m;
}

const Corpus& tiny_corpus() {
    static const Corpus c = load_corpus(planted::data_dir() / "tiny" / "corpus.jsonl");
    return c;
}

double oracle_log_softmax(const DenseVector& x, std::size_t w) {
    double z = 0.0;
    for (double v : x) z += std::exp(v);
    return x[w] - std::log(z);
}

std::vector<NeuronRef> top_refs(std::vector<Scored<NeuronRef>> s, std::size_t k) {
    std::vector<NeuronRef> out;
    for (const auto& x : top_k(std::move(s), k)) out.push_back(x.key);
    return out;
}

std::size_t rank_of(const std::vector<Scored<NeuronRef>>& s, const NeuronRef& ref) {
    const auto all = top_refs(s, s.size());
    return static_cast<std::size_t>(std::find(all.begin(), all.end(), ref) - all.begin()) + 1;
}

} // namespace

TEST_SUITE("attribution") {

TEST_CASE("method ids and letters") {
    CHECK(method_letter(Method::LogProbIncrease) == 'a');
    CHECK(method_letter(Method::CoeffInvRank) == 'h');
    CHECK(parse_method("e") == Method::Coefficient);
    CHECK(parse_method("log_prob") == Method::LogProb);
    CHECK_FALSE(parse_method("z").has_value());
    for (Method m : kValueMethods) CHECK(parse_method(method_id(m)) == m);
}

TEST_CASE("log-probability increase of a zero vector is exactly zero") {
    const Model toy = planted::identity_toy(4);
    const Lens lens(toy);
    CHECK(log_prob_increase(lens, DenseVector{1, 2, 3, 4}, DenseVector{0, 0, 0, 0}, 3) == 0.0);
    const Lens tiny_lens(tiny());
    const auto tr = forward(tiny(), std::vector<int>{0, 5, 6});
    CHECK(log_prob_increase(tiny_lens, tr.final_residual(), DenseVector(64, 0.0), 7) == 0.0);
}

TEST_CASE("four-token increase matches direct evaluation") {
    const Model toy = planted::identity_toy(4);
    const Lens lens(toy);
    const double expected = oracle_log_softmax({2, 1, 3, 6}, 3) - oracle_log_softmax({1, 2, 3, 4}, 3);
    CHECK(std::abs(expected - 0.368) < 1e-3);
    CHECK(std::abs(log_prob_increase(lens, DenseVector{1, 2, 3, 4}, DenseVector{1, -1, 0, 2}, 3) - expected) <= 1e-12);
}

TEST_CASE("antisymmetry and sign flip") {
    const Model toy = planted::identity_toy(4);
    const Lens lens(toy);
    const DenseVector x{1, 2, 3, 4}, v{6, 2, 2, 2};
    const double up = log_prob_increase(lens, x, v, 0);
    CHECK(std::abs(up + log_prob_increase(lens, add(x, v), scaled(v, -1.0), 0)) <= 1e-12);
    CHECK(up > 0.0);
    CHECK(log_prob_increase(lens, x, scaled(v, -1.0), 0) < 0.0);
}

TEST_CASE("layer importances telescope to the whole-stream change") {
    const Lens lens(tiny());
    for (std::size_t r = 0; r < tiny_corpus().size(); r += 17) {
        const auto& rec = tiny_corpus()[r];
        const auto tr = forward(tiny(), rec.tokens);
        double sum = 0.0;
        for (const auto& s : layer_importance(lens, tr, rec.answer)) sum += s.score;
        const double whole = lens.log_prob(tr.final_residual(), rec.answer) -
                             lens.log_prob(tr.embedding(tr.last_position()), rec.answer);
        CHECK(std::abs(sum - whole) <= 1e-9);
    }
}

TEST_CASE("target baselines") {
    const auto tr = forward(tiny(), std::vector<int>{0, 9, 10});
    const int T = tr.last_position();
    auto same = [](const DenseVector& a, std::span<const double> b) { return std::equal(a.begin(), a.end(), b.begin()); };
    CHECK(same(target_baseline(tr, NeuronRef::ffn(2, 0)), tr.ffn_input(2, T)));
    CHECK(same(target_baseline(tr, NeuronRef::attn(2, 1, 0)), tr.residual(2, T)));
    CHECK(same(target_baseline(tr, HeadRef{3, 0}), tr.residual(3, T)));
    CHECK(same(target_baseline(tr, LayerRef{1, Site::Ffn}), tr.ffn_input(1, T)));
}

TEST_CASE("method scores agree with direct per-neuron evaluation") {
    const Lens lens(tiny());
    const auto& rec = tiny_corpus()[3];
    const auto tr = forward(tiny(), rec.tokens);
    const auto records = score_all_methods(lens, tr, rec.answer, Site::Ffn, rec.id);
    CHECK(records.size() == 4u * 256u * 8u);
    for (std::size_t i = 0; i < records.size(); i += 8 * 37) {
        const auto ref = std::get<NeuronRef>(records[i].target);
        const auto c = neuron_contribution(tiny(), tr, ref);
        const auto base = target_baseline(tr, ref);
        const double m = c.coefficient;
        const double lp_x = lens.log_prob(add(base, c.vector), rec.answer);
        const double lp_b = lens.log_prob(base, rec.answer);
        const double inv_rank = 1.0 / lens.token_rank(c.subvalue, rec.answer);
        const std::array<double, 8> expected = {lp_x - lp_b,
                                                lens.log_prob(c.vector, rec.answer),
                                                std::exp(lp_x) - std::exp(lp_b),
                                                norm_l2(c.subvalue),
                                                std::abs(m),
                                                inv_rank,
                                                std::abs(m) * norm_l2(c.subvalue),
                                                std::abs(m) * inv_rank};
        for (std::size_t j = 0; j < 8; ++j) {
            CAPTURE(j);
            CHECK(records[i + j].method == kValueMethods[j]);
            CHECK(std::abs(records[i + j].score - expected[j]) <= 1e-9);
        }
    }
}

TEST_CASE("a silent neuron scores zero where the coefficient enters") {
    auto vm = planted::value_model(3);
    planted::set(vm.model.weights.layers[1].b1, 7, 0.0f); // fc1 row is zero too, so m = gelu(0) = 0
    const Lens lens(vm.model);
    const auto tr = forward(vm.model, vm.corpus[0].tokens);
    auto score = [&](Method m) {
        for (const auto& s : score_neurons(lens, tr, vm.answer, Site::Ffn, m)) {
            if (s.key == vm.planted) return s.score;
        }
        return std::nan("");
    };
    CHECK(score(Method::LogProbIncrease) == 0.0);
    CHECK(score(Method::ProbIncrease) == 0.0);
    CHECK(score(Method::Coefficient) == 0.0);
    CHECK(score(Method::CoeffNorm) == 0.0);
    CHECK(score(Method::CoeffInvRank) == 0.0);
    CHECK(std::abs(score(Method::LogProb) - std::log(1.0 / 16.0)) <= 1e-12);
    CHECK(std::abs(score(Method::Norm) - 2.0) <= 1e-6);
    CHECK(score(Method::InvRank) == 1.0);
}

TEST_CASE("planted value neuron: a finds it, d and e find their decoys") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto vm = planted::value_model(seed);
        const Lens lens(vm.model);
        for (const auto& rec : vm.corpus) {
            const auto tr = forward(vm.model, rec.tokens);
            auto scores = [&](Method m) { return score_neurons(lens, tr, vm.answer, Site::Ffn, m); };
            CHECK(rank_of(scores(Method::LogProbIncrease), vm.planted) == 1);
            CHECK(top_k(scores(Method::InvRank), 1)[0].score == 1.0);
            for (const auto& s : scores(Method::InvRank)) {
                if (s.key == vm.planted) CHECK(s.score == 1.0);
            }
            CHECK(rank_of(scores(Method::Norm), vm.norm_decoy) == 1);
            CHECK(rank_of(scores(Method::Coefficient), vm.coeff_decoy) == 1);
            CHECK(rank_of(scores(Method::Norm), vm.planted) > 1);
            CHECK(rank_of(scores(Method::Coefficient), vm.planted) > 1);
        }
    }
}

TEST_CASE("log-probability and log-probability-increase pick different neurons") {
    const Lens lens(tiny());
    int differing = 0;
    for (std::size_t r = 0; r < tiny_corpus().size(); r += 20) {
        const auto& rec = tiny_corpus()[r];
        const auto tr = forward(tiny(), rec.tokens);
        auto a = top_refs(score_neurons(lens, tr, rec.answer, Site::Ffn, Method::LogProbIncrease), 10);
        auto b = top_refs(score_neurons(lens, tr, rec.answer, Site::Ffn, Method::LogProb), 10);
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        if (a != b) ++differing;
    }
    CHECK(differing > 0);
}

TEST_CASE("attention-neuron contributions sum to the head output") {
    const auto tr = forward(tiny(), std::vector<int>{0, 100, 101, 102});
    for (int l = 0; l < 4; ++l) {
        for (int j = 0; j < 4; ++j) {
            DenseVector sum(64, 0.0);
            for (int k = 0; k < 16; ++k) axpy(1.0, neuron_contribution(tiny(), tr, NeuronRef::attn(l, j, k)).vector, sum);
            const auto h = tr.head_output(l, j, tr.last_position());
            for (std::size_t t = 0; t < 64; ++t) CHECK(std::abs(sum[t] - h[t]) <= 1e-9);
        }
    }
}

TEST_CASE("position-pinned attention neurons sum to the unpinned one") {
    const auto tr = forward(tiny(), std::vector<int>{0, 100, 101, 102});
    const auto whole = neuron_contribution(tiny(), tr, NeuronRef::attn(2, 3, 5)).coefficient;
    double sum = 0.0;
    for (int p = 0; p < 4; ++p) sum += neuron_contribution(tiny(), tr, NeuronRef::attn(2, 3, 5, p)).coefficient;
    CHECK(std::abs(sum - whole) <= 1e-12);
    CHECK_THROWS_AS(neuron_contribution(tiny(), tr, NeuronRef::attn(2, 3, 5, 4)), std::out_of_range);
}

TEST_CASE("segment curve") {
    const Lens lens(tiny());
    const auto& rec = tiny_corpus()[10];
    const auto tr = forward(tiny(), rec.tokens);
    const auto curve = segment_curve(lens, tr, rec.answer);
    CHECK(curve.points.size() == 61);
    for (int s = 0; s <= 60; ++s) CHECK(curve.points[static_cast<std::size_t>(s)].index == s);
    CHECK(curve.points[0].prob == lens.prob(tr.embedding(tr.last_position()), rec.answer));
    CHECK(curve.points[60].prob == lens.prob(tr.final_residual(), rec.answer));
    const double model_p = softmax_stable(tr.logits())[static_cast<std::size_t>(rec.answer)];
    CHECK(std::abs(curve.points[60].prob - model_p) <= 1e-12);
    for (const auto& p : curve.points) CHECK(std::abs(std::log(p.prob) - p.log_prob) <= 1e-9);
}

TEST_CASE("shared neurons") {
    const std::vector<NeuronRef> a{NeuronRef::ffn(0, 1), NeuronRef::ffn(1, 2)};
    const std::vector<std::vector<NeuronRef>> same{a, a, a};
    CHECK(shared_neurons(same).refs == a);
    const std::vector<std::vector<NeuronRef>> disjoint{{NeuronRef::ffn(0, 1)}, {NeuronRef::ffn(0, 2)}, {NeuronRef::ffn(0, 3)}};
    CHECK(shared_neurons(disjoint).count == 0);
    const std::vector<std::vector<NeuronRef>> half{{NeuronRef::ffn(0, 1)}, {NeuronRef::ffn(0, 1)}, {}, {}};
    CHECK(shared_neurons(half).count == 0); // exactly half is not more than half
    CHECK_THROWS_AS(shared_neurons(std::vector<std::vector<NeuronRef>>{}), std::invalid_argument);

    const auto vm = planted::value_model(5);
    const Lens lens(vm.model);
    std::vector<std::vector<NeuronRef>> sets;
    for (const auto& rec : vm.corpus) {
        const auto tr = forward(vm.model, rec.tokens);
        sets.push_back(top_refs(score_neurons(lens, tr, vm.answer, Site::Ffn, Method::LogProbIncrease), 10));
    }
    const auto shared = shared_neurons(sets);
    CHECK(std::find(shared.refs.begin(), shared.refs.end(), vm.planted) != shared.refs.end());
}

TEST_CASE("scoring rejects an answer outside the vocabulary") {
    const Lens lens(tiny());
    const auto tr = forward(tiny(), std::vector<int>{0, 1});
    CHECK_THROWS_AS(score_neurons(lens, tr, 512, Site::Ffn, Method::LogProbIncrease), std::out_of_range);
    CHECK_THROWS_AS(score_neurons(lens, tr, 3, Site::Ffn, Method::QueryInnerProduct), std::invalid_argument);
}

}
