#include "neuron_probe/corpus.hpp"
#include "neuron_probe/forward.hpp"
#include "planted.hpp"

#include <doctest.h>

#include <sstream>

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

Corpus parse(const std::string& text) {
    std::istringstream in(text);
    return parse_corpus(in);
}

int error_line(const std::string& text, const ModelSpec* spec = nullptr) {
    try {
        const auto c = parse(text);
        if (spec) validate(c, *spec);
    } catch (const CorpusError& e) {
        return e.line();
    }
    return -1;
}

} // namespace

TEST_SUITE("corpus") {

TEST_CASE("empty input gives an empty corpus") {
    CHECK(parse("").empty());
    CHECK(parse("\n\n  \n").empty());
}

TEST_CASE("records parse with their line numbers") {
    const auto c = parse("{\"id\":\"x\",\"tokens\":[1,2],\"answer\":3,\"type\":\"color\",\"text\":\"t\"}\n\n"
                         "{\"id\":\"y\",\"tokens\":[4],\"answer\":5,\"type\":\"month\"}\n");
    REQUIRE(c.size() == 2);
    CHECK(c[0].tokens == std::vector<int>{1, 2});
    CHECK(c[0].text == "t");
    CHECK(c[1].line == 3);
    CHECK(c[1].type == "month");
}

TEST_CASE("answer outside the vocabulary names its line") {
    ModelSpec spec;
    spec.n_vocab = 10;
    const std::string text = "{\"id\":\"a\",\"tokens\":[1],\"answer\":3,\"type\":\"color\"}\n"
                             "{\"id\":\"b\",\"tokens\":[1],\"answer\":10,\"type\":\"color\"}\n";
    CHECK(error_line(text, &spec) == 2);
    try {
        validate(parse(text), spec);
    } catch (const CorpusError& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
}

TEST_CASE("schema violations") {
    CHECK(error_line("{\"id\":\"a\",\"tokens\":[1],\"answer\":[3,4],\"type\":\"color\"}") == 1);
    try {
        parse("{\"id\":\"a\",\"tokens\":[1],\"answer\":[3,4],\"type\":\"color\"}");
    } catch (const CorpusError& e) {
        CHECK(std::string(e.what()).find("multi-token") != std::string::npos);
    }
    CHECK(error_line("\n{\"id\":\"a\",\"tokens\":[],\"answer\":3,\"type\":\"c\"}") == 2);
    CHECK(error_line("{\"id\":\"a\",\"tokens\":[1],\"type\":\"c\"}") == 1);
    CHECK(error_line("not json") == 1);
    CHECK(error_line("{\"id\":\"a\",\"tokens\":[1],\"answer\":3,\"type\":\"\"}") == 1);
    ModelSpec spec;
    spec.n_vocab = 10;
    CHECK(error_line("{\"id\":\"a\",\"tokens\":[1],\"answer\":3,\"type\":\"c\"}\n"
                     "{\"id\":\"a\",\"tokens\":[1],\"answer\":3,\"type\":\"c\"}", &spec) == 2);
    CHECK(error_line("{\"id\":\"a\",\"tokens\":[1, 11],\"answer\":3,\"type\":\"c\"}", &spec) == 1);
}

TEST_CASE("bundled corpus matches its manifest") {
    CHECK(tiny_corpus().size() == 200);
    const auto hist = type_histogram(tiny_corpus());
    CHECK(hist.size() == 6);
    CHECK(hist == load_manifest_histogram(planted::data_dir() / "tiny" / "corpus_manifest.json"));
    CHECK_NOTHROW(validate(tiny_corpus(), tiny().spec));
    const auto inv = answer_inventory(tiny_corpus());
    for (const auto& [type, answers] : inv) {
        CHECK(std::is_sorted(answers.begin(), answers.end()));
        CHECK(std::adjacent_find(answers.begin(), answers.end()) == answers.end());
    }
}

TEST_CASE("filter keeps argmax records and drops rank 11") {
    Corpus c;
    const auto base = tiny_corpus()[0];
    const auto trace = forward(tiny(), base.tokens);
    std::vector<Scored<int>> scored;
    for (int t = 0; t < 512; ++t) scored.push_back({t, trace.logits()[static_cast<std::size_t>(t)]});
    const auto order = top_k(scored, 11);
    KnowledgeRecord top = base, eleventh = base;
    top.id = "top";
    top.answer = order[0].key;
    eleventh.id = "eleventh";
    eleventh.answer = order[10].key;
    c = {eleventh, top};
    FilterOptions opts;
    opts.require_type_dominance = false;
    const auto kept = filter_predictable(tiny(), c, opts);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].id == "top");
    opts.top_n = 11;
    CHECK(filter_predictable(tiny(), c, opts).size() == 2);
}

TEST_CASE("type dominance uses the answer inventory") {
    const auto base = tiny_corpus()[0];
    const auto trace = forward(tiny(), base.tokens);
    std::vector<Scored<int>> scored;
    for (int t = 0; t < 512; ++t) scored.push_back({t, trace.logits()[static_cast<std::size_t>(t)]});
    const auto order = top_k(scored, 3);
    // second-ranked token as answer, with the top token as a same-type competitor
    KnowledgeRecord second = base, other = tiny_corpus()[1];
    second.id = "second";
    second.type = "probe";
    second.answer = order[1].key;
    other.id = "competitor";
    other.type = "probe";
    other.answer = order[0].key;
    const Corpus c{second, other};
    FilterOptions opts;
    opts.reference = &c;
    const auto kept = filter_predictable(tiny(), Corpus{second}, opts);
    CHECK(kept.empty());
    opts.require_type_dominance = false;
    CHECK(filter_predictable(tiny(), Corpus{second}, opts).size() == 1);
}

TEST_CASE("filter is idempotent and order preserving") {
    const auto once = filter_predictable(tiny(), tiny_corpus());
    FilterOptions opts;
    opts.reference = &tiny_corpus();
    const auto twice = filter_predictable(tiny(), once, opts);
    REQUIRE(once.size() == twice.size());
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(once[i].id == twice[i].id);
    std::size_t j = 0;
    for (const auto& r : tiny_corpus()) {
        if (j < once.size() && once[j].id == r.id) ++j;
    }
    CHECK(j == once.size());
}

TEST_CASE("tiny model keeps at least 90 percent of its corpus") {
    const auto kept = filter_predictable(tiny(), tiny_corpus());
    CHECK(static_cast<double>(kept.size()) >= 0.9 * static_cast<double>(tiny_corpus().size()));
}

TEST_CASE("split by type") {
    const auto by = split_by_type(tiny_corpus());
    CHECK(by.size() == 6);
    std::size_t total = 0;
    for (const auto& [t, c] : by) {
        total += c.size();
        for (const auto& r : c) CHECK(r.type == t);
    }
    CHECK(total == tiny_corpus().size());
}

TEST_CASE("missing files") {
    CHECK_THROWS_AS(load_corpus(planted::data_dir() / "nope.jsonl"), CorpusError);
    CHECK_THROWS_AS(load_manifest_histogram(planted::data_dir() / "nope.json"), CorpusError);
}

}
