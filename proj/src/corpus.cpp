#include "neuron_probe/corpus.hpp"

#include "neuron_probe/forward.hpp"
#include "neuron_probe/parallel.hpp"

#include <json.hpp>

#include <fstream>
#include <set>

namespace neuron_probe {

CorpusError::CorpusError(const std::string& message, int line)
    : std::runtime_error(line > 0 ? "corpus line " + std::to_string(line) + ": " + message : "corpus: " + message),
      line_(line) {}

namespace {

KnowledgeRecord parse_record(const nlohmann::json& j, int line) {
    if (!j.is_object()) throw CorpusError("record must be a JSON object", line);
    auto need = [&](const char* key) -> const nlohmann::json& {
        if (!j.contains(key)) throw CorpusError(std::string("missing field '") + key + "'", line);
        return j.at(key);
    };
    KnowledgeRecord r;
    r.line = line;
    const auto& id = need("id");
    if (!id.is_string()) throw CorpusError("'id' must be a string", line);
    r.id = id.get<std::string>();

    const auto& tokens = need("tokens");
    if (!tokens.is_array() || tokens.empty()) throw CorpusError("'tokens' must be a nonempty array of ints", line);
    for (const auto& t : tokens) {
        if (!t.is_number_integer()) throw CorpusError("'tokens' must hold integers", line);
        r.tokens.push_back(t.get<int>());
    }

    const auto& answer = need("answer");
    if (answer.is_array()) throw CorpusError("multi-token answer; the answer must be a single token id", line);
    if (!answer.is_number_integer()) throw CorpusError("'answer' must be an integer token id", line);
    r.answer = answer.get<int>();

    const auto& type = need("type");
    if (!type.is_string() || type.get<std::string>().empty()) {
        throw CorpusError("'type' must be a nonempty string", line);
    }
    r.type = type.get<std::string>();

    if (j.contains("text")) {
        if (!j.at("text").is_string()) throw CorpusError("'text' must be a string", line);
        r.text = j.at("text").get<std::string>();
    }
    return r;
}

} // namespace

Corpus parse_corpus(std::istream& in) {
    Corpus corpus;
    std::string text;
    int line = 0;
    while (std::getline(in, text)) {
        ++line;
        if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw CorpusError(std::string("invalid JSON: ") + e.what(), line);
        }
        corpus.push_back(parse_record(j, line));
    }
    return corpus;
}

Corpus load_corpus(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw CorpusError("cannot open " + path.string(), 0);
    return parse_corpus(in);
}

void validate(const Corpus& corpus, const ModelSpec& spec) {
    std::set<std::string> ids;
    for (const auto& r : corpus) {
        if (!ids.insert(r.id).second) throw CorpusError("duplicate id '" + r.id + "'", r.line);
        if (r.answer < 0 || r.answer >= spec.n_vocab) {
            throw CorpusError("answer id " + std::to_string(r.answer) + " outside vocabulary of " +
                                  std::to_string(spec.n_vocab),
                              r.line);
        }
        for (int t : r.tokens) {
            if (t < 0 || t >= spec.n_vocab) {
                throw CorpusError("token id " + std::to_string(t) + " outside vocabulary of " +
                                      std::to_string(spec.n_vocab),
                                  r.line);
            }
        }
    }
}

std::map<std::string, std::size_t> type_histogram(const Corpus& corpus) {
    std::map<std::string, std::size_t> h;
    for (const auto& r : corpus) ++h[r.type];
    return h;
}

std::map<std::string, std::size_t> load_manifest_histogram(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw CorpusError("cannot open manifest " + path.string(), 0);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw CorpusError(std::string("manifest is not valid JSON: ") + e.what(), 0);
    }
    if (!j.contains("types") || !j.at("types").is_object()) throw CorpusError("manifest lacks a 'types' object", 0);
    std::map<std::string, std::size_t> h;
    for (const auto& [k, v] : j.at("types").items()) h[k] = v.get<std::size_t>();
    return h;
}

std::map<std::string, std::vector<int>> answer_inventory(const Corpus& corpus) {
    std::map<std::string, std::set<int>> sets;
    for (const auto& r : corpus) sets[r.type].insert(r.answer);
    std::map<std::string, std::vector<int>> out;
    for (const auto& [t, s] : sets) out[t] = std::vector<int>(s.begin(), s.end());
    return out;
}

Corpus filter_predictable(const Model& model, const Corpus& records, const FilterOptions& options) {
    validate(records, model.spec);
    const auto inventory = answer_inventory(options.reference ? *options.reference : records);
    std::vector<char> keep(records.size(), 0);
    parallel_for(records.size(), [&](std::size_t i) {
        const auto& r = records[i];
        const auto trace = forward(model, r.tokens);
        const auto logits = trace.logits();
        const auto rank = descending_rank(logits, static_cast<std::size_t>(r.answer));
        bool ok = rank <= static_cast<std::size_t>(std::max(options.top_n, 0));
        if (ok && options.require_type_dominance) {
            auto it = inventory.find(r.type);
            if (it != inventory.end()) {
                for (int other : it->second) {
                    if (other == r.answer) continue;
                    if (descending_rank(logits, static_cast<std::size_t>(other)) < rank) {
                        ok = false;
                        break;
                    }
                }
            }
        }
        keep[i] = ok ? 1 : 0;
    });
    Corpus out;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (keep[i]) out.push_back(records[i]);
    }
    return out;
}

std::map<std::string, Corpus> split_by_type(const Corpus& corpus) {
    std::map<std::string, Corpus> out;
    for (const auto& r : corpus) out[r.type].push_back(r);
    return out;
}

} // namespace neuron_probe
