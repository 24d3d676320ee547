#pragma once

#include "neuron_probe/model.hpp"

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace neuron_probe {

/// One query with a single-token answer. `type` is one of language, capital,
/// country, color, number, month, or any other free label.
struct KnowledgeRecord {
    std::string id;
    std::vector<int> tokens;
    int answer = 0;
    std::string type;
    std::string text;
    int line = 0; // 1-based source line, 0 when built in memory
};

using Corpus = std::vector<KnowledgeRecord>;

/// Schema or model-compatibility problem, tagged with the source line when known.
class CorpusError : public std::runtime_error {
public:
    CorpusError(const std::string& message, int line);
    int line() const { return line_; }

private:
    int line_;
};

/// Reads JSON lines {"id", "tokens", "answer", "type", "text"?}. Blank lines are
/// skipped. An array-valued answer is rejected as a multi-token answer.
Corpus load_corpus(const std::filesystem::path& path);
Corpus parse_corpus(std::istream& in);

/// Checks token and answer ids against the model and that ids are unique.
void validate(const Corpus& corpus, const ModelSpec& spec);

/// Per-type record counts in label order.
std::map<std::string, std::size_t> type_histogram(const Corpus& corpus);

/// Per-type counts read from a manifest {"types": {label: count}, ...}.
std::map<std::string, std::size_t> load_manifest_histogram(const std::filesystem::path& path);

/// Distinct answer ids per type.
std::map<std::string, std::vector<int>> answer_inventory(const Corpus& corpus);

struct FilterOptions {
    int top_n = 10;
    /// Also require w to outrank every other answer of the same type. The
    /// comparison set is the answer inventory of `reference` (the input corpus
    /// when null), so re-filtering a filtered corpus against the same reference
    /// is a no-op.
    bool require_type_dominance = true;
    const Corpus* reference = nullptr;
};

/// Keeps records the model predicts well, in input order.
Corpus filter_predictable(const Model& model, const Corpus& records, const FilterOptions& options = {});

/// Groups records by type, label order.
std::map<std::string, Corpus> split_by_type(const Corpus& corpus);

} // namespace neuron_probe
