#pragma once

#include "neuron_probe/corpus.hpp"
#include "neuron_probe/lens.hpp"
#include "neuron_probe/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace neuron_probe {

/// Everything a CLI run depends on. The output directory is deliberately left
/// out of the echo so two runs writing to different places compare equal.
struct RunConfig {
    std::string command;
    std::filesystem::path model;
    std::filesystem::path corpus;
    std::filesystem::path tokenizer;
    std::filesystem::path out;
    std::string method = "log_prob_increase";
    int k = 10;
    int attn_k = 0;
    int query_n = 1000;
    int ffn_value_k = 100; // FFN value neurons per sentence whose query layers are summed
    int value_k = 200;     // attention value neurons per sentence feeding query scores
    bool fold_norm = false;
    bool absolute = false; // query-layers: sum absolute query scores
    std::optional<double> head_frac; // unset: 0.01, skipping the matrix when that selects no head
    std::optional<bool> proj_norm; // unset: the model's own flag
    std::uint64_t seed = 0;
    bool filter = true;
    std::string neuron;  // project
    std::string targets; // intervene: comma-separated neuron/head refs
    int top = 10;        // project: tokens listed

    /// Throws std::invalid_argument for negative budgets, an unknown command,
    /// or a missing input file.
    void validate() const;
    std::vector<std::pair<std::string, std::string>> echo() const;
};

/// The commands, in help order.
const std::vector<std::string>& command_names();

using Cell = std::variant<std::string, long long, double>;

struct Table {
    std::string name;
    std::vector<std::string> columns;
    std::vector<std::vector<Cell>> rows;

    void add(std::vector<Cell> row);
};

struct Report {
    std::string command;
    std::vector<std::pair<std::string, std::string>> config;
    std::vector<std::pair<std::string, std::string>> notes;
    std::vector<std::string> warnings;
    std::vector<Table> tables;

    const Table& table(const std::string& name) const;
};

/// Fixed six-decimal rendering; negative zero prints as zero.
std::string format_cell(const Cell& c);

/// "# key=value" header lines (config, then notes and warnings), then the table.
void write_csv(std::ostream& out, const Report& report, const Table& table);
nlohmann::ordered_json to_json(const Report& report);

/// Writes <command>.json and one <table>.csv per table; returns the file names.
std::vector<std::string> write_report(const Report& report, const std::filesystem::path& dir);

/// Loaded model, corpus (filtered when the config asks for it) and tokenizer.
struct Inputs {
    Model model;
    Corpus corpus;
    std::size_t corpus_loaded = 0;
    std::optional<Tokenizer> tokenizer;
};
Inputs load_inputs(const RunConfig& config);

Report cmd_evaluate(const Inputs& in, const RunConfig& config);
Report cmd_compare_methods(const Inputs& in, const RunConfig& config);
Report cmd_top_layers(const Inputs& in, const RunConfig& config);
Report cmd_top_heads(const Inputs& in, const RunConfig& config);
Report cmd_top_neurons(const Inputs& in, const RunConfig& config);
Report cmd_query_layers(const Inputs& in, const RunConfig& config);
Report cmd_query_neurons(const Inputs& in, const RunConfig& config);
Report cmd_intervene(const Inputs& in, const RunConfig& config);
Report cmd_curves(const Inputs& in, const RunConfig& config);
Report cmd_project(const Inputs& in, const RunConfig& config);
Report cmd_shared(const Inputs& in, const RunConfig& config);

/// Validates, loads and dispatches on config.command.
Report run_command(const RunConfig& config);

} // namespace neuron_probe
