#include "neuron_probe/report.hpp"

#include "neuron_probe/attribution.hpp"
#include "neuron_probe/forward.hpp"
#include "neuron_probe/harness.hpp"
#include "neuron_probe/intervention.hpp"
#include "neuron_probe/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace neuron_probe {

namespace {

std::string fixed(double v, int precision = 6) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", precision, v);
    std::string s = buf;
    if (s.find_first_not_of("-0.") == std::string::npos && s.front() == '-') s.erase(0, 1);
    return s;
}

std::string on_off(bool b) { return b ? "on" : "off"; }

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(text);
    while (std::getline(in, item, ',')) {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

bool needs_corpus(const std::string& command) { return command != "project"; }

Report start(const std::string& command, const Inputs& in, const RunConfig& config) {
    Report r;
    r.command = command;
    r.config = config.echo();
    const Lens lens(in.model, config.proj_norm);
    r.notes.emplace_back("projection_final_norm", on_off(lens.final_norm()));
    if (needs_corpus(command)) {
        r.notes.emplace_back("records", std::to_string(in.corpus.size()) + " of " + std::to_string(in.corpus_loaded));
        if (config.filter) r.notes.emplace_back("type_dominance", "on");
    }
    return r;
}

EvalMetrics require_eval(const Model& model, const Corpus& corpus) {
    if (corpus.empty()) throw std::invalid_argument("no records left to evaluate");
    return evaluate(model, corpus);
}

std::vector<Cell> metric_cells(const EvalMetrics& m) { return {m.mrr, m.prob, m.logp}; }

void append(std::vector<Cell>& row, const std::vector<Cell>& more) { row.insert(row.end(), more.begin(), more.end()); }

/// Per-sentence scores computed in parallel, summed in sentence order.
template <typename Key, typename Fn>
std::vector<Scored<Key>> summed_over(const Corpus& corpus, Fn&& per_sentence) {
    std::vector<std::vector<Scored<Key>>> parts(corpus.size());
    parallel_for(corpus.size(), [&](std::size_t i) { parts[i] = per_sentence(corpus[i]); });
    std::map<Key, double> sums;
    for (const auto& part : parts) {
        for (const auto& s : part) sums[s.key] += s.score;
    }
    std::vector<Scored<Key>> out;
    for (const auto& [k, v] : sums) out.push_back({k, v});
    return out;
}

template <typename Key>
void add_ranked(Table& t, const std::string& type, std::vector<Scored<Key>> scores, int k, Report& report) {
    const auto requested = static_cast<std::size_t>(k);
    if (requested > scores.size()) {
        report.warnings.push_back(type + ": k=" + std::to_string(k) + " exceeds the " +
                                  std::to_string(scores.size()) + " candidates");
    }
    long long rank = 0;
    for (const auto& s : top_k(std::move(scores), requested)) t.add({type, ++rank, to_string(s.key), s.score});
}

} // namespace

// ---------------------------------------------------------------------------

const std::vector<std::string>& command_names() {
    static const std::vector<std::string> names = {"evaluate",      "compare-methods", "top-layers", "top-heads",
                                                   "top-neurons",   "query-layers",    "query-neurons",
                                                   "intervene",     "curves",          "project",    "shared"};
    return names;
}

void RunConfig::validate() const {
    const auto& names = command_names();
    if (std::find(names.begin(), names.end(), command) == names.end()) {
        throw std::invalid_argument("unknown command '" + command + "'");
    }
    if (k < 0 || attn_k < 0 || query_n < 0 || value_k < 0 || ffn_value_k < 0 || top < 0) {
        throw std::invalid_argument("budgets must be >= 0");
    }
    if (head_frac && !(*head_frac >= 0.0 && *head_frac <= 1.0)) throw std::invalid_argument("head fraction must lie in [0, 1]");
    auto exists = [](const std::filesystem::path& p, const char* what) {
        if (p.empty()) throw std::invalid_argument(std::string("missing --") + what);
        if (!std::filesystem::exists(p)) throw std::invalid_argument(std::string(what) + " not found: " + p.string());
    };
    exists(model, "model");
    if (needs_corpus(command)) exists(corpus, "corpus");
    if (!tokenizer.empty()) exists(tokenizer, "tokenizer");
    if (command == "project" && neuron.empty()) throw std::invalid_argument("project needs --neuron");
}

std::vector<std::pair<std::string, std::string>> RunConfig::echo() const {
    return {
        {"command", command},
        {"model", model.string()},
        {"corpus", corpus.string()},
        {"tokenizer", tokenizer.string()},
        {"method", method},
        {"k", std::to_string(k)},
        {"attn_k", std::to_string(attn_k)},
        {"query_n", std::to_string(query_n)},
        {"ffn_value_k", std::to_string(ffn_value_k)},
        {"value_k", std::to_string(value_k)},
        {"fold_norm", on_off(fold_norm)},
        {"abs", on_off(absolute)},
        {"head_frac", head_frac ? fixed(*head_frac) : "default"},
        {"proj_norm", proj_norm ? on_off(*proj_norm) : "model"},
        {"seed", std::to_string(seed)},
        {"filter", on_off(filter)},
        {"neuron", neuron},
        {"targets", targets},
        {"top", std::to_string(top)},
    };
}

void Table::add(std::vector<Cell> row) {
    if (row.size() != columns.size()) throw std::logic_error("table " + name + ": row width mismatch");
    rows.push_back(std::move(row));
}

const Table& Report::table(const std::string& name) const {
    for (const auto& t : tables) {
        if (t.name == name) return t;
    }
    throw std::out_of_range("report has no table '" + name + "'");
}

std::string format_cell(const Cell& c) {
    if (const auto* s = std::get_if<std::string>(&c)) return *s;
    if (const auto* i = std::get_if<long long>(&c)) return std::to_string(*i);
    return fixed(std::get<double>(c));
}

void write_csv(std::ostream& out, const Report& report, const Table& table) {
    auto field = [](const std::string& s) {
        if (s.find_first_of(",\"\n") == std::string::npos) return s;
        std::string q = "\"";
        for (char ch : s) {
            if (ch == '"') q += '"';
            q += ch;
        }
        return q + "\"";
    };
    for (const auto& [k, v] : report.config) out << "# " << k << '=' << v << '\n';
    for (const auto& [k, v] : report.notes) out << "# note." << k << '=' << v << '\n';
    for (const auto& w : report.warnings) out << "# warning=" << w << '\n';
    for (std::size_t i = 0; i < table.columns.size(); ++i) out << (i ? "," : "") << field(table.columns[i]);
    out << '\n';
    for (const auto& row : table.rows) {
        for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << field(format_cell(row[i]));
        out << '\n';
    }
}

nlohmann::ordered_json to_json(const Report& report) {
    using oj = nlohmann::ordered_json;
    oj j;
    j["command"] = report.command;
    oj config = oj::object();
    for (const auto& [k, v] : report.config) config[k] = v;
    j["config"] = config;
    oj notes = oj::object();
    for (const auto& [k, v] : report.notes) notes[k] = v;
    j["notes"] = notes;
    j["warnings"] = report.warnings;
    oj tables = oj::object();
    for (const auto& t : report.tables) {
        oj rows = oj::array();
        for (const auto& row : t.rows) {
            oj r = oj::object();
            for (std::size_t i = 0; i < row.size(); ++i) {
                std::visit([&](const auto& v) { r[t.columns[i]] = v; }, row[i]);
            }
            rows.push_back(r);
        }
        tables[t.name] = {{"columns", t.columns}, {"rows", rows}};
    }
    j["tables"] = tables;
    return j;
}

std::vector<std::string> write_report(const Report& report, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::vector<std::string> files;
    auto write = [&](const std::string& name, const auto& body) {
        std::ofstream out(dir / name, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + (dir / name).string());
        body(out);
        files.push_back(name);
    };
    write(report.command + ".json", [&](std::ostream& out) { out << to_json(report).dump(2) << '\n'; });
    for (const auto& t : report.tables) {
        write(t.name + ".csv", [&](std::ostream& out) { write_csv(out, report, t); });
    }
    return files;
}

Inputs load_inputs(const RunConfig& config) {
    Inputs in;
    in.model = load_model(config.model);
    if (!config.tokenizer.empty()) in.tokenizer = Tokenizer::load(config.tokenizer);
    if (needs_corpus(config.command)) {
        Corpus all = load_corpus(config.corpus);
        validate(all, in.model.spec);
        in.corpus_loaded = all.size();
        in.corpus = config.filter ? filter_predictable(in.model, all) : std::move(all);
    }
    return in;
}

// ---------------------------------------------------------------------------

Report cmd_evaluate(const Inputs& in, const RunConfig& config) {
    Report r = start("evaluate", in, config);
    Table t{"evaluate", {"type", "count", "mrr", "prob", "logp"}, {}};
    for (const auto& [type, corpus] : split_by_type(in.corpus)) {
        std::vector<Cell> row{type, static_cast<long long>(corpus.size())};
        append(row, metric_cells(evaluate(in.model, corpus)));
        t.add(row);
    }
    std::vector<Cell> all{std::string("all"), static_cast<long long>(in.corpus.size())};
    append(all, metric_cells(require_eval(in.model, in.corpus)));
    t.add(all);
    r.tables.push_back(std::move(t));
    return r;
}

Report cmd_compare_methods(const Inputs& in, const RunConfig& config) {
    Report r = start("compare-methods", in, config);
    const std::vector<std::string> cols = {"row",       "method",     "mrr",       "prob",
                                           "logp",      "delta_mrr",  "delta_prob", "delta_logp"};
    Table t{"compare_methods", cols, {}};
    const auto before = require_eval(in.model, in.corpus);
    std::vector<Cell> o{std::string("o"), std::string("original")};
    append(o, metric_cells(before));
    append(o, {0.0, 0.0, 0.0});
    t.add(o);
    ExperimentConfig ec;
    ec.budget = {config.k, config.attn_k};
    ec.final_norm = config.proj_norm;
    for (Method m : kValueMethods) {
        ec.selector = Selector::by(m);
        const auto res = run_experiment(in.model, in.corpus, ec);
        std::vector<Cell> row{std::string(1, method_letter(m)), std::string(method_id(m))};
        append(row, metric_cells(res.after));
        append(row, metric_cells(res.delta));
        t.add(row);
    }
    r.tables.push_back(std::move(t));

    Table rnd{"random_baseline", cols, {}};
    ec.selector = Selector::random(config.seed);
    const auto res = run_experiment(in.model, in.corpus, ec);
    std::vector<Cell> row{std::string("random"), ec.selector.label()};
    append(row, metric_cells(res.after));
    append(row, metric_cells(res.delta));
    rnd.add(row);
    r.tables.push_back(std::move(rnd));
    return r;
}

Report cmd_top_layers(const Inputs& in, const RunConfig& config) {
    Report r = start("top-layers", in, config);
    const Lens lens(in.model, config.proj_norm);
    Table top{"top_layers", {"type", "rank", "layer", "score"}, {}};
    Table all{"layer_sums", {"type", "layer", "score"}, {}};
    for (const auto& [type, corpus] : split_by_type(in.corpus)) {
        auto sums = summed_over<LayerRef>(corpus, [&](const KnowledgeRecord& rec) {
            return layer_importance(lens, forward(in.model, rec.tokens), rec.answer);
        });
        for (const auto& s : sums) all.add({type, to_string(s.key), s.score});
        add_ranked(top, type, std::move(sums), config.k, r);
    }
    r.tables.push_back(std::move(top));
    r.tables.push_back(std::move(all));
    return r;
}

Report cmd_top_heads(const Inputs& in, const RunConfig& config) {
    Report r = start("top-heads", in, config);
    const Lens lens(in.model, config.proj_norm);
    Table top{"top_heads", {"type", "rank", "head", "score"}, {}};
    for (const auto& [type, corpus] : split_by_type(in.corpus)) {
        auto sums = summed_over<HeadRef>(corpus, [&](const KnowledgeRecord& rec) {
            return head_importance(lens, forward(in.model, rec.tokens), rec.answer);
        });
        add_ranked(top, type, std::move(sums), config.k, r);
    }
    r.tables.push_back(std::move(top));

    const auto by_type = split_by_type(in.corpus);
    const int total = in.model.spec.n_layer * in.model.spec.n_head;
    const double frac = config.head_frac.value_or(0.01);
    if (by_type.size() < 2) {
        r.warnings.push_back("cross-knowledge matrix needs at least two knowledge types; skipped");
    } else if (!config.head_frac && std::floor(frac * total + 1e-9) < 1.0) {
        r.warnings.push_back("default head fraction selects no head of " + std::to_string(total) +
                             "; cross-knowledge matrix skipped (pass --head-frac)");
    } else {
        const auto ck = cross_knowledge_heads(in.model, by_type, frac, config.proj_norm);
        r.notes.emplace_back("head_biases", "query/key/value biases of intervened heads zeroed; output bias kept");
        r.notes.emplace_back("heads_per_type", std::to_string(ck.heads_per_type));
        Table cross{"cross_knowledge", {"source", "target", "mrr_decrease_pct", "prob_decrease_pct"}, {}};
        Table heads{"cross_knowledge_heads", {"source", "rank", "head"}, {}};
        for (std::size_t s = 0; s < ck.types.size(); ++s) {
            for (std::size_t t = 0; t < ck.types.size(); ++t) {
                cross.add({ck.types[s], ck.types[t], ck.decrease[s][t].mrr, ck.decrease[s][t].prob});
            }
            long long rank = 0;
            for (const auto& h : ck.heads.at(ck.types[s])) heads.add({ck.types[s], ++rank, to_string(h)});
        }
        r.tables.push_back(std::move(cross));
        r.tables.push_back(std::move(heads));
    }
    return r;
}

Report cmd_top_neurons(const Inputs& in, const RunConfig& config) {
    Report r = start("top-neurons", in, config);
    const Lens lens(in.model, config.proj_norm);
    Table top{"top_neurons", {"type", "rank", "neuron", "score"}, {}};
    Table mass{"neuron_mass", {"type", "site", "all", "positive", "top100", "top200"}, {}};
    for (const auto& [type, corpus] : split_by_type(in.corpus)) {
        // per sentence: neuron scores of both sites, and the four mass sums per site
        std::vector<std::vector<Scored<NeuronRef>>> scores(corpus.size());
        std::vector<std::array<std::array<double, 4>, 2>> masses(corpus.size());
        parallel_for(corpus.size(), [&](std::size_t i) {
            const auto tr = forward(in.model, corpus[i].tokens);
            for (Site site : {Site::Attn, Site::Ffn}) {
                auto s = score_neurons(lens, tr, corpus[i].answer, site, Method::LogProbIncrease);
                auto& m = masses[i][static_cast<std::size_t>(site)];
                m = {0.0, 0.0, 0.0, 0.0};
                for (const auto& x : s) {
                    m[0] += x.score;
                    if (x.score > 0.0) m[1] += x.score;
                }
                for (const auto& x : top_k(s, 100)) m[2] += x.score;
                for (const auto& x : top_k(s, 200)) m[3] += x.score;
                scores[i].insert(scores[i].end(), s.begin(), s.end());
            }
        });
        std::map<NeuronRef, double> sums;
        for (const auto& part : scores) {
            for (const auto& s : part) sums[s.key] += s.score;
        }
        std::vector<Scored<NeuronRef>> summed;
        for (const auto& [k, v] : sums) summed.push_back({k, v});
        add_ranked(top, type, std::move(summed), config.k, r);
        for (Site site : {Site::Attn, Site::Ffn}) {
            std::array<double, 4> avg{};
            for (const auto& m : masses) {
                for (std::size_t j = 0; j < 4; ++j) avg[j] += m[static_cast<std::size_t>(site)][j];
            }
            for (double& v : avg) v /= static_cast<double>(corpus.size());
            mass.add({type, to_string(site), avg[0], avg[1], avg[2], avg[3]});
        }
    }
    r.tables.push_back(std::move(top));
    r.tables.push_back(std::move(mass));
    return r;
}

Report cmd_query_layers(const Inputs& in, const RunConfig& config) {
    Report r = start("query-layers", in, config);
    r.notes.emplace_back("query_scores", config.fold_norm ? "subkey folded through the normaliser" : "raw subkey");
    const Lens lens(in.model, config.proj_norm);
    const QueryOptions opts{config.fold_norm};
    Table ffn{"query_layers_ffn", {"type", "rank", "layer", "score"}, {}};
    Table attn{"query_layers_attn", {"type", "rank", "layer", "score"}, {}};
    for (const auto& [type, corpus] : split_by_type(in.corpus)) {
        std::vector<std::vector<Scored<LayerRef>>> f(corpus.size()), a(corpus.size());
        parallel_for(corpus.size(), [&](std::size_t i) {
            const auto tr = forward(in.model, corpus[i].tokens);
            const int w = corpus[i].answer;
            std::vector<QueryScore> qf, qa;
            for (const auto& v : top_k(score_neurons(lens, tr, w, Site::Ffn, Method::LogProbIncrease),
                                       static_cast<std::size_t>(config.ffn_value_k))) {
                auto s = query_scores_ffn(in.model, tr, v.key, opts);
                qf.insert(qf.end(), s.begin(), s.end());
            }
            for (const auto& v : top_k(score_neurons(lens, tr, w, Site::Attn, Method::LogProbIncrease),
                                       static_cast<std::size_t>(config.value_k))) {
                auto s = query_scores_attn(in.model, tr, v.key, opts);
                qa.insert(qa.end(), s.begin(), s.end());
            }
            f[i] = aggregate_by_layer(qf, config.absolute);
            a[i] = aggregate_by_layer(qa, config.absolute);
        });
        auto sum = [](const std::vector<std::vector<Scored<LayerRef>>>& parts) {
            std::map<LayerRef, double> m;
            for (const auto& p : parts) {
                for (const auto& s : p) m[s.key] += s.score;
            }
            std::vector<Scored<LayerRef>> out;
            for (const auto& [k, v] : m) out.push_back({k, v});
            return out;
        };
        add_ranked(ffn, type, sum(f), config.k, r);
        add_ranked(attn, type, sum(a), config.k, r);
    }
    r.tables.push_back(std::move(ffn));
    r.tables.push_back(std::move(attn));
    return r;
}

Report cmd_query_neurons(const Inputs& in, const RunConfig& config) {
    Report r = start("query-neurons", in, config);
    r.notes.emplace_back("query_scores", config.fold_norm ? "subkey folded through the normaliser" : "raw subkey");
    Table t{"query_neurons",
            {"selector", "n", "mrr_before", "prob_before", "logp_before", "mrr_after", "prob_after", "logp_after",
             "mrr_decrease_pct", "prob_decrease_pct"},
            {}};
    if (in.corpus.empty()) throw std::invalid_argument("no records left to evaluate");
    QueryExperimentConfig qc;
    qc.n_query = config.query_n;
    qc.attn_value_k = config.value_k;
    qc.options.fold_norm = config.fold_norm;
    qc.final_norm = config.proj_norm;
    auto add_row = [&](const std::string& label, const ExperimentResult& res) {
        const long long n = res.sentences.empty() ? 0 : static_cast<long long>(res.sentences.front().selected.size());
        std::vector<Cell> row{label, n};
        append(row, metric_cells(res.before));
        append(row, metric_cells(res.after));
        const auto d = percent_decrease(res.before, res.after);
        append(row, {d.mrr, d.prob});
        t.add(row);
        for (const auto& w : res.warnings) {
            if (std::find(r.warnings.begin(), r.warnings.end(), w) == r.warnings.end()) r.warnings.push_back(w);
        }
    };
    add_row("query", query_neuron_experiment(in.model, in.corpus, qc));
    qc.random_seed = config.seed;
    add_row(Selector::random(config.seed).label(), query_neuron_experiment(in.model, in.corpus, qc));
    r.tables.push_back(std::move(t));
    return r;
}

Report cmd_intervene(const Inputs& in, const RunConfig& config) {
    Report r = start("intervene", in, config);
    Table t{"intervene",
            {"label", "targets", "mrr_before", "prob_before", "logp_before", "mrr_after", "prob_after", "logp_after",
             "mrr_decrease_pct", "prob_decrease_pct"},
            {}};
    auto add_row = [&](const std::string& label, long long targets, const ExperimentResult& res) {
        std::vector<Cell> row{label, targets};
        append(row, metric_cells(res.before));
        append(row, metric_cells(res.after));
        const auto d = percent_decrease(res.before, res.after);
        append(row, {d.mrr, d.prob});
        t.add(row);
    };
    if (in.corpus.empty()) throw std::invalid_argument("no records left to evaluate");
    if (!config.targets.empty()) {
        InterventionSpec spec;
        for (const auto& item : split_list(config.targets)) {
            if (item.starts_with("h")) spec.targets.emplace_back(parse_head_ref(item));
            else spec.targets.emplace_back(parse_neuron_ref(item));
        }
        validate(spec, in.model.spec);
        std::string label;
        for (const auto& target : spec.targets) label += (label.empty() ? "" : "+") + to_string(target);
        spec.label = label;
        if (std::any_of(spec.targets.begin(), spec.targets.end(),
                        [](const auto& x) { return std::holds_alternative<HeadRef>(x); })) {
            r.notes.emplace_back("head_biases", "query/key/value biases of intervened heads zeroed; output bias kept");
        }
        add_row(spec.label, static_cast<long long>(spec.targets.size()), run_intervention(in.model, in.corpus, spec));
    } else {
        const auto selector = parse_selector(config.method, config.seed);
        if (!selector) throw std::invalid_argument("unknown method '" + config.method + "'");
        ExperimentConfig ec{*selector, {config.k, config.attn_k}, config.proj_norm};
        const long long n = config.k + config.attn_k;
        add_row(selector->label(), n, run_experiment(in.model, in.corpus, ec));
        if (!selector->is_random()) {
            ec.selector = Selector::random(config.seed);
            add_row(ec.selector.label(), n, run_experiment(in.model, in.corpus, ec));
        }
    }
    r.tables.push_back(std::move(t));
    return r;
}

Report cmd_curves(const Inputs& in, const RunConfig& config) {
    Report r = start("curves", in, config);
    if (in.corpus.empty()) throw std::invalid_argument("no records left to evaluate");
    const Lens lens(in.model, config.proj_norm);
    std::vector<SegmentCurve> curves(in.corpus.size());
    parallel_for(in.corpus.size(), [&](std::size_t i) {
        curves[i] = segment_curve(lens, forward(in.model, in.corpus[i].tokens), in.corpus[i].answer);
    });
    std::array<double, kSegmentSteps + 1> prob{}, logp{};
    for (const auto& c : curves) {
        for (std::size_t s = 0; s < prob.size(); ++s) {
            prob[s] += c.points[s].prob;
            logp[s] += c.points[s].log_prob;
        }
    }
    const auto n = static_cast<double>(curves.size());
    Table t{"curves", {"segment", "prob", "log_prob", "prob_increase", "log_prob_increase"}, {}};
    for (std::size_t s = 0; s < prob.size(); ++s) {
        t.add({static_cast<long long>(s), prob[s] / n, logp[s] / n, (prob[s] - prob[0]) / n, (logp[s] - logp[0]) / n});
    }
    r.tables.push_back(std::move(t));
    return r;
}

Report cmd_project(const Inputs& in, const RunConfig& config) {
    Report r = start("project", in, config);
    const NeuronRef ref = parse_neuron_ref(config.neuron);
    validate(ref, in.model.spec);
    const DenseVector v = ref.site == Site::Ffn ? ffn_subvalue(in.model, ref.layer, ref.index)
                                                : attn_subvalue(in.model, ref.layer, ref.head, ref.index);
    const Lens lens(in.model, config.proj_norm);
    const auto bs = lens.bs_values(v, to_string(ref));
    Table t{"project", {"rank", "token_id", "token", "bs_value"}, {}};
    long long rank = 0;
    for (int id : lens.top_token_ids(v, static_cast<std::size_t>(config.top))) {
        const std::string token = in.tokenizer && static_cast<std::size_t>(id) < in.tokenizer->size()
                                      ? in.tokenizer->token(id)
                                      : std::to_string(id);
        t.add({++rank, static_cast<long long>(id), token, bs.scores[static_cast<std::size_t>(id)]});
    }
    r.notes.emplace_back("neuron", to_string(ref));
    r.tables.push_back(std::move(t));
    return r;
}

Report cmd_shared(const Inputs& in, const RunConfig& config) {
    Report r = start("shared", in, config);
    const Lens lens(in.model, config.proj_norm);
    const QueryOptions opts{config.fold_norm};
    const auto k = static_cast<std::size_t>(config.k);
    Table counts{"shared_counts", {"type", "kind", "sentences", "top", "shared", "shared_pct"}, {}};
    Table list{"shared_neurons", {"type", "kind", "neuron"}, {}};
    for (const auto& [type, corpus] : split_by_type(in.corpus)) {
        std::vector<std::vector<NeuronRef>> values(corpus.size()), queries(corpus.size());
        parallel_for(corpus.size(), [&](std::size_t i) {
            const auto tr = forward(in.model, corpus[i].tokens);
            const int w = corpus[i].answer;
            auto s = score_neurons(lens, tr, w, Site::Ffn, Method::LogProbIncrease);
            auto sa = score_neurons(lens, tr, w, Site::Attn, Method::LogProbIncrease);
            s.insert(s.end(), sa.begin(), sa.end());
            for (const auto& x : top_k(std::move(s), k)) values[i].push_back(x.key);
            auto q = query_neuron_scores(in.model, tr, w, config.value_k, opts, config.proj_norm);
            for (const auto& x : top_k(std::move(q), k)) queries[i].push_back(x.key);
        });
        for (const auto& [kind, sets] : {std::pair<std::string, const std::vector<std::vector<NeuronRef>>*>{"value", &values},
                                         {"query", &queries}}) {
            const auto shared = shared_neurons(*sets);
            const double pct = k == 0 ? 0.0 : 100.0 * static_cast<double>(shared.count) / static_cast<double>(k);
            counts.add({type, kind, static_cast<long long>(corpus.size()), static_cast<long long>(k),
                        static_cast<long long>(shared.count), pct});
            for (const auto& ref : shared.refs) list.add({type, kind, to_string(ref)});
        }
    }
    r.tables.push_back(std::move(counts));
    r.tables.push_back(std::move(list));
    return r;
}

Report run_command(const RunConfig& config) {
    config.validate();
    const Inputs in = load_inputs(config);
    const auto& c = config.command;
    if (c == "evaluate") return cmd_evaluate(in, config);
    if (c == "compare-methods") return cmd_compare_methods(in, config);
    if (c == "top-layers") return cmd_top_layers(in, config);
    if (c == "top-heads") return cmd_top_heads(in, config);
    if (c == "top-neurons") return cmd_top_neurons(in, config);
    if (c == "query-layers") return cmd_query_layers(in, config);
    if (c == "query-neurons") return cmd_query_neurons(in, config);
    if (c == "intervene") return cmd_intervene(in, config);
    if (c == "curves") return cmd_curves(in, config);
    if (c == "project") return cmd_project(in, config);
    return cmd_shared(in, config);
}

} // namespace neuron_probe
