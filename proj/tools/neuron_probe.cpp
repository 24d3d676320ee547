// neuron-probe: attribution reports for decoder-only transformers.

#include "neuron_probe/corpus.hpp"
#include "neuron_probe/model.hpp"
#include "neuron_probe/report.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>

namespace {

int fail(const std::string& kind, const std::string& message, int code) {
    nlohmann::ordered_json j;
    j["error"] = {{"type", kind}, {"message", message}};
    std::cerr << j.dump() << '\n';
    return code;
}

} // namespace

int main(int argc, char** argv) {
    using namespace neuron_probe;
    CLI::App app{"Neuron-level attribution reports for decoder-only transformers"};
    app.require_subcommand(1);

    RunConfig cfg;
    std::string proj_norm = "model";
    std::optional<double> head_frac;
    bool no_filter = false;

    for (const auto& name : command_names()) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--model", cfg.model, "weight file")->required();
        if (name != "project") sub->add_option("--corpus", cfg.corpus, "JSON-lines corpus")->required();
        sub->add_option("--tokenizer", cfg.tokenizer, "token -> id JSON");
        sub->add_option("--method", cfg.method, "method id or letter a-h, or random(<seed>)");
        sub->add_option("--k", cfg.k, "FFN neuron budget, or rows per ranked table");
        sub->add_option("--attn-k", cfg.attn_k, "attention neuron budget");
        sub->add_option("--query-n", cfg.query_n, "query neurons zeroed per sentence");
        sub->add_option("--ffn-value-k", cfg.ffn_value_k, "FFN value neurons per sentence for query layers");
        sub->add_option("--value-k", cfg.value_k, "attention value neurons per sentence for query scores");
        sub->add_flag("--fold-norm", cfg.fold_norm, "route subkeys through the sublayer normaliser");
        sub->add_flag("--abs", cfg.absolute, "sum absolute query scores per layer");
        sub->add_option("--head-frac", head_frac, "fraction of heads zeroed per knowledge type");
        sub->add_option("--proj-norm", proj_norm, "final norm before the unembedding")
            ->check(CLI::IsMember({"on", "off", "model"}));
        sub->add_option("--seed", cfg.seed, "seed of random baselines");
        sub->add_flag("--no-filter", no_filter, "keep records the model does not predict");
        sub->add_option("--neuron", cfg.neuron, "neuron label, e.g. f3-120 or a2.1-5");
        sub->add_option("--targets", cfg.targets, "comma-separated neuron/head labels to zero");
        sub->add_option("--top", cfg.top, "tokens listed by project");
        sub->add_option("--out", cfg.out, "output directory; JSON report to stdout when absent");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage", e.what(), 2);
    }

    cfg.command = app.get_subcommands().front()->get_name();
    if (proj_norm != "model") cfg.proj_norm = proj_norm == "on";
    cfg.head_frac = head_frac;
    cfg.filter = !no_filter;

    try {
        const Report report = run_command(cfg);
        if (cfg.out.empty()) {
            std::cout << to_json(report).dump(2) << '\n';
        } else {
            for (const auto& f : write_report(report, cfg.out)) std::cout << (cfg.out / f).string() << '\n';
        }
        for (const auto& w : report.warnings) std::cerr << "warning: " << w << '\n';
    } catch (const LoadError& e) {
        return fail("load:" + to_string(e.kind()), e.what(), 3);
    } catch (const CorpusError& e) {
        return fail("corpus", e.what(), 3);
    } catch (const std::invalid_argument& e) {
        return fail("invalid_argument", e.what(), 2);
    } catch (const std::out_of_range& e) {
        return fail("out_of_range", e.what(), 2);
    } catch (const std::exception& e) {
        return fail("runtime", e.what(), 1);
    }
    return 0;
}
