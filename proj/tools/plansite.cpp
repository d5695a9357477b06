// Command-line front end: one subcommand per experiment kind plus report,
// replay and couplet synthesis.

#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "plansite/corpus.hpp"
#include "plansite/phonology.hpp"
#include "plansite/runner.hpp"

namespace {

using namespace plansite;
using nlohmann::json;

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<bool> deterministic;
    std::string out;
    std::string model;
    bool resume = false;
    bool quiet = false;
};

int run_kind(runner::ExperimentKind kind, const Globals& g, const std::vector<std::string>& records) {
    json raw = json::object();
    std::filesystem::path base = std::filesystem::current_path();
    if (!g.config.empty()) {
        std::ifstream in(g.config);
        if (!in) throw IoError("cannot read config " + g.config);
        raw = json::parse(in);
        base = std::filesystem::absolute(g.config).parent_path();
    }
    if (raw.contains("kind") && raw["kind"].is_string() &&
        runner::experiment_kind_from_string(raw["kind"].get<std::string>()) != kind) {
        throw runner::ConfigError({"kind"}, {"kind: config says " + raw["kind"].get<std::string>() +
                                             " but the subcommand is " + runner::subcommand_name(kind)});
    }
    raw["kind"] = runner::to_string(kind);
    if (!records.empty()) {
        raw["records"] = json::array();
        for (const auto& r : records) raw["records"].push_back(std::filesystem::absolute(r).string());
    }
    runner::Overrides ov;
    ov.seed = g.seed;
    ov.deterministic = g.deterministic;
    if (!g.out.empty()) ov.out = std::filesystem::absolute(g.out).string();
    if (!g.model.empty()) ov.model = g.model;
    const auto cfg = runner::parse_config(raw, base, ov);
    const auto outcome = runner::run(cfg, {g.resume, g.quiet});
    std::cout << "record: " << outcome.record_path.string() << "\n"
              << "cells executed: " << outcome.executed << ", skipped: " << outcome.skipped
              << ", failed: " << outcome.failed << "\n";
    for (const auto& f : outcome.files) std::cout << "wrote " << f << "\n";
    return outcome.failed ? 1 : 0;
}

int replay_cmd(const std::string& record_path, const std::vector<std::string>& cells, bool all) {
    std::filesystem::path p = record_path;
    if (std::filesystem::is_directory(p)) p /= "record.jsonl";
    const auto record = runner::load_record(p);
    std::vector<std::string> ids = cells;
    if (all) {
        for (const auto& c : record.latest()) ids.push_back(c.cell_id);
    }
    if (ids.empty()) throw ValidationError("replay: name a --cell or pass --all");
    int status = 0;
    for (const auto& id : ids) {
        try {
            const auto r = runner::replay(record, id);
            std::cout << id << ": " << (r.identical ? "identical" : (r.within_interval ? "within interval" : "differs"));
            if (!r.deterministic) std::cout << " (non-deterministic record, informational)";
            std::cout << "\n";
            if (!r.identical && r.deterministic) status = 1;
        } catch (const Error& e) {
            std::cout << id << ": " << e.what() << "\n";
            status = 1;
        }
    }
    return status;
}

int synth_cmd(const std::string& provider, const std::string& fixture, const std::string& host, int port,
              const std::string& model, std::size_t count, const std::vector<std::string>& topics,
              const std::string& lexicon_path, const std::string& out) {
    const auto lex = phonology::load_pronouncing_lexicon(lexicon_path.empty() ? data_dir() + "/cmudict-0.7b" : lexicon_path);
    std::unique_ptr<corpus::TextProvider> p;
    if (provider == "fixture") {
        if (fixture.empty()) throw ValidationError("--fixture is required with --provider fixture");
        p = std::make_unique<corpus::FixtureProvider>(fixture);
    } else {
        corpus::HttpProvider::Options o;
        o.host = host;
        o.port = port;
        o.model = model;
        p = std::make_unique<corpus::HttpProvider>(o);
    }
    corpus::SynthesisSpec spec;
    spec.count = count;
    if (!topics.empty()) spec.topics = topics;
    const auto rep = corpus::synthesize_couplets(*p, spec, lex);
    corpus::save_couplets(out, rep.couplets);
    std::cout << "accepted " << rep.couplets.size() << " of " << rep.attempts << " attempts ("
              << rep.provider_failures << " provider failures, " << rep.rejected.size() << " rejected)\n";
    for (const auto& r : rep.rejected) std::cout << "  rejected " << r.record_id << ": " << r.reason << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"plansite: probing and patching experiments on rhyme planning"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "experiment config (JSON)")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "base seed for sampling, bootstrap and probe training");
    app.add_option("--out", g.out, "output directory");
    app.add_option("--model", g.model, "model id override");
    app.add_flag("--deterministic,!--no-deterministic", g.deterministic, "record runs as deterministic");
    app.add_flag("--resume", g.resume, "skip cells already completed in the output record");
    app.add_flag("-q,--quiet", g.quiet, "no per-cell progress");

    std::vector<std::pair<CLI::App*, runner::ExperimentKind>> kinds;
    std::vector<std::string> report_records;
    for (auto k : {runner::ExperimentKind::probe_pile, runner::ExperimentKind::probe_couplets,
                   runner::ExperimentKind::patch_sweep, runner::ExperimentKind::all_layers,
                   runner::ExperimentKind::baselines, runner::ExperimentKind::head_rank,
                   runner::ExperimentKind::topk_heads, runner::ExperimentKind::path_patch,
                   runner::ExperimentKind::mlp_control, runner::ExperimentKind::steer_fit,
                   runner::ExperimentKind::steer_sweep, runner::ExperimentKind::report}) {
        auto* sub = app.add_subcommand(runner::subcommand_name(k), "run a " + runner::to_string(k) + " experiment");
        if (k == runner::ExperimentKind::report) {
            sub->add_option("records", report_records, "run record files or run directories");
        }
        kinds.emplace_back(sub, k);
    }

    auto* rep = app.add_subcommand("replay", "recompute cells of a run record and compare");
    std::string record_path;
    std::vector<std::string> cells;
    bool all = false;
    rep->add_option("record", record_path, "record.jsonl or its directory")->required();
    rep->add_option("--cell", cells, "cell id (repeatable)");
    rep->add_flag("--all", all, "replay every cell");

    auto* syn = app.add_subcommand("synth-couplets", "generate couplets through a text provider");
    std::string provider = "http", fixture, host = "127.0.0.1", model_name = "default", lexicon, syn_out;
    int port = 8080;
    std::size_t count = 10;
    std::vector<std::string> topics;
    syn->add_option("--provider", provider, "http or fixture")->check(CLI::IsMember({"http", "fixture"}));
    syn->add_option("--fixture", fixture, "canned responses (JSON lines)");
    syn->add_option("--host", host);
    syn->add_option("--port", port);
    syn->add_option("--provider-model", model_name);
    syn->add_option("--count", count);
    syn->add_option("--topic", topics);
    syn->add_option("--lexicon", lexicon);
    syn->add_option("--output", syn_out, "couplet JSON-lines output")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        for (const auto& [sub, kind] : kinds) {
            if (sub->parsed()) return run_kind(kind, g, report_records);
        }
        if (rep->parsed()) return replay_cmd(record_path, cells, all);
        if (syn->parsed()) return synth_cmd(provider, fixture, host, port, model_name, count, topics, lexicon, syn_out);
    } catch (const runner::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
