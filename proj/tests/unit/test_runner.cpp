#include <filesystem>
#include <fstream>
#include <sstream>

#include <doctest.h>

#include "plansite/common.hpp"
#include "plansite/runner.hpp"

using namespace plansite;
using namespace plansite::runner;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("plansite_runner_" + name);
    fs::remove_all(p);
    return p;
}

json sweep_config(const fs::path& out) {
    return {{"kind", "patch_sweep"},
            {"model", "toy-rhymer"},
            {"seed", 3},
            {"out", out.string()},
            {"layers", {0, 4}},
            {"positions", {"last_word", 0}},
            {"run", {{"samples", 2}, {"bootstrap", {{"resamples", 200}}}}}};
}

}  // namespace

TEST_CASE("config hash ignores key order and tracks values") {
    const json a = json::parse(R"({"kind": "patch_sweep", "seed": 1, "run": {"samples": 5, "seed": 1}})");
    const json b = json::parse(R"({"run": {"seed": 1, "samples": 5}, "seed": 1, "kind": "patch_sweep"})");
    CHECK(config_hash(a) == config_hash(b));
    CHECK(config_hash(a).size() == 16);
    json c = a;
    c["run"]["samples"] = 6;
    CHECK(config_hash(a) != config_hash(c));
    const auto pa = parse_config(sweep_config("/tmp/x"));
    const auto pb = parse_config(json::parse(sweep_config("/tmp/x").dump()));
    CHECK(pa.hash() == pb.hash());
}

TEST_CASE("normalization fills defaults and spreads the seed") {
    const auto cfg = parse_config({{"kind", "patch-sweep"}, {"model", "toy-rhymer"}, {"out", "rel"}, {"seed", 11}}, "/base");
    CHECK(cfg.kind == ExperimentKind::patch_sweep);
    CHECK(cfg.out == fs::path("/base/rel"));
    CHECK(cfg.json.at("run").at("seed") == 11);
    CHECK(cfg.json.at("run").at("bootstrap").at("seed") == 11);
    CHECK_THROWS_AS(parse_config({{"kind", "patch_sweep"}, {"out", "/o"}}), ConfigError);
    CHECK(cfg.json.at("positions").size() == 2);
    Overrides ov;
    ov.seed = 12;
    CHECK(parse_config({{"kind", "patch_sweep"}, {"model", "toy-rhymer"}, {"out", "/o"}, {"seed", 11}}, {}, ov).json.at("run").at("seed") == 12);
}

TEST_CASE("config errors name every offending field") {
    json bad = sweep_config("/tmp/x");
    bad["bogus"] = 1;
    bad["run"]["samples"] = -3;
    bad["data"] = {{"pairs", "/nonexistent/pairs.jsonl"}};
    try {
        parse_config(bad);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const auto has = [&](const std::string& f) {
            return std::find(e.fields.begin(), e.fields.end(), f) != e.fields.end();
        };
        CHECK(has("bogus"));
        CHECK(has("run.samples"));
        CHECK(has("data.pairs"));
        CHECK(std::string(e.what()).find("bogus") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_config({{"out", "/o"}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"kind", "nope"}, {"out", "/o"}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"kind", "patch_sweep"}}), ConfigError);
}

TEST_CASE("kind names") {
    for (auto k : {ExperimentKind::probe_pile, ExperimentKind::steer_sweep, ExperimentKind::report}) {
        CHECK(experiment_kind_from_string(to_string(k)) == k);
        CHECK(experiment_kind_from_string(subcommand_name(k)) == k);
    }
    CHECK(subcommand_name(ExperimentKind::patch_sweep) == "patch-sweep");
}

TEST_CASE("record parsing") {
    RunRecord r;
    r.header = {{"config_hash", "abc"}, {"config", {{"model", "m"}, {"kind", "patch_sweep"}}}};
    r.cells.push_back({"a", "patch", "failed", 0.5, {{"x", 1}}, nullptr, "boom"});
    r.cells.push_back({"b", "patch", "ok", 0.1, {{"x", 2}}, {{"rate", 0.5}}, ""});
    r.cells.push_back({"a", "patch", "ok", 0.2, {{"x", 1}}, {{"rate", 1.0}}, ""});
    std::stringstream ss;
    write_record(ss, r);
    const auto back = parse_record(ss);
    CHECK(back.config_hash() == "abc");
    CHECK(back.model_id() == "m");
    CHECK(back.kind() == "patch_sweep");
    CHECK(back.cells == r.cells);
    REQUIRE(back.find("a") != nullptr);
    CHECK(back.find("a")->ok());
    CHECK(back.latest().size() == 2);
    CHECK_FALSE(back.any_failed());
    CHECK(back.find("zz") == nullptr);
    std::stringstream empty;
    CHECK_THROWS(parse_record(empty));
}

TEST_CASE("a small sweep runs, resumes, replays and reports") {
    const auto out = fresh_dir("sweep");
    const auto cfg = parse_config(sweep_config(out));
    const auto first = run(cfg, {false, true});
    CHECK(first.executed == 4);
    CHECK(first.failed == 0);
    CHECK_THROWS_AS(run(cfg, {false, true}), ValidationError);
    const auto again = run(cfg, {true, true});
    CHECK(again.executed == 0);
    CHECK(again.skipped == 4);

    const auto rec = load_record(first.record_path);
    CHECK(rec.config_hash() == cfg.hash());
    CHECK(rec.header.at("toolkit_version") == std::string(kToolkitVersion));
    CHECK(rec.header.contains("model_spec"));
    const auto cells = rec.latest();
    REQUIRE(cells.size() == 4);
    for (const auto& c : cells) {
        CHECK(c.ok());
        const double rate = c.payload.at("rate").get<double>();
        CHECK(rate >= c.payload.at("interval").at("lower").get<double>());
        CHECK(rate <= c.payload.at("interval").at("upper").get<double>());
    }
    const auto rp = replay(rec, cells.front().cell_id);
    CHECK(rp.identical);
    CHECK(rp.deterministic);
    CHECK_THROWS(replay(rec, "no/such/cell"));

    // a changed config refuses to resume into the same record
    json changed = sweep_config(out);
    changed["run"]["samples"] = 3;
    CHECK_THROWS_AS(run(parse_config(changed), {true, true}), ValidationError);

    const auto files = report({rec}, {fresh_dir("report"), true});
    CHECK_FALSE(files.empty());
    for (const auto& f : files) CHECK(fs::exists(f));
    CHECK(std::any_of(files.begin(), files.end(), [](const std::string& f) { return f.ends_with(".svg"); }));

    RunRecord other = rec;
    other.header["config"]["model"] = "toy-gpt2";
    CHECK_NOTHROW(report({rec, other}, {fresh_dir("report2"), true}));
    try {
        report({rec, other}, {fresh_dir("report3"), false});
        FAIL("expected mixed-model error");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("mixed model ids") != std::string::npos);
    }
}

TEST_CASE("tampered payloads fail replay in deterministic mode") {
    const auto out = fresh_dir("tamper");
    json cfg = sweep_config(out);
    cfg["layers"] = {1};
    cfg["positions"] = {0};
    const auto o = run(parse_config(cfg), {false, true});
    auto rec = load_record(o.record_path);
    REQUIRE(rec.cells.size() == 1);
    rec.cells[0].payload["pairs"][0]["n_success"] = 99;
    CHECK_THROWS_AS(replay(rec, rec.cells[0].cell_id), ValidationError);
}

TEST_CASE("all-layers table") {
    RunRecord r;
    r.header = {{"config", {{"model", "toy-rhymer"}, {"kind", "all_layers"}}}, {"model_spec", {{"family", "gpt2"}}}};
    json iv = {{"point", 0.67}, {"lower", 0.57}, {"upper", 0.75}, {"confidence", 0.95}, {"method", "wilson"}, {"n", 100}};
    json iv0 = {{"point", 0.0}, {"lower", 0.0}, {"upper", 0.04}, {"confidence", 0.95}, {"method", "wilson"}, {"n", 100}};
    r.cells.push_back({"all_layers/last_word", "patch", "ok", 0.0, {}, {{"rate", 0.67}, {"interval", iv}}, ""});
    r.cells.push_back({"all_layers/i=0", "patch", "ok", 0.0, {}, {{"rate", 0.0}, {"interval", iv0}}, ""});
    const auto t = all_layers_table({r});
    CHECK(t.find("| Family | Model | Last Word [95% CI] | i=0 [95% CI] |") != std::string::npos);
    CHECK(t.find("67 [57, 75]") != std::string::npos);
    CHECK(t.find("0 [0, 4]") != std::string::npos);
}
