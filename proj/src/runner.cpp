#include "plansite/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include "plansite/backend.hpp"
#include "plansite/circuits.hpp"
#include "plansite/corpus.hpp"
#include "plansite/interventions.hpp"
#include "plansite/phonology.hpp"
#include "plansite/probing.hpp"
#include "plansite/random.hpp"
#include "plansite/stats.hpp"

namespace plansite::runner {

namespace fs = std::filesystem;
using nlohmann::json;
using corpus::RelPosition;
using interventions::CellResult;
using interventions::SiteSpec;

namespace {

constexpr ExperimentKind kAllKinds[] = {
    ExperimentKind::probe_pile, ExperimentKind::probe_couplets, ExperimentKind::patch_sweep,
    ExperimentKind::all_layers, ExperimentKind::baselines,      ExperimentKind::head_rank,
    ExperimentKind::topk_heads, ExperimentKind::path_patch,     ExperimentKind::mlp_control,
    ExperimentKind::steer_fit,  ExperimentKind::steer_sweep,    ExperimentKind::report};

}  // namespace

std::string to_string(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::probe_pile: return "probe_pile";
        case ExperimentKind::probe_couplets: return "probe_couplets";
        case ExperimentKind::patch_sweep: return "patch_sweep";
        case ExperimentKind::all_layers: return "all_layers";
        case ExperimentKind::baselines: return "baselines";
        case ExperimentKind::head_rank: return "head_rank";
        case ExperimentKind::topk_heads: return "topk_heads";
        case ExperimentKind::path_patch: return "path_patch";
        case ExperimentKind::mlp_control: return "mlp_control";
        case ExperimentKind::steer_fit: return "steer_fit";
        case ExperimentKind::steer_sweep: return "steer_sweep";
        case ExperimentKind::report: return "report";
    }
    return "report";
}

ExperimentKind experiment_kind_from_string(const std::string& s) {
    std::string n = s;
    std::replace(n.begin(), n.end(), '-', '_');
    for (auto k : kAllKinds) {
        if (to_string(k) == n) return k;
    }
    throw ValidationError("unknown experiment kind: " + s);
}

std::string subcommand_name(ExperimentKind k) {
    auto s = to_string(k);
    std::replace(s.begin(), s.end(), '_', '-');
    return s;
}

namespace {

std::string join(const std::vector<std::string>& v, const std::string& sep) {
    std::string out;
    for (const auto& s : v) out += (out.empty() ? "" : sep) + s;
    return out;
}

}  // namespace

ConfigError::ConfigError(const std::vector<std::string>& f, const std::vector<std::string>& p)
    : ValidationError("invalid config (" + join(f, ", ") + "): " + join(p, "; ")), fields(f), problems(p) {}

std::string config_hash(const json& j) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(j.dump());
    return os.str();
}

std::string ExperimentConfig::hash() const { return config_hash(json); }

// ---------------------------------------------------------------------------
// Config validation

namespace {

struct Checker {
    std::vector<std::string> fields;
    std::vector<std::string> problems;

    void fail(const std::string& field, const std::string& why) {
        if (std::find(fields.begin(), fields.end(), field) == fields.end()) fields.push_back(field);
        problems.push_back(field + ": " + why);
    }

    void allowed(const json& obj, const std::string& prefix, const std::set<std::string>& keys) {
        if (!obj.is_object()) return;
        for (auto it = obj.begin(); it != obj.end(); ++it) {
            if (!keys.count(it.key())) fail(prefix + it.key(), "unknown field");
        }
    }

    bool object(const json& j, const std::string& field) {
        if (!j.is_object()) {
            fail(field, "must be an object");
            return false;
        }
        return true;
    }

    void uint(const json& obj, const std::string& key, const std::string& field, std::uint64_t min = 0) {
        if (!obj.contains(key)) return;
        const auto& v = obj.at(key);
        if (!v.is_number_integer() || (v.is_number_integer() && v.get<std::int64_t>() < 0 && !v.is_number_unsigned())) {
            fail(field, "must be a non-negative integer");
        } else if (v.get<std::uint64_t>() < min) {
            fail(field, "must be >= " + std::to_string(min));
        }
    }

    void number(const json& obj, const std::string& key, const std::string& field, double lo, double hi) {
        if (!obj.contains(key)) return;
        const auto& v = obj.at(key);
        if (!v.is_number()) {
            fail(field, "must be a number");
        } else if (!(v.get<double>() >= lo && v.get<double>() <= hi)) {
            fail(field, "must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
        }
    }

    void boolean(const json& obj, const std::string& key, const std::string& field) {
        if (obj.contains(key) && !obj.at(key).is_boolean()) fail(field, "must be a boolean");
    }

    void string(const json& obj, const std::string& key, const std::string& field) {
        if (obj.contains(key) && !obj.at(key).is_string()) fail(field, "must be a string");
    }

    void choice(const json& obj, const std::string& key, const std::string& field, const std::set<std::string>& options) {
        if (!obj.contains(key)) return;
        if (!obj.at(key).is_string() || !options.count(obj.at(key).get<std::string>())) {
            std::vector<std::string> o(options.begin(), options.end());
            fail(field, "must be one of " + join(o, ", "));
        }
    }

    void position(const json& v, const std::string& field) {
        try {
            (void)RelPosition::parse(v);
        } catch (const std::exception& e) {
            fail(field, e.what());
        }
    }

    void positions(const json& obj, const std::string& key, const std::string& field) {
        if (!obj.contains(key)) return;
        const auto& v = obj.at(key);
        if (!v.is_array() || v.empty()) {
            fail(field, "must be a non-empty list of positions");
            return;
        }
        for (std::size_t i = 0; i < v.size(); ++i) position(v[i], field + "[" + std::to_string(i) + "]");
    }

    void int_list(const json& obj, const std::string& key, const std::string& field, bool allow_all, int min) {
        if (!obj.contains(key)) return;
        const auto& v = obj.at(key);
        if (allow_all && v.is_string() && v.get<std::string>() == "all") return;
        if (!v.is_array() || v.empty()) {
            fail(field, allow_all ? "must be \"all\" or a non-empty list of integers" : "must be a non-empty list of integers");
            return;
        }
        for (const auto& x : v) {
            if (!x.is_number_integer() || x.get<std::int64_t>() < min) {
                fail(field, "entries must be integers >= " + std::to_string(min));
                return;
            }
        }
    }

    void file(const json& obj, const std::string& key, const std::string& field) {
        if (!obj.contains(key)) return;
        if (!obj.at(key).is_string()) {
            fail(field, "must be a path string");
        } else if (!fs::exists(obj.at(key).get<std::string>())) {
            fail(field, "file not found: " + obj.at(key).get<std::string>());
        }
    }
};

std::string absolute_path(const std::string& p, const fs::path& base) {
    fs::path path(p);
    if (path.is_relative() && !base.empty()) path = base / path;
    return fs::absolute(path).lexically_normal().string();
}

bool uses_pairs(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::patch_sweep:
        case ExperimentKind::all_layers:
        case ExperimentKind::baselines:
        case ExperimentKind::head_rank:
        case ExperimentKind::topk_heads:
        case ExperimentKind::path_patch:
        case ExperimentKind::mlp_control: return true;
        default: return false;
    }
}

bool uses_couplets(ExperimentKind k) {
    return k == ExperimentKind::probe_couplets || k == ExperimentKind::steer_fit || k == ExperimentKind::steer_sweep;
}

bool generates(ExperimentKind k) {
    if (k == ExperimentKind::head_rank) return false;
    return uses_pairs(k) || k == ExperimentKind::steer_sweep;
}

bool probes(ExperimentKind k) { return k == ExperimentKind::probe_pile || k == ExperimentKind::probe_couplets; }

std::set<std::string> kind_fields(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::patch_sweep: return {"layers", "positions"};
        case ExperimentKind::all_layers: return {"positions"};
        case ExperimentKind::baselines: return {"layers", "position", "baselines", "donor_text"};
        case ExperimentKind::head_rank: return {"layer_range", "query", "key", "comma"};
        case ExperimentKind::topk_heads:
            return {"layer_range", "query", "key", "ks", "position", "controls", "control_seed", "reference"};
        case ExperimentKind::path_patch:
            return {"layer_range", "query", "key", "ks", "path", "controls", "control_seed", "reference"};
        case ExperimentKind::mlp_control: return {"ks", "position", "reference"};
        case ExperimentKind::steer_fit: return {"layers", "positions", "schemes"};
        case ExperimentKind::steer_sweep: return {"layers", "positions", "schemes", "alpha"};
        case ExperimentKind::probe_pile: return {"layers", "ks", "pile", "probe", "checkpoints"};
        case ExperimentKind::probe_couplets: return {"layers", "positions", "probe", "max_new_tokens", "limit", "checkpoints"};
        case ExperimentKind::report: return {"records", "group_by_model"};
    }
    return {};
}

void set_default(json& j, const std::string& key, json value) {
    if (!j.contains(key)) j[key] = std::move(value);
}

}  // namespace

ExperimentConfig parse_config(const json& raw, const fs::path& base_dir, const Overrides& overrides) {
    Checker c;
    if (!raw.is_object()) throw ConfigError({"<root>"}, {"config must be a JSON object"});
    json j = raw;
    if (overrides.seed) j["seed"] = *overrides.seed;
    if (overrides.out) j["out"] = *overrides.out;
    if (overrides.model) j["model"] = *overrides.model;
    if (overrides.deterministic) {
        if (!j.contains("device") || !j["device"].is_object()) j["device"] = json::object();
        j["device"]["deterministic"] = *overrides.deterministic;
    }

    if (!j.contains("kind") || !j.at("kind").is_string()) {
        throw ConfigError({"kind"}, {"kind: required string"});
    }
    ExperimentKind kind;
    try {
        kind = experiment_kind_from_string(j.at("kind").get<std::string>());
    } catch (const ValidationError& e) {
        throw ConfigError({"kind"}, {std::string("kind: ") + e.what()});
    }
    j["kind"] = to_string(kind);

    std::set<std::string> top = {"kind", "seed", "out", "device"};
    if (kind != ExperimentKind::report) top.insert({"model", "data"});
    if (generates(kind)) top.insert("run");
    for (const auto& f : kind_fields(kind)) top.insert(f);
    c.allowed(j, "", top);

    c.uint(j, "seed", "seed");
    set_default(j, "seed", 0);
    const std::uint64_t seed = j.at("seed").is_number_unsigned() || j.at("seed").is_number_integer()
                                   ? j.at("seed").get<std::uint64_t>()
                                   : 0;

    if (!j.contains("out") || !j.at("out").is_string() || j.at("out").get<std::string>().empty()) {
        c.fail("out", "required output directory");
    } else {
        j["out"] = absolute_path(j.at("out").get<std::string>(), base_dir);
    }

    if (kind != ExperimentKind::report) {
        if (!j.contains("model") || !j.at("model").is_string() || j.at("model").get<std::string>().empty()) {
            c.fail("model", "required model id");
        }
    }

    set_default(j, "device", json::object());
    if (c.object(j["device"], "device")) {
        auto& d = j["device"];
        c.allowed(d, "device.", {"device", "precision", "deterministic"});
        c.choice(d, "device", "device.device", {"cpu"});
        c.choice(d, "precision", "device.precision", {"fp32"});
        c.boolean(d, "deterministic", "device.deterministic");
        set_default(d, "device", "cpu");
        set_default(d, "precision", "fp32");
        set_default(d, "deterministic", true);
    }

    if (kind != ExperimentKind::report) {
        set_default(j, "data", json::object());
        if (c.object(j["data"], "data")) {
            auto& d = j["data"];
            c.allowed(d, "data.", {"pairs", "couplets", "corpus", "lexicon"});
            const fs::path dd = data_dir();
            const std::pair<const char*, const char*> files[] = {{"pairs", "prompt_pairs.jsonl"},
                                                                 {"couplets", "couplets.jsonl"},
                                                                 {"corpus", "general_corpus.jsonl"},
                                                                 {"lexicon", "cmudict-0.7b"}};
            for (const auto& [key, def] : files) {
                if (d.contains(key) && d.at(key).is_string()) {
                    d[key] = absolute_path(d.at(key).get<std::string>(), base_dir);
                } else if (!d.contains(key)) {
                    d[key] = (dd / def).string();
                }
            }
            c.file(d, "lexicon", "data.lexicon");
            if (uses_pairs(kind)) c.file(d, "pairs", "data.pairs");
            if (uses_couplets(kind)) c.file(d, "couplets", "data.couplets");
            if (kind == ExperimentKind::probe_pile) c.file(d, "corpus", "data.corpus");
        }
    }

    if (generates(kind)) {
        set_default(j, "run", json::object());
        if (c.object(j["run"], "run")) {
            auto& r = j["run"];
            c.allowed(r, "run.", {"samples", "decode", "seed", "seed_policy", "identical_policy", "bootstrap",
                                  "transcripts_per_pair"});
            c.uint(r, "samples", "run.samples", 1);
            c.uint(r, "seed", "run.seed");
            c.uint(r, "transcripts_per_pair", "run.transcripts_per_pair");
            c.choice(r, "seed_policy", "run.seed_policy", {"per_cell", "shared"});
            c.choice(r, "identical_policy", "run.identical_policy", {"count_identical", "exclude_identical"});
            if (r.contains("decode") && c.object(r["decode"], "run.decode")) {
                auto& d = r["decode"];
                c.allowed(d, "run.decode.", {"temperature", "top_p", "max_new_tokens", "stop_at_newline", "seed"});
                c.number(d, "temperature", "run.decode.temperature", 0.0, 1e6);
                c.number(d, "top_p", "run.decode.top_p", 1e-12, 1.0);
                c.uint(d, "max_new_tokens", "run.decode.max_new_tokens", 1);
                c.boolean(d, "stop_at_newline", "run.decode.stop_at_newline");
            }
            if (r.contains("bootstrap") && c.object(r["bootstrap"], "run.bootstrap")) {
                auto& b = r["bootstrap"];
                c.allowed(b, "run.bootstrap.", {"resamples", "confidence", "seed", "statistic", "interval"});
                c.uint(b, "resamples", "run.bootstrap.resamples", 1);
                c.number(b, "confidence", "run.bootstrap.confidence", 1e-6, 1.0 - 1e-9);
                c.uint(b, "seed", "run.bootstrap.seed");
                c.choice(b, "statistic", "run.bootstrap.statistic", {"cluster_mean", "pooled"});
                c.choice(b, "interval", "run.bootstrap.interval", {"percentile", "bca"});
            }
            if (c.problems.empty()) {
                json given = r;
                if (!given.contains("seed") || overrides.seed) given["seed"] = seed;
                if (!given.contains("bootstrap")) given["bootstrap"] = json::object();
                if (!given["bootstrap"].contains("seed") || overrides.seed) given["bootstrap"]["seed"] = seed;
                try {
                    j["run"] = json(given.get<interventions::RunOptions>());
                } catch (const std::exception& e) {
                    c.fail("run", e.what());
                }
            }
        }
    }

    if (probes(kind)) {
        set_default(j, "probe", json::object());
        if (c.object(j["probe"], "probe")) {
            auto& p = j["probe"];
            c.allowed(p, "probe.", {"lr", "weight_decay", "batch_size", "epochs", "beta1", "beta2", "eps", "init_std",
                                    "seed", "standardize", "label_space", "max_labels"});
            c.number(p, "lr", "probe.lr", 1e-12, 10.0);
            c.number(p, "weight_decay", "probe.weight_decay", 0.0, 10.0);
            c.uint(p, "batch_size", "probe.batch_size", 1);
            c.uint(p, "epochs", "probe.epochs", 1);
            c.uint(p, "max_labels", "probe.max_labels", 1);
            c.uint(p, "seed", "probe.seed");
            c.boolean(p, "standardize", "probe.standardize");
            c.choice(p, "label_space", "probe.label_space", {"observed", "full"});
            if (c.problems.empty()) {
                json given = p;
                if (!given.contains("seed") || overrides.seed) given["seed"] = seed;
                j["probe"] = json(given.get<probing::ProbeHyperparams>());
            }
        }
        c.boolean(j, "checkpoints", "checkpoints");
        set_default(j, "checkpoints", false);
    }

    // Kind-specific axes.
    c.int_list(j, "layers", "layers", true, 0);
    c.positions(j, "positions", "positions");
    if (j.contains("position")) c.position(j["position"], "position");
    if (j.contains("query")) c.position(j["query"], "query");
    if (j.contains("key")) c.position(j["key"], "key");
    c.int_list(j, "ks", "ks", false, kind == ExperimentKind::probe_pile ? 0 : 1);
    if (j.contains("layer_range")) {
        const auto& lr = j["layer_range"];
        if (!(lr.is_string() && lr.get<std::string>() == "all") &&
            !(lr.is_array() && lr.size() == 2 && lr[0].is_number_integer() && lr[1].is_number_integer() &&
              lr[0].get<int>() >= 0 && lr[0].get<int>() <= lr[1].get<int>())) {
            c.fail("layer_range", "must be \"all\" or [first, last] with 0 <= first <= last");
        }
    }
    c.boolean(j, "comma", "comma");
    c.boolean(j, "reference", "reference");
    c.uint(j, "control_seed", "control_seed");
    c.string(j, "donor_text", "donor_text");
    c.number(j, "alpha", "alpha", -1e6, 1e6);
    c.uint(j, "max_new_tokens", "max_new_tokens", 1);
    c.uint(j, "limit", "limit");
    c.boolean(j, "group_by_model", "group_by_model");
    if (j.contains("controls")) {
        const auto& v = j["controls"];
        if (!v.is_array()) {
            c.fail("controls", "must be a list");
        } else {
            for (const auto& x : v) {
                if (!x.is_string() || (x != "random" && x != "comma")) c.fail("controls", "entries must be random or comma");
            }
        }
    }
    if (j.contains("baselines")) {
        const auto& v = j["baselines"];
        if (!v.is_array() || v.empty()) {
            c.fail("baselines", "must be a non-empty list");
        } else {
            for (const auto& x : v) {
                if (!x.is_string() || (x != "zero" && x != "donor")) c.fail("baselines", "entries must be zero or donor");
            }
        }
    }
    if (j.contains("path") && c.object(j["path"], "path")) {
        auto& p = j["path"];
        c.allowed(p, "path.", {"source", "dest", "mode", "stage1_layer"});
        if (p.contains("source")) c.position(p["source"], "path.source");
        if (p.contains("dest")) c.position(p["dest"], "path.dest");
        c.choice(p, "mode", "path.mode", {"full_column", "single_layer"});
        if (p.contains("stage1_layer") && !p["stage1_layer"].is_number_integer()) c.fail("path.stage1_layer", "must be an integer");
    }
    if (j.contains("schemes") && c.object(j["schemes"], "schemes")) {
        auto& s = j["schemes"];
        c.allowed(s, "schemes.", {"count", "fit", "heldout", "max_pairs"});
        c.uint(s, "count", "schemes.count", 2);
        c.uint(s, "fit", "schemes.fit", 1);
        c.uint(s, "heldout", "schemes.heldout", 1);
        c.uint(s, "max_pairs", "schemes.max_pairs");
    }
    if (j.contains("pile") && c.object(j["pile"], "pile")) {
        auto& p = j["pile"];
        c.allowed(p, "pile.", {"samples", "min_tokens", "max_tokens", "max_new_tokens"});
        c.uint(p, "samples", "pile.samples", 2);
        c.uint(p, "min_tokens", "pile.min_tokens", 1);
        c.uint(p, "max_tokens", "pile.max_tokens", 1);
        c.uint(p, "max_new_tokens", "pile.max_new_tokens");
    }
    if (kind == ExperimentKind::report) {
        if (!j.contains("records") || !j["records"].is_array() || j["records"].empty()) {
            c.fail("records", "required non-empty list of run record paths");
        } else {
            for (std::size_t i = 0; i < j["records"].size(); ++i) {
                auto& r = j["records"][i];
                const std::string field = "records[" + std::to_string(i) + "]";
                if (!r.is_string()) {
                    c.fail(field, "must be a path string");
                    continue;
                }
                r = absolute_path(r.get<std::string>(), base_dir);
                if (fs::is_directory(r.get<std::string>())) r = (fs::path(r.get<std::string>()) / "record.jsonl").string();
                if (!fs::exists(r.get<std::string>())) c.fail(field, "file not found: " + r.get<std::string>());
            }
        }
    }
    if (!c.problems.empty()) throw ConfigError(c.fields, c.problems);

    // Defaults.
    const json both = json::array({"last_word", 0});
    switch (kind) {
        case ExperimentKind::patch_sweep:
            set_default(j, "layers", "all");
            set_default(j, "positions", both);
            break;
        case ExperimentKind::all_layers: set_default(j, "positions", both); break;
        case ExperimentKind::baselines:
            set_default(j, "layers", "all");
            set_default(j, "position", 0);
            set_default(j, "baselines", json::array({"zero", "donor"}));
            set_default(j, "donor_text", std::string(interventions::kDefaultDonor));
            break;
        case ExperimentKind::head_rank:
            set_default(j, "layer_range", "all");
            set_default(j, "query", 0);
            set_default(j, "key", "last_word");
            set_default(j, "comma", false);
            break;
        case ExperimentKind::topk_heads:
        case ExperimentKind::path_patch:
            set_default(j, "layer_range", "all");
            set_default(j, "query", 0);
            set_default(j, "key", "last_word");
            set_default(j, "ks", json::array({1, 2, 3, 4, 5}));
            set_default(j, "controls", json::array({"random"}));
            set_default(j, "control_seed", seed);
            set_default(j, "reference", true);
            if (kind == ExperimentKind::topk_heads) {
                set_default(j, "position", 0);
            } else {
                set_default(j, "path", json::object());
                j["path"] = json(j["path"].get<circuits::PathOptions>());
            }
            break;
        case ExperimentKind::mlp_control:
            set_default(j, "ks", json::array({1, 2, 3, 4, 5}));
            set_default(j, "position", 0);
            set_default(j, "reference", true);
            break;
        case ExperimentKind::steer_fit:
        case ExperimentKind::steer_sweep:
            set_default(j, "layers", "all");
            set_default(j, "positions", json::array({0}));
            set_default(j, "schemes", json::object());
            set_default(j["schemes"], "count", 4);
            set_default(j["schemes"], "fit", 8);
            set_default(j["schemes"], "heldout", 4);
            set_default(j["schemes"], "max_pairs", 0);
            if (kind == ExperimentKind::steer_sweep) set_default(j, "alpha", 1.0);
            break;
        case ExperimentKind::probe_pile:
            set_default(j, "layers", "all");
            set_default(j, "ks", json::array({1, 2, 3}));
            set_default(j, "pile", json::object());
            set_default(j["pile"], "samples", 1200);
            set_default(j["pile"], "min_tokens", 8);
            set_default(j["pile"], "max_tokens", 32);
            set_default(j["pile"], "max_new_tokens", 20);
            break;
        case ExperimentKind::probe_couplets:
            set_default(j, "layers", "all");
            set_default(j, "positions", json::array({"last_word", -1, 0, 1}));
            set_default(j, "max_new_tokens", 20);
            set_default(j, "limit", 0);
            break;
        case ExperimentKind::report: set_default(j, "group_by_model", true); break;
    }
    // Canonical position spelling.
    for (const char* key : {"position", "query", "key"}) {
        if (j.contains(key)) j[key] = RelPosition::parse(j[key]).to_json();
    }
    if (j.contains("positions")) {
        for (auto& p : j["positions"]) p = RelPosition::parse(p).to_json();
    }

    ExperimentConfig cfg;
    cfg.kind = kind;
    cfg.json = std::move(j);
    cfg.out = cfg.json.at("out").get<std::string>();
    return cfg;
}

ExperimentConfig load_config(const fs::path& path, const Overrides& overrides) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path.string());
    json raw;
    try {
        raw = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError("config " + path.string() + ": " + e.what(), 0);
    }
    return parse_config(raw, fs::absolute(path).parent_path(), overrides);
}

// ---------------------------------------------------------------------------
// Records

void to_json(json& j, const CellRecord& c) {
    j = {{"type", "cell"},           {"cell_id", c.cell_id},  {"kind", c.kind},
         {"status", c.status},       {"seconds", c.seconds},  {"condition", c.condition},
         {"payload", c.payload},     {"error", c.error}};
}

void from_json(const json& j, CellRecord& c) {
    c.cell_id = j.at("cell_id").get<std::string>();
    c.kind = j.at("kind").get<std::string>();
    c.status = j.at("status").get<std::string>();
    c.seconds = j.value("seconds", 0.0);
    c.condition = j.value("condition", json());
    c.payload = j.value("payload", json());
    c.error = j.value("error", std::string());
}

std::string RunRecord::model_id() const {
    if (header.contains("config") && header["config"].contains("model")) return header["config"]["model"].get<std::string>();
    return {};
}

std::string RunRecord::kind() const {
    if (header.contains("config") && header["config"].contains("kind")) return header["config"]["kind"].get<std::string>();
    return {};
}

const CellRecord* RunRecord::find(const std::string& cell_id) const {
    for (auto it = cells.rbegin(); it != cells.rend(); ++it) {
        if (it->cell_id == cell_id) return &*it;
    }
    return nullptr;
}

std::vector<CellRecord> RunRecord::latest() const {
    std::vector<CellRecord> out;
    std::map<std::string, std::size_t> index;
    for (const auto& c : cells) {
        auto it = index.find(c.cell_id);
        if (it == index.end()) {
            index[c.cell_id] = out.size();
            out.push_back(c);
        } else {
            out[it->second] = c;
        }
    }
    return out;
}

bool RunRecord::any_failed() const {
    for (const auto& c : latest()) {
        if (!c.ok()) return true;
    }
    return false;
}

RunRecord parse_record(std::istream& in) {
    RunRecord r;
    std::string line;
    std::size_t no = 0;
    while (std::getline(in, line)) {
        ++no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError(std::string("run record: ") + e.what(), no);
        }
        const auto type = j.value("type", std::string());
        if (type == "header") {
            if (!r.header.is_null()) throw ParseError("run record: second header", no);
            r.header = std::move(j);
        } else if (type == "cell") {
            if (r.header.is_null()) throw ParseError("run record: cell before header", no);
            try {
                r.cells.push_back(j.get<CellRecord>());
            } catch (const json::exception& e) {
                throw ParseError(std::string("run record: ") + e.what(), no);
            }
        } else {
            throw ParseError("run record: unknown line type '" + type + "'", no);
        }
    }
    if (r.header.is_null()) throw ParseError("run record: no header", 0);
    return r;
}

RunRecord load_record(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read run record " + path.string());
    return parse_record(in);
}

void write_record(std::ostream& out, const RunRecord& r) {
    json h = r.header;
    h["type"] = "header";
    out << h.dump() << "\n";
    for (const auto& c : r.cells) out << json(c).dump() << "\n";
}

RecordWriter::RecordWriter(const fs::path& path, bool append) : path_(path) {
    if (!append) {
        std::ofstream out(path_, std::ios::trunc);
        if (!out) throw IoError("cannot create run record " + path_.string());
    }
}

void RecordWriter::header(const json& h) {
    std::lock_guard lock(mu_);
    std::ofstream out(path_, std::ios::app);
    json line = h;
    line["type"] = "header";
    out << line.dump() << "\n";
    out.flush();
    if (!out) throw IoError("write failed: " + path_.string());
}

void RecordWriter::cell(const CellRecord& c) {
    std::lock_guard lock(mu_);
    std::ofstream out(path_, std::ios::app);
    out << json(c).dump() << "\n";
    out.flush();
    if (!out) throw IoError("write failed: " + path_.string());
}

// ---------------------------------------------------------------------------
// Execution context and the cell dispatcher

namespace {

struct Context {
    json cfg;
    ExperimentKind kind = ExperimentKind::patch_sweep;
    std::shared_ptr<backend::Model> model;
    phonology::PronunciationLexicon lexicon;
    std::vector<corpus::PromptPair> pairs;
    std::vector<corpus::Couplet> couplets;
    interventions::RunOptions opts;
    std::vector<std::string> warnings;

    // Lazily built, shared by cells of one run.
    std::optional<std::vector<interventions::Scheme>> schemes;
    std::optional<interventions::SchemeMeans> means;
    std::optional<probing::DatasetBuild> dataset;
    std::optional<probing::UnigramBaseline> unigram;
};

Context open_context(const json& cfg) {
    Context ctx;
    ctx.cfg = cfg;
    ctx.kind = experiment_kind_from_string(cfg.at("kind").get<std::string>());
    if (ctx.kind == ExperimentKind::report) return ctx;
    const auto& dev = cfg.at("device");
    backend::DeviceConfig dc;
    dc.device = dev.at("device").get<std::string>();
    dc.precision = dev.at("precision").get<std::string>();
    dc.deterministic = dev.at("deterministic").get<bool>();
    ctx.model = backend::load_model(cfg.at("model").get<std::string>(), dc);
    const auto& data = cfg.at("data");
    ctx.lexicon = phonology::load_pronouncing_lexicon(data.at("lexicon").get<std::string>());
    if (cfg.contains("run")) ctx.opts = cfg.at("run").get<interventions::RunOptions>();
    if (uses_pairs(ctx.kind)) {
        auto built = corpus::build_prompt_pairs(corpus::load_prompt_pair_specs(data.at("pairs").get<std::string>()),
                                                ctx.model->tokenizer(), ctx.lexicon);
        for (const auto& r : built.rejected) ctx.warnings.push_back("pair " + r.record_id + " rejected: " + r.reason);
        if (built.pairs.empty()) throw ValidationError("no usable prompt pairs in " + data.at("pairs").get<std::string>());
        ctx.pairs = std::move(built.pairs);
    }
    if (uses_couplets(ctx.kind)) {
        auto loaded = corpus::load_couplets(data.at("couplets").get<std::string>(), ctx.lexicon);
        for (const auto& r : loaded.rejected) ctx.warnings.push_back("couplet " + r.record_id + " rejected: " + r.reason);
        ctx.couplets = std::move(loaded.couplets);
        if (ctx.kind == ExperimentKind::probe_couplets) {
            const auto limit = cfg.at("limit").get<std::size_t>();
            if (limit && ctx.couplets.size() > limit) {
                // Stratified prefix: keeps the file's train/validation proportions.
                const double val_frac = static_cast<double>(loaded.validation) / static_cast<double>(ctx.couplets.size());
                const auto n_val = static_cast<std::size_t>(std::lround(val_frac * static_cast<double>(limit)));
                std::size_t take_val = n_val, take_train = limit - n_val;
                std::vector<corpus::Couplet> kept;
                for (auto& c : ctx.couplets) {
                    auto& quota = c.split == "validation" ? take_val : take_train;
                    if (quota) {
                        --quota;
                        kept.push_back(std::move(c));
                    }
                }
                ctx.couplets = std::move(kept);
            }
        }
    }
    return ctx;
}

std::vector<int> resolve_layers(const json& v, const backend::ModelSpec& spec) {
    std::vector<int> out;
    if (v.is_string()) {
        for (std::size_t l = 0; l < spec.layers; ++l) out.push_back(static_cast<int>(l));
        return out;
    }
    for (const auto& x : v) {
        const int l = x.get<int>();
        if (l >= static_cast<int>(spec.layers)) {
            throw RangeError("layer " + std::to_string(l) + " outside the model's " + std::to_string(spec.layers) + " layers");
        }
        out.push_back(l);
    }
    return out;
}

std::pair<int, int> resolve_range(const json& v, const backend::ModelSpec& spec) {
    if (v.is_string()) return {0, static_cast<int>(spec.layers) - 1};
    return {v[0].get<int>(), v[1].get<int>()};
}

std::vector<RelPosition> resolve_positions(const json& v) {
    std::vector<RelPosition> out;
    for (const auto& p : v) out.push_back(RelPosition::parse(p));
    return out;
}

json sites_to_json(const std::vector<SiteSpec>& sites) {
    json a = json::array();
    for (const auto& s : sites) a.push_back(s);
    return a;
}

std::vector<SiteSpec> sites_from_json(const json& a) {
    std::vector<SiteSpec> out;
    for (const auto& s : a) out.push_back(s.get<SiteSpec>());
    return out;
}

circuits::HeadSet head_set_from_json(const json& j) {
    circuits::HeadSet s;
    for (const auto& h : j.at("heads")) s.heads.push_back({h.at(0).get<int>(), h.at(1).get<int>()});
    s.provenance = circuits::head_set_kind_from_string(j.at("provenance").get<std::string>());
    s.seed = j.value("seed", std::uint64_t{0});
    return s;
}

interventions::CellInterval interval_from(const json& spec) {
    return spec.value("interval", std::string("cluster_bootstrap")) == "wilson" ? interventions::CellInterval::wilson
                                                                               : interventions::CellInterval::cluster_bootstrap;
}

const std::vector<interventions::Scheme>& schemes_for(Context& ctx, const json& sj) {
    if (!ctx.schemes) {
        ctx.schemes = interventions::build_schemes(ctx.couplets, ctx.model->tokenizer(), ctx.lexicon,
                                                   sj.at("count").get<std::size_t>(), sj.at("fit").get<std::size_t>(),
                                                   sj.at("heldout").get<std::size_t>());
        if (ctx.schemes->size() < 2) throw ValidationError("steering needs at least two rhyme schemes");
    }
    return *ctx.schemes;
}

probing::DatasetBuild build_probe_data(Context& ctx, const std::vector<int>& layers, const json& axis_values,
                                       std::vector<std::vector<TokenId>>* completions) {
    const auto& cfg = ctx.cfg;
    if (ctx.kind == ExperimentKind::probe_pile) {
        const auto& pile = cfg.at("pile");
        const auto samples = corpus::sample_general_text(
            cfg.at("data").at("corpus").get<std::string>(), ctx.model->tokenizer(), pile.at("samples").get<std::size_t>(),
            corpus::LengthBounds{pile.at("min_tokens").get<std::size_t>(), pile.at("max_tokens").get<std::size_t>()},
            cfg.at("seed").get<std::uint64_t>());
        return probing::build_lookahead_dataset(*ctx.model, samples, layers, axis_values.get<std::vector<int>>(),
                                                {pile.at("max_new_tokens").get<std::size_t>()}, completions);
    }
    return probing::build_couplet_dataset(*ctx.model, ctx.couplets, layers, resolve_positions(axis_values),
                                          {cfg.at("max_new_tokens").get<std::size_t>()}, completions);
}

probing::GridCell probe_cell(Context& ctx, const probing::ProbeDataset& ds) {
    const auto hyper = ctx.cfg.at("probe").get<probing::ProbeHyperparams>();
    auto probe = probing::train_probe(ds, hyper, ctx.model->spec().vocab);
    probing::GridCell c;
    c.layer = ds.layer;
    c.axis_label = ds.cell_label();
    c.n_train = probe.meta.value("n_train", std::size_t{0});
    c.final_loss = probe.loss_history.empty() ? 0.0 : probe.loss_history.back();
    const Tokenizer* tok = ds.axis == "couplet" ? &ctx.model->tokenizer() : nullptr;
    const phonology::PronunciationLexicon* lex = ds.axis == "couplet" ? &ctx.lexicon : nullptr;
    c.eval = probing::evaluate_probe(probe, ds, tok, lex);
    if (ctx.unigram) c.baseline = probing::unigram_eval(*ctx.unigram, ds, tok, lex);
    if (ctx.cfg.value("checkpoints", false)) {
        const fs::path dir = fs::path(ctx.cfg.at("out").get<std::string>()) / "probes";
        fs::create_directories(dir);
        std::string label = c.axis_label;
        std::replace(label.begin(), label.end(), '=', '_');
        probe.meta["model"] = ctx.cfg.at("model");
        probing::save_probe(dir / ("probe_" + ds.axis + "_L" + std::to_string(ds.layer) + "_" + label + ".json"), probe);
    }
    return c;
}

/// Recomputes one cell from its spec. `condition` is exactly what the record stores.
json execute_spec(Context& ctx, const std::string& cell_id, const std::string& kind, const json& spec) {
    const auto& model = *ctx.model;
    const json meta = spec.value("meta", json::object());
    if (kind == "patch") {
        const auto sites = sites_from_json(spec.at("sites"));
        const auto source = interventions::patch_source_from_string(spec.value("source", std::string("corrupt")));
        const auto donor = spec.value("donor_text", std::string());
        return interventions::patch_cell(model, ctx.pairs, sites, source, ctx.opts, ctx.lexicon, interval_from(spec),
                                         cell_id, meta, donor);
    }
    if (kind == "path") {
        return circuits::path_patch_cell(model, ctx.pairs, head_set_from_json(spec.at("set")),
                                         spec.at("path").get<circuits::PathOptions>(), ctx.opts, ctx.lexicon, cell_id,
                                         meta);
    }
    if (kind == "head_rank") {
        const auto first = spec.at("first_layer").get<int>();
        const auto last = spec.at("last_layer").get<int>();
        if (spec.value("comma", false)) return circuits::rank_heads_to_comma(model, ctx.pairs, first, last);
        return circuits::rank_heads(model, ctx.pairs, first, last, RelPosition::parse(spec.at("query")),
                                    RelPosition::parse(spec.at("key")));
    }
    if (kind == "mlp_rank") {
        json out = json::array();
        for (const auto& s : circuits::rank_mlp_layers(model, ctx.pairs, RelPosition::parse(spec.at("position")))) {
            out.push_back({{"layer", s.layer}, {"score", s.score}});
        }
        return out;
    }
    if (kind == "steer") {
        const auto& schemes = schemes_for(ctx, spec.at("schemes"));
        const int layer = spec.at("layer").get<int>();
        const auto pos = RelPosition::parse(spec.at("position"));
        std::size_t pi = 0, li = 0;
        const interventions::SchemeMeans* means = nullptr;
        interventions::SchemeMeans local;
        if (ctx.means) {
            auto pit = std::find(ctx.means->positions.begin(), ctx.means->positions.end(), pos);
            auto lit = std::find(ctx.means->layers.begin(), ctx.means->layers.end(), layer);
            if (pit != ctx.means->positions.end() && lit != ctx.means->layers.end()) {
                pi = static_cast<std::size_t>(pit - ctx.means->positions.begin());
                li = static_cast<std::size_t>(lit - ctx.means->layers.begin());
                means = &*ctx.means;
            }
        }
        if (!means) {
            local = interventions::fit_scheme_means(model, schemes, {pos}, {layer});
            means = &local;
        }
        return interventions::steer_cell(model, schemes, *means, pi, li, spec.at("alpha").get<double>(), ctx.opts,
                                         ctx.lexicon, spec.at("max_pairs").get<std::size_t>(), cell_id, meta);
    }
    if (kind == "steer_fit") {
        const auto& schemes = schemes_for(ctx, spec.at("schemes"));
        const auto positions = resolve_positions(spec.at("positions"));
        const auto layers = spec.at("layers").get<std::vector<int>>();
        const auto means = interventions::fit_scheme_means(model, schemes, positions, layers);
        json norms = json::array();
        for (std::size_t p = 0; p < positions.size(); ++p) {
            for (std::size_t l = 0; l < layers.size(); ++l) {
                double total = 0.0;
                std::size_t n = 0;
                for (std::size_t s = 0; s < schemes.size(); ++s) {
                    for (std::size_t t = 0; t < schemes.size(); ++t) {
                        if (s == t) continue;
                        double sq = 0.0;
                        for (float x : means.vector(s, t, p, l).vector) sq += static_cast<double>(x) * x;
                        total += std::sqrt(sq);
                        ++n;
                    }
                }
                norms.push_back({{"position", positions[p].to_json()}, {"layer", layers[l]},
                                 {"mean_norm", n ? total / static_cast<double>(n) : 0.0}});
            }
        }
        json sch = json::array();
        for (const auto& s : schemes) {
            sch.push_back({{"name", s.name}, {"word", s.word}, {"fit", s.fit.size()}, {"heldout", s.heldout.size()}});
        }
        return {{"schemes", sch}, {"vector_norms", norms}};
    }
    if (kind == "probe") {
        const int layer = spec.at("layer").get<int>();
        const json axis_value = spec.at("axis_value");
        std::optional<probing::DatasetBuild> local;
        const probing::ProbeDataset* ds = nullptr;
        auto find_in = [&](const probing::DatasetBuild& b) -> const probing::ProbeDataset* {
            for (const auto& c : b.cells) {
                const bool match = c.axis == "lookahead" ? json(c.k) == axis_value : c.position.to_json() == axis_value;
                if (c.layer == layer && match) return &c;
            }
            return nullptr;
        };
        if (ctx.dataset) ds = find_in(*ctx.dataset);
        if (!ds) {
            std::vector<std::vector<TokenId>> completions;
            local = build_probe_data(ctx, {layer}, json::array({axis_value}), &completions);
            if (!ctx.unigram) ctx.unigram = probing::build_unigram(completions);
            ds = find_in(*local);
            if (!ds) throw ValidationError("probe cell " + cell_id + " not produced by the dataset build");
        }
        return probe_cell(ctx, *ds);
    }
    throw ValidationError("cell " + cell_id + ": unknown cell kind '" + kind + "'");
}

struct PlannedCell {
    std::string cell_id;
    std::string kind;
    json spec;
};

json patch_spec(const std::vector<SiteSpec>& sites, const std::string& source, const std::string& interval, json meta) {
    return {{"sites", sites_to_json(sites)}, {"source", source}, {"interval", interval}, {"meta", std::move(meta)}};
}

std::vector<SiteSpec> layer_sites(const std::vector<int>& layers, const RelPosition& pos,
                                  backend::Component comp = backend::Component::residual_post_block) {
    std::vector<SiteSpec> out;
    for (int l : layers) out.push_back({l, pos, comp, -1});
    return out;
}

void plan_reference(std::vector<PlannedCell>& plan, const backend::ModelSpec& spec, const RelPosition& pos) {
    for (std::size_t l = 0; l < spec.layers; ++l) {
        const int layer = static_cast<int>(l);
        plan.push_back({interventions::sweep_cell_id("reference", pos, layer), "patch",
                        patch_spec(layer_sites({layer}, pos), "corrupt", "cluster_bootstrap",
                                   {{"kind", "reference"}, {"series", "reference"}, {"x", layer}, {"layer", layer},
                                    {"position", pos.to_json()}})});
    }
}

/// Plans that depend on earlier cells' payloads (head and MLP rankings) are
/// produced after those cells run; `lookup` returns a completed payload.
std::vector<PlannedCell> plan_cells(Context& ctx, const std::function<const json*(const std::string&)>& lookup) {
    const auto& cfg = ctx.cfg;
    const auto& spec = ctx.model->spec();
    std::vector<PlannedCell> plan;
    switch (ctx.kind) {
        case ExperimentKind::patch_sweep: {
            const auto layers = resolve_layers(cfg.at("layers"), spec);
            for (const auto& pos : resolve_positions(cfg.at("positions"))) {
                for (int l : layers) {
                    plan.push_back({interventions::sweep_cell_id("patch_sweep", pos, l), "patch",
                                    patch_spec(layer_sites({l}, pos), "corrupt", "cluster_bootstrap",
                                               {{"kind", "patch"}, {"series", pos.label()}, {"x", l}, {"layer", l},
                                                {"position", pos.to_json()}})});
                }
            }
            break;
        }
        case ExperimentKind::all_layers: {
            const auto layers = resolve_layers("all", spec);
            for (const auto& pos : resolve_positions(cfg.at("positions"))) {
                plan.push_back({"all_layers/" + pos.label(), "patch",
                                patch_spec(layer_sites(layers, pos), "corrupt", "wilson",
                                           {{"kind", "all_layers"}, {"position", pos.to_json()}})});
            }
            break;
        }
        case ExperimentKind::baselines: {
            const auto layers = resolve_layers(cfg.at("layers"), spec);
            const auto pos = RelPosition::parse(cfg.at("position"));
            for (const auto& b : cfg.at("baselines")) {
                const auto kind = "baseline_" + b.get<std::string>();
                for (int l : layers) {
                    auto s = patch_spec(layer_sites({l}, pos), b.get<std::string>(), "wilson",
                                        {{"kind", kind}, {"series", kind}, {"x", l}, {"layer", l}, {"position", pos.to_json()}});
                    if (b == "donor") s["donor_text"] = cfg.at("donor_text");
                    plan.push_back({interventions::sweep_cell_id(kind, pos, l), "patch", std::move(s)});
                }
            }
            break;
        }
        case ExperimentKind::head_rank:
        case ExperimentKind::topk_heads:
        case ExperimentKind::path_patch: {
            const auto [first, last] = resolve_range(cfg.at("layer_range"), spec);
            if (last >= static_cast<int>(spec.layers)) {
                throw RangeError("layer_range ends at " + std::to_string(last) + " but the model has " +
                                 std::to_string(spec.layers) + " layers");
            }
            plan.push_back({"head_rank", "head_rank",
                            {{"first_layer", first}, {"last_layer", last}, {"query", cfg.at("query")}, {"key", cfg.at("key")}}});
            const bool comma_control = cfg.contains("controls") &&
                                       std::find(cfg["controls"].begin(), cfg["controls"].end(), "comma") != cfg["controls"].end();
            if (cfg.value("comma", false) || comma_control) {
                plan.push_back({"head_rank_comma", "head_rank",
                                {{"first_layer", first}, {"last_layer", last}, {"comma", true}}});
            }
            if (ctx.kind == ExperimentKind::head_rank) break;
            const json* ranked = lookup("head_rank");
            if (!ranked) break;  // second planning pass
            const auto ranking = ranked->get<circuits::HeadRanking>();
            std::optional<circuits::HeadRanking> comma;
            if (const json* c = lookup("head_rank_comma")) comma = c->get<circuits::HeadRanking>();
            const bool path = ctx.kind == ExperimentKind::path_patch;
            const auto pos = path ? cfg.at("path").get<circuits::PathOptions>().dest : RelPosition::parse(cfg.at("position"));
            std::vector<std::string> strategies = {"topk"};
            for (const auto& c : cfg.at("controls")) strategies.push_back(c.get<std::string>());
            for (const auto& strat : strategies) {
                for (const auto& kj : cfg.at("ks")) {
                    const auto k = kj.get<std::size_t>();
                    const auto set = circuits::control_head_set(ranking, k, circuits::head_set_kind_from_string(strat),
                                                                mix_seed(cfg.at("control_seed").get<std::uint64_t>(), k),
                                                                spec, comma ? &*comma : nullptr);
                    const std::string series = (path ? "path_" : "heads_") + strat;
                    const std::string id = series + "/k=" + std::to_string(k);
                    json meta = {{"kind", path ? "path_patch" : "topk_heads"}, {"series", series}, {"x", k}, {"k", k},
                                 {"set", set}};
                    if (path) {
                        plan.push_back({id, "path", {{"set", set}, {"path", cfg.at("path")}, {"meta", meta}}});
                    } else {
                        plan.push_back({id, "patch", patch_spec(circuits::head_sites(set, pos), "corrupt", "cluster_bootstrap", meta)});
                    }
                }
            }
            if (cfg.at("reference").get<bool>()) plan_reference(plan, spec, pos);
            break;
        }
        case ExperimentKind::mlp_control: {
            const auto pos = RelPosition::parse(cfg.at("position"));
            plan.push_back({"mlp_rank", "mlp_rank", {{"position", pos.to_json()}}});
            const json* ranked = lookup("mlp_rank");
            if (!ranked) break;
            for (const auto& kj : cfg.at("ks")) {
                const auto k = kj.get<std::size_t>();
                if (k > ranked->size()) throw RangeError("k=" + std::to_string(k) + " exceeds the model's layers");
                std::vector<int> layers;
                for (std::size_t i = 0; i < k; ++i) layers.push_back((*ranked)[i].at("layer").get<int>());
                plan.push_back({"mlp_control/k=" + std::to_string(k), "patch",
                                patch_spec(layer_sites(layers, pos, backend::Component::mlp_output), "corrupt", "wilson",
                                           {{"kind", "mlp_control"}, {"series", "mlp_topk"}, {"x", k}, {"k", k}, {"layers", layers}})});
            }
            if (cfg.at("reference").get<bool>()) plan_reference(plan, spec, pos);
            break;
        }
        case ExperimentKind::steer_fit:
            plan.push_back({"steer_fit", "steer_fit",
                            {{"schemes", cfg.at("schemes")}, {"positions", cfg.at("positions")},
                             {"layers", resolve_layers(cfg.at("layers"), spec)}}});
            break;
        case ExperimentKind::steer_sweep: {
            const auto layers = resolve_layers(cfg.at("layers"), spec);
            for (const auto& pos : resolve_positions(cfg.at("positions"))) {
                for (int l : layers) {
                    plan.push_back({interventions::sweep_cell_id("steer", pos, l), "steer",
                                    {{"schemes", cfg.at("schemes")},
                                     {"layer", l},
                                     {"position", pos.to_json()},
                                     {"alpha", cfg.at("alpha")},
                                     {"max_pairs", cfg.at("schemes").at("max_pairs")},
                                     {"meta", {{"kind", "steer"}, {"series", pos.label()}, {"x", l}, {"layer", l}}}}});
                }
            }
            break;
        }
        case ExperimentKind::probe_pile:
        case ExperimentKind::probe_couplets: {
            const auto layers = resolve_layers(cfg.at("layers"), spec);
            const bool pile = ctx.kind == ExperimentKind::probe_pile;
            for (const auto& v : cfg.at(pile ? "ks" : "positions")) {
                const std::string label = pile ? "k=" + std::to_string(v.get<int>()) : RelPosition::parse(v).label();
                for (int l : layers) {
                    plan.push_back({std::string(pile ? "probe_pile/" : "probe_couplets/") + label + "/L" + std::to_string(l),
                                    "probe",
                                    {{"layer", l}, {"axis_value", v}, {"meta", {{"series", label}, {"x", l}}}}});
                }
            }
            break;
        }
        case ExperimentKind::report: break;
    }
    return plan;
}

std::string iso_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

json environment(const json& cfg) {
    json env = {{"toolkit_version", std::string(kToolkitVersion)},
                {"compiler", __VERSION__},
                {"hardware_threads", std::thread::hardware_concurrency()},
                {"started", iso_now()}};
    if (cfg.contains("device")) {
        env["device"] = cfg["device"]["device"];
        env["precision"] = cfg["device"]["precision"];
        env["deterministic"] = cfg["device"]["deterministic"];
    }
    return env;
}

CellRecord run_one(Context& ctx, const PlannedCell& pc) {
    CellRecord rec;
    rec.cell_id = pc.cell_id;
    rec.kind = pc.kind;
    rec.condition = pc.spec;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        rec.payload = execute_spec(ctx, pc.cell_id, pc.kind, pc.spec);
        rec.status = "ok";
        if (rec.payload.is_object() && rec.payload.value("failed", false)) {
            rec.status = "failed";
            rec.error = rec.payload.value("error", std::string());
        }
    } catch (const std::exception& e) {
        rec.status = "failed";
        rec.error = e.what();
        rec.payload = nullptr;
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
}

}  // namespace

RunOutcome run(const ExperimentConfig& config, const RunFlags& flags) {
    RunOutcome out;
    fs::create_directories(config.out);
    out.record_path = config.out / "record.jsonl";
    const bool exists = fs::exists(out.record_path);
    if (exists && !flags.resume) {
        throw ValidationError("run record already exists at " + out.record_path.string() + " (use --resume)");
    }
    std::optional<RunRecord> previous;
    if (exists) {
        previous = load_record(out.record_path);
        if (previous->config_hash() != config.hash()) {
            throw ValidationError("config hash " + config.hash() + " does not match the record's " +
                                  previous->config_hash() + "; refusing to resume");
        }
    }

    if (config.kind == ExperimentKind::report) {
        std::vector<RunRecord> records;
        for (const auto& p : config.json.at("records")) records.push_back(load_record(p.get<std::string>()));
        RecordWriter writer(out.record_path, exists);
        if (!exists) {
            writer.header({{"config_hash", config.hash()},
                           {"toolkit_version", std::string(kToolkitVersion)},
                           {"config", config.json},
                           {"model_spec", nullptr},
                           {"environment", environment(config.json)}});
        }
        CellRecord rec{"report", "report", "ok", 0.0, {{"records", config.json.at("records")}}, nullptr, ""};
        const auto t0 = std::chrono::steady_clock::now();
        try {
            out.files = report(records, {config.out, config.json.at("group_by_model").get<bool>()});
            rec.payload = {{"files", out.files}};
        } catch (const std::exception& e) {
            rec.status = "failed";
            rec.error = e.what();
        }
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        writer.cell(rec);
        ++out.executed;
        if (!rec.ok()) ++out.failed;
        return out;
    }

    Context ctx = open_context(config.json);
    if (!flags.quiet) {
        for (const auto& w : ctx.warnings) std::cerr << "warning: " << w << "\n";
    }
    RecordWriter writer(out.record_path, exists);
    if (!exists) {
        writer.header({{"config_hash", config.hash()},
                       {"toolkit_version", std::string(kToolkitVersion)},
                       {"config", config.json},
                       {"model_spec", ctx.model->spec()},
                       {"environment", environment(config.json)}});
    }

    std::map<std::string, json> done;
    if (previous) {
        for (const auto& c : previous->latest()) {
            if (c.ok()) done[c.cell_id] = c.payload;
        }
    }
    auto lookup = [&](const std::string& id) -> const json* {
        auto it = done.find(id);
        return it == done.end() ? nullptr : &it->second;
    };

    std::set<std::string> visited;
    // Two passes: rankings first, then the cells planned from them.
    for (int pass = 0; pass < 2; ++pass) {
        const auto plan = plan_cells(ctx, lookup);
        std::vector<const PlannedCell*> todo;
        for (const auto& pc : plan) {
            if (visited.count(pc.cell_id)) continue;
            visited.insert(pc.cell_id);
            if (done.count(pc.cell_id)) {
                ++out.skipped;
                continue;
            }
            todo.push_back(&pc);
        }
        if (todo.empty()) continue;

        if (probes(ctx.kind) && !ctx.dataset) {
            std::vector<int> layers;
            json values = json::array();
            for (const auto* pc : todo) {
                const int l = pc->spec.at("layer").get<int>();
                if (std::find(layers.begin(), layers.end(), l) == layers.end()) layers.push_back(l);
                if (std::find(values.begin(), values.end(), pc->spec.at("axis_value")) == values.end()) {
                    values.push_back(pc->spec.at("axis_value"));
                }
            }
            std::vector<std::vector<TokenId>> completions;
            if (!flags.quiet) std::cerr << "building probe dataset...\n";
            ctx.dataset = build_probe_data(ctx, layers, values, &completions);
            ctx.unigram = probing::build_unigram(completions);
        }
        if (ctx.kind == ExperimentKind::steer_sweep && !ctx.means) {
            const auto& schemes = schemes_for(ctx, config.json.at("schemes"));
            ctx.means = interventions::fit_scheme_means(*ctx.model, schemes, resolve_positions(config.json.at("positions")),
                                                        resolve_layers(config.json.at("layers"), ctx.model->spec()));
        }

        for (const auto* pc : todo) {
            auto rec = run_one(ctx, *pc);
            writer.cell(rec);
            ++out.executed;
            if (rec.ok()) {
                done[rec.cell_id] = rec.payload;
            } else {
                ++out.failed;
            }
            if (!flags.quiet) {
                std::cerr << rec.cell_id << " " << rec.status;
                if (rec.ok() && rec.payload.is_object() && rec.payload.contains("rate")) {
                    std::cerr << " rate=" << rec.payload["rate"].get<double>();
                }
                if (!rec.ok()) std::cerr << " (" << rec.error << ")";
                std::cerr << " " << std::fixed << std::setprecision(1) << rec.seconds << "s\n";
                std::cerr.unsetf(std::ios::floatfield);
            }
        }
    }
    return out;
}

ReplayResult replay(const RunRecord& record, const std::string& cell_id) {
    const CellRecord* stored = record.find(cell_id);
    if (!stored) throw ValidationError("cell " + cell_id + " not in the run record");
    std::vector<std::string> missing;
    if (!record.header.contains("config")) missing.push_back("header.config");
    if (stored->kind.empty()) missing.push_back("kind");
    if (stored->condition.is_null()) missing.push_back("condition");
    if (!missing.empty()) throw ValidationError("cannot replay " + cell_id + ": provenance missing " + join(missing, ", "));
    if (record.kind() == "report") throw ValidationError("report cells are not replayable; rerun the report");

    Context ctx = open_context(record.header.at("config"));
    ReplayResult r;
    r.stored = *stored;
    r.deterministic = record.header["config"]["device"].value("deterministic", true);
    r.recomputed = run_one(ctx, PlannedCell{stored->cell_id, stored->kind, stored->condition});
    r.identical = r.recomputed.status == stored->status && r.recomputed.payload == stored->payload;
    if (stored->ok() && r.recomputed.ok() && stored->payload.is_object() && stored->payload.contains("interval") &&
        r.recomputed.payload.contains("rate")) {
        const auto iv = stored->payload.at("interval").get<stats::Interval>();
        const double rate = r.recomputed.payload.at("rate").get<double>();
        r.within_interval = rate >= iv.lower - 1e-12 && rate <= iv.upper + 1e-12;
    } else {
        r.within_interval = r.identical;
    }
    if (r.deterministic && stored->ok() && !r.identical) {
        throw ValidationError("replay of " + cell_id + " differs from the stored result in deterministic mode");
    }
    return r;
}

}  // namespace plansite::runner
