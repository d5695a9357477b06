#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "plansite/common.hpp"

namespace plansite::runner {

enum class ExperimentKind {
    probe_pile,
    probe_couplets,
    patch_sweep,
    all_layers,
    baselines,
    head_rank,
    topk_heads,
    path_patch,
    mlp_control,
    steer_fit,
    steer_sweep,
    report
};

std::string to_string(ExperimentKind k);
ExperimentKind experiment_kind_from_string(const std::string& s);
/// "patch_sweep" <-> "patch-sweep".
std::string subcommand_name(ExperimentKind k);

/// Invalid config; `fields` lists every offending field path.
struct ConfigError : ValidationError {
    ConfigError(const std::vector<std::string>& fields, const std::vector<std::string>& problems);
    std::vector<std::string> fields;
    std::vector<std::string> problems;
};

/// Validated config. `json` is the normalized document (defaults filled, paths
/// made absolute) and is what the hash and the run record store.
struct ExperimentConfig {
    ExperimentKind kind = ExperimentKind::patch_sweep;
    nlohmann::json json;
    std::filesystem::path out;

    std::string hash() const;
};

/// Overrides applied on top of a config file (CLI global flags).
struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<bool> deterministic;
    std::optional<std::string> out;
    std::optional<std::string> model;
};

/// Validates and normalizes. Relative paths resolve against `base_dir`.
ExperimentConfig parse_config(const nlohmann::json& raw, const std::filesystem::path& base_dir = {},
                              const Overrides& overrides = {});
ExperimentConfig load_config(const std::filesystem::path& path, const Overrides& overrides = {});

/// FNV-1a 64 of the canonical (key-sorted, compact) dump, 16 hex digits.
std::string config_hash(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Run records

struct CellRecord {
    std::string cell_id;
    std::string kind;    // dispatcher kind, e.g. "patch", "probe", "head_rank"
    std::string status;  // "ok" | "failed"
    double seconds = 0.0;
    nlohmann::json condition;
    nlohmann::json payload;
    std::string error;

    bool ok() const { return status == "ok"; }
    friend bool operator==(const CellRecord&, const CellRecord&) = default;
};

void to_json(nlohmann::json& j, const CellRecord& c);
void from_json(const nlohmann::json& j, CellRecord& c);

struct RunRecord {
    nlohmann::json header;
    std::vector<CellRecord> cells;  // file order; later lines supersede earlier ones

    std::string config_hash() const { return header.value("config_hash", std::string()); }
    std::string model_id() const;
    std::string kind() const;
    /// Latest line for the cell, or nullptr.
    const CellRecord* find(const std::string& cell_id) const;
    /// Latest line per cell id, in first-seen order.
    std::vector<CellRecord> latest() const;
    bool any_failed() const;
};

/// Parses a JSON-lines record; the first line must be the header.
RunRecord load_record(const std::filesystem::path& path);
RunRecord parse_record(std::istream& in);
void write_record(std::ostream& out, const RunRecord& r);

/// Appends one line per call, flushed; safe to share between workers.
class RecordWriter {
public:
    RecordWriter(const std::filesystem::path& path, bool append);
    void header(const nlohmann::json& h);
    void cell(const CellRecord& c);

private:
    std::filesystem::path path_;
    std::mutex mu_;
};

struct RunOutcome {
    std::filesystem::path record_path;
    std::size_t executed = 0;
    std::size_t skipped = 0;
    std::size_t failed = 0;
    std::vector<std::string> files;  // report outputs
};

struct RunFlags {
    bool resume = false;
    bool quiet = false;
};

/// Executes every cell of the experiment, appending to <out>/record.jsonl.
/// Without `resume` an existing record is an error; with it, completed cells
/// are skipped and the stored config hash must match.
RunOutcome run(const ExperimentConfig& config, const RunFlags& flags = {});

struct ReplayResult {
    CellRecord stored;
    CellRecord recomputed;
    bool identical = false;
    bool within_interval = false;  // recomputed rate inside the stored interval
    bool deterministic = true;
};

/// Recomputes one cell from the record's config and the cell's condition.
/// Deterministic records throw ValidationError when the payloads differ.
ReplayResult replay(const RunRecord& record, const std::string& cell_id);

// ---------------------------------------------------------------------------
// Reports

struct ReportOptions {
    std::filesystem::path out_dir;
    bool group_by_model = true;  // false: one figure per kind over every record
};

/// Plots (SVG) with CSV/JSON sidecars and the all-layers Markdown table.
std::vector<std::string> report(const std::vector<RunRecord>& records, const ReportOptions& opts);

/// Markdown table: Family | Model | Last Word [95% CI] | i=0 [95% CI], percentages.
std::string all_layers_table(const std::vector<RunRecord>& records);

}  // namespace plansite::runner
