#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "plansite/backend.hpp"
#include "plansite/corpus.hpp"
#include "plansite/phonology.hpp"
#include "plansite/stats.hpp"

namespace plansite::interventions {

// ---------------------------------------------------------------------------
// Scoring

struct SampleVerdict {
    bool success = false;      // final word rhymes with the corrupt (target) word
    bool clean_rhyme = false;  // final word rhymes with the clean word
    bool unknown = false;      // rhyme verdict unknown for the target word
    std::string final_word;
    std::string reason;        // set when no final word could be extracted
};

struct RateResult {
    std::vector<SampleVerdict> verdicts;
    std::size_t successes = 0;
    std::size_t clean_rhymes = 0;
    std::size_t unknowns = 0;
    std::size_t total = 0;
    double rate() const { return total ? static_cast<double>(successes) / static_cast<double>(total) : 0.0; }
};

/// Second line as generated: prompt-side prefix + continuation up to the first newline.
std::string completed_line(const std::string& prefix, const std::string& continuation);

RateResult corrupt_rhyme_rate(const std::vector<std::string>& lines, const std::string& corrupt_word,
                              const std::string& clean_word, const phonology::PronunciationLexicon& lexicon,
                              phonology::IdenticalWordPolicy policy = phonology::IdenticalWordPolicy::count_identical);

// ---------------------------------------------------------------------------
// Cells

enum class SeedPolicy {
    per_cell,  // hash(base seed, pair id, cell key, sample index)
    shared     // base seed + sample index, identical across cells and pairs
};

std::string to_string(SeedPolicy p);
SeedPolicy seed_policy_from_string(const std::string& s);

std::uint64_t sample_seed(SeedPolicy policy, std::uint64_t base, const std::string& pair_id, const std::string& cell_key,
                          std::size_t sample);

enum class CellInterval { cluster_bootstrap, wilson };

struct RunOptions {
    std::size_t samples = 20;
    backend::DecodeParams decode;  // seed field ignored; per-sample seeds are derived
    std::uint64_t seed = 0;
    SeedPolicy seed_policy = SeedPolicy::per_cell;
    phonology::IdenticalWordPolicy policy = phonology::IdenticalWordPolicy::count_identical;
    stats::BootstrapOptions bootstrap;
    std::size_t transcripts_per_pair = 2;
};

void to_json(nlohmann::json& j, const RunOptions& o);
void from_json(const nlohmann::json& j, RunOptions& o);

struct PairOutcome {
    std::string pair_id;
    std::size_t n_success = 0;
    std::size_t n_total = 0;
    std::size_t n_unknown = 0;
    std::size_t n_clean_rhyme = 0;
    std::size_t n_nonfinite = 0;
    double rate() const { return n_total ? static_cast<double>(n_success) / static_cast<double>(n_total) : 0.0; }
    friend bool operator==(const PairOutcome&, const PairOutcome&) = default;
};

struct Transcript {
    std::string pair_id;
    std::size_t sample = 0;
    std::uint64_t seed = 0;
    std::string line;
    bool success = false;
    friend bool operator==(const Transcript&, const Transcript&) = default;
};

struct CellResult {
    std::string cell_id;
    nlohmann::json condition;  // full descriptor; enough to replay the cell
    std::vector<PairOutcome> pairs;
    double rate = 0.0;  // equal-weight mean of per-pair rates
    stats::Interval interval;
    std::vector<Transcript> transcripts;
    bool failed = false;
    std::string error;

    std::size_t successes() const;
    std::size_t total() const;
};

void to_json(nlohmann::json& j, const CellResult& c);
void from_json(const nlohmann::json& j, CellResult& c);

/// Builds the patch plan for one pair (sites resolved on the clean prompt).
using PlanBuilder = std::function<backend::PatchPlan(const corpus::PromptPair&)>;

/// Target/clean words for scoring a pair; defaults to (corrupt_word, clean_word).
struct Scoring {
    std::function<std::string(const corpus::PromptPair&)> target;
    std::function<std::string(const corpus::PromptPair&)> reference;
};

/// Runs n samples per pair on the clean prompt under the pair's plan.
CellResult run_cell(const backend::Model& model, const std::vector<corpus::PromptPair>& pairs,
                    const PlanBuilder& plan_for, const std::string& cell_id, const std::string& cell_key,
                    nlohmann::json condition, const RunOptions& opts, const phonology::PronunciationLexicon& lexicon,
                    CellInterval interval = CellInterval::cluster_bootstrap, const Scoring& scoring = {});

/// One intervention site relative to the newline.
struct SiteSpec {
    int layer = 0;
    corpus::RelPosition position;
    backend::Component component = backend::Component::residual_post_block;
    int head = -1;

    backend::HookSite resolve(const corpus::PositionMap& m) const;
    std::string key() const;
    friend bool operator==(const SiteSpec&, const SiteSpec&) = default;
};

void to_json(nlohmann::json& j, const SiteSpec& s);
void from_json(const nlohmann::json& j, SiteSpec& s);

/// Seed key for a site set: site keys joined by "+", "clean" when empty.
std::string sites_key(const std::vector<SiteSpec>& sites);

/// Clean and corrupt maps must agree at every requested site.
void check_aligned(const corpus::PromptPair& pair, const std::vector<SiteSpec>& sites);

/// Replaces every site with the corrupt prompt's activation.
CellResult run_patch_cell(const backend::Model& model, const std::vector<corpus::PromptPair>& pairs,
                          const std::vector<SiteSpec>& sites, const RunOptions& opts,
                          const phonology::PronunciationLexicon& lexicon,
                          CellInterval interval = CellInterval::cluster_bootstrap);

enum class PatchSource { corrupt, zero, donor };

std::string to_string(PatchSource s);
PatchSource patch_source_from_string(const std::string& s);

/// Seed key of a patch cell: sites_key, prefixed "baseline_<source>:" for zero/donor.
std::string patch_cell_key(const std::vector<SiteSpec>& sites, PatchSource source);

/// One patch cell under an explicit id. Donor activations come from `donor_text`
/// at the same absolute positions. Produces the same result as the sweep helpers.
CellResult patch_cell(const backend::Model& model, const std::vector<corpus::PromptPair>& pairs,
                      const std::vector<SiteSpec>& sites, PatchSource source, const RunOptions& opts,
                      const phonology::PronunciationLexicon& lexicon, CellInterval interval, const std::string& cell_id,
                      nlohmann::json condition, std::string_view donor_text = {});

/// Rate of the unpatched clean prompts (same seed derivation as the named cell key).
CellResult clean_cell(const backend::Model& model, const std::vector<corpus::PromptPair>& pairs, const RunOptions& opts,
                      const phonology::PronunciationLexicon& lexicon, const std::string& cell_key = "clean");

struct SweepResult {
    std::string kind;
    std::vector<int> layers;
    std::vector<corpus::RelPosition> positions;
    std::vector<CellResult> cells;  // position-major: cells[p * layers.size() + l]
    std::optional<double> reference;  // best single-layer newline rate
    std::optional<int> reference_layer;
    std::vector<std::string> failures;

    const CellResult& cell(std::size_t position_index, std::size_t layer_index) const {
        return cells.at(position_index * layers.size() + layer_index);
    }
};

void to_json(nlohmann::json& j, const SweepResult& s);

/// Cell ids are "<kind>/<position label>/L<layer>".
std::string sweep_cell_id(const std::string& kind, const corpus::RelPosition& pos, int layer);

SweepResult layer_position_sweep(const backend::Model& model, const std::vector<corpus::PromptPair>& pairs,
                                 const std::vector<corpus::RelPosition>& positions, const std::vector<int>& layers,
                                 const RunOptions& opts, const phonology::PronunciationLexicon& lexicon);

/// Every layer patched at once at one position; Wilson interval on the pooled N.
CellResult all_layers_patch(const backend::Model& model, const std::vector<corpus::PromptPair>& pairs,
                            const corpus::RelPosition& position, const RunOptions& opts,
                            const phonology::PronunciationLexicon& lexicon);

inline constexpr std::string_view kDefaultDonor =
    "The weather outside is warm and sunny today, and the birds are singing.";

enum class BaselineKind { zero, donor };

std::string to_string(BaselineKind k);
BaselineKind baseline_kind_from_string(const std::string& s);

/// Zero-vector or donor-sentence replacement at the same absolute position, Wilson per cell.
SweepResult baseline_patch(const backend::Model& model, const std::vector<corpus::PromptPair>& pairs, BaselineKind kind,
                           const corpus::RelPosition& position, const std::vector<int>& layers, const RunOptions& opts,
                           const phonology::PronunciationLexicon& lexicon, std::string_view donor_text = kDefaultDonor);

// ---------------------------------------------------------------------------
// Steering

struct SchemePrompt {
    std::string id;
    std::vector<TokenId> tokens;
    corpus::PositionMap map;
    std::string rhyme_word;
};

/// Truncation prompts grouped by rhyme scheme of r1.
struct Scheme {
    std::string name;   // rhyme key, e.g. "AY T"
    std::string word;   // representative word used for scoring
    std::vector<SchemePrompt> fit;
    std::vector<SchemePrompt> heldout;
};

/// Groups couplets by r1 rhyme key; keeps the `count` largest schemes with at
/// least fit + heldout prompts (train split feeds fit, validation feeds heldout).
std::vector<Scheme> build_schemes(const std::vector<corpus::Couplet>& couplets, const Tokenizer& tokenizer,
                                  const phonology::PronunciationLexicon& lexicon, std::size_t count, std::size_t fit,
                                  std::size_t heldout);

struct SteeringVector {
    std::string source;
    std::string target;
    int layer = 0;
    corpus::RelPosition position;
    std::vector<float> vector;
    std::size_t source_count = 0;
    std::size_t target_count = 0;
};

void to_json(nlohmann::json& j, const SteeringVector& v);
void from_json(const nlohmann::json& j, SteeringVector& v);

/// mean(target activations) - mean(source activations) at (layer, position).
SteeringVector fit_steering_vector(const backend::Model& model, const std::vector<SchemePrompt>& source,
                                   const std::vector<SchemePrompt>& target, int layer,
                                   const corpus::RelPosition& position, const std::string& source_name = "s",
                                   const std::string& target_name = "t");

/// Per-scheme mean residuals at every (layer, position); v(s->t) = mean_t - mean_s.
struct SchemeMeans {
    std::vector<int> layers;
    std::vector<corpus::RelPosition> positions;
    std::vector<std::string> schemes;
    // means[scheme][position][layer] -> width-d vector
    std::vector<std::vector<std::vector<std::vector<float>>>> means;
    std::vector<std::size_t> counts;

    SteeringVector vector(std::size_t s, std::size_t t, std::size_t position_index, std::size_t layer_index) const;
};

SchemeMeans fit_scheme_means(const backend::Model& model, const std::vector<Scheme>& schemes,
                             const std::vector<corpus::RelPosition>& positions, const std::vector<int>& layers);

/// One steering cell at (means.positions[p], means.layers[l]).
CellResult steer_cell(const backend::Model& model, const std::vector<Scheme>& schemes, const SchemeMeans& means,
                      std::size_t position_index, std::size_t layer_index, double alpha, const RunOptions& opts,
                      const phonology::PronunciationLexicon& lexicon, std::size_t max_scheme_pairs,
                      const std::string& cell_id, nlohmann::json condition);

/// alpha * v(s->t) added at (layer, position) on held-out prompts of s; success = rhymes with t.
/// Clusters are ordered scheme pairs; the rate is their equal-weight mean.
SweepResult steered_sweep(const backend::Model& model, const std::vector<Scheme>& schemes, const SchemeMeans& means,
                          double alpha, const RunOptions& opts, const phonology::PronunciationLexicon& lexicon,
                          std::size_t max_scheme_pairs = 0);

}  // namespace plansite::interventions
