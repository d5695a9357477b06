#pragma once

#include <compare>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "plansite/backend.hpp"
#include "plansite/corpus.hpp"
#include "plansite/interventions.hpp"

namespace plansite::circuits {

struct HeadRef {
    int layer = 0;
    int head = 0;
    friend auto operator<=>(const HeadRef&, const HeadRef&) = default;
};

struct HeadScore {
    int layer = 0;
    int head = 0;
    double score = 0.0;
};

/// Heads ordered by (score desc, layer asc, head asc).
struct HeadRanking {
    int first_layer = 0;
    int last_layer = 0;
    std::size_t heads = 0;
    corpus::RelPosition query;
    corpus::RelPosition key;
    std::vector<HeadScore> order;
    std::vector<double> grid;  // [layer - first_layer][head]

    double score(int layer, int head) const;
    std::vector<HeadRef> top(std::size_t k) const;
};

void to_json(nlohmann::json& j, const HeadRanking& r);
void from_json(const nlohmann::json& j, HeadRanking& r);

/// Mean attention weight query -> key over {clean, corrupt} x pairs.
HeadRanking rank_heads(const backend::Model& model, const std::vector<corpus::PromptPair>& pairs, int first_layer,
                       int last_layer, const corpus::RelPosition& query = corpus::RelPosition::at(0),
                       const corpus::RelPosition& key = corpus::RelPosition::last_word_site());

/// Ranking by attention from the newline to the comma just before it.
/// Throws UnsupportedError("no comma position") on comma-newline fused tokenizations.
HeadRanking rank_heads_to_comma(const backend::Model& model, const std::vector<corpus::PromptPair>& pairs,
                                int first_layer, int last_layer);

enum class HeadSetKind { topk, random, comma };

std::string to_string(HeadSetKind k);
HeadSetKind head_set_kind_from_string(const std::string& s);

struct HeadSet {
    std::vector<HeadRef> heads;
    HeadSetKind provenance = HeadSetKind::topk;
    std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const HeadSet& s);

HeadSet topk_set(const HeadRanking& ranking, std::size_t k);

/// random: uniform k-subset of the ranking's layer range excluding its top-k.
/// comma: top-k of `comma_ranking` (required for that kind).
HeadSet control_head_set(const HeadRanking& ranking, std::size_t k, HeadSetKind kind, std::uint64_t seed,
                         const backend::ModelSpec& spec, const HeadRanking* comma_ranking = nullptr);

struct Reference {
    double rate = 0.0;
    std::string cell_id;
};

/// Best single-layer residual patch at the position (default newline).
Reference full_residual_reference(const backend::Model& model, const std::vector<corpus::PromptPair>& pairs,
                                  const interventions::RunOptions& opts, const phonology::PronunciationLexicon& lexicon,
                                  const corpus::RelPosition& position = corpus::RelPosition::at(0));

struct PathPatchResult {
    std::string strategy;
    std::vector<std::size_t> ks;
    std::vector<interventions::CellResult> cells;
    std::vector<std::optional<double>> recovered;  // rate / reference
    std::optional<Reference> reference;
    std::vector<std::string> failures;
};

void to_json(nlohmann::json& j, const PathPatchResult& r);

/// Simultaneous replacement of each set's head outputs at the position with the corrupt run's.
PathPatchResult head_set_patch(const backend::Model& model, const std::vector<corpus::PromptPair>& pairs,
                               const std::vector<HeadSet>& sets, const corpus::RelPosition& position,
                               const interventions::RunOptions& opts, const phonology::PronunciationLexicon& lexicon,
                               const std::optional<Reference>& reference = std::nullopt,
                               const std::string& strategy = "topk_heads");

PathPatchResult topk_head_patch(const backend::Model& model, const std::vector<corpus::PromptPair>& pairs,
                                const HeadRanking& ranking, const std::vector<std::size_t>& ks,
                                const corpus::RelPosition& position, const interventions::RunOptions& opts,
                                const phonology::PronunciationLexicon& lexicon,
                                const std::optional<Reference>& reference = std::nullopt);

enum class Stage1Mode {
    full_column,  // corrupt source residual at every layer
    single_layer  // corrupt source residual only at `stage1_layer`
};

std::string to_string(Stage1Mode m);
Stage1Mode stage1_mode_from_string(const std::string& s);

struct PathOptions {
    corpus::RelPosition source = corpus::RelPosition::last_word_site();
    corpus::RelPosition dest = corpus::RelPosition::at(0);
    Stage1Mode mode = Stage1Mode::full_column;
    int stage1_layer = -1;  // single_layer only; -1 = one below the lowest candidate head
};

void to_json(nlohmann::json& j, const PathOptions& o);
void from_json(const nlohmann::json& j, PathOptions& o);

/// One two-stage cell for a single head set; an empty set is the clean run.
interventions::CellResult path_patch_cell(const backend::Model& model, const std::vector<corpus::PromptPair>& pairs,
                                          const HeadSet& set, const PathOptions& path,
                                          const interventions::RunOptions& opts,
                                          const phonology::PronunciationLexicon& lexicon, const std::string& cell_id,
                                          nlohmann::json condition);

/// Head sites for a set at a position.
std::vector<interventions::SiteSpec> head_sites(const HeadSet& set, const corpus::RelPosition& position);

/// Stage 1 caches head outputs at dest under a source-only patch;
/// stage 2 substitutes them into an otherwise clean generation.
PathPatchResult two_stage_path_patch(const backend::Model& model, const std::vector<corpus::PromptPair>& pairs,
                                     const std::vector<HeadSet>& sets, const PathOptions& path,
                                     const interventions::RunOptions& opts,
                                     const phonology::PronunciationLexicon& lexicon,
                                     const std::optional<Reference>& reference = std::nullopt);

/// Layers ordered by mean L2 distance between clean and corrupt MLP outputs at the position.
struct LayerScore {
    int layer = 0;
    double score = 0.0;
};

std::vector<LayerScore> rank_mlp_layers(const backend::Model& model, const std::vector<corpus::PromptPair>& pairs,
                                        const corpus::RelPosition& position);

/// Top-k MLP outputs replaced with corrupt's; Wilson intervals.
PathPatchResult topk_mlp_patch(const backend::Model& model, const std::vector<corpus::PromptPair>& pairs,
                               const std::vector<LayerScore>& ranking, const std::vector<std::size_t>& ks,
                               const corpus::RelPosition& position, const interventions::RunOptions& opts,
                               const phonology::PronunciationLexicon& lexicon,
                               const std::optional<Reference>& reference = std::nullopt);

/// One head at a time; cells are layer-major over [first_layer, last_layer] x heads.
struct HeadGrid {
    int first_layer = 0;
    std::size_t heads = 0;
    std::vector<interventions::CellResult> cells;
    std::vector<std::string> failures;
    const interventions::CellResult& at(int layer, int head) const {
        return cells.at(static_cast<std::size_t>(layer - first_layer) * heads + static_cast<std::size_t>(head));
    }
};

void to_json(nlohmann::json& j, const HeadGrid& g);

HeadGrid single_head_sweep(const backend::Model& model, const std::vector<corpus::PromptPair>& pairs, int first_layer,
                           int last_layer, const corpus::RelPosition& position, const interventions::RunOptions& opts,
                           const phonology::PronunciationLexicon& lexicon);

}  // namespace plansite::circuits
