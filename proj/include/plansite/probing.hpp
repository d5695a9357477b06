#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "plansite/backend.hpp"
#include "plansite/common.hpp"
#include "plansite/corpus.hpp"
#include "plansite/phonology.hpp"
#include "plansite/stats.hpp"

namespace plansite::probing {

struct ProbeExample {
    std::vector<float> h;
    TokenId label = 0;
    std::string record_id;
    std::string split;  // "train" | "validation"
    std::string r1;     // rhyme reference (couplet datasets)
};

/// One (layer, position-or-k) cell.
struct ProbeDataset {
    std::string axis;  // "lookahead" | "couplet" | "synthetic"
    int layer = 0;
    corpus::RelPosition position;  // couplet axis
    int k = 0;                     // lookahead axis
    std::size_t width = 0;
    std::vector<ProbeExample> examples;

    std::string cell_label() const;
    std::size_t count(const std::string& split) const;
};

struct DatasetBuild {
    std::vector<ProbeDataset> cells;  // axis-value-major: cells[a * layers + l]
    std::size_t sequences = 0;
    std::map<std::string, std::size_t> excluded;  // reason -> count
};

struct LookaheadOptions {
    std::size_t max_new_tokens = 20;
};

/// Greedy continuation of each sample; h at layer l, position i labelled by the
/// token at i + k, for i from the last prompt token through the end.
DatasetBuild build_lookahead_dataset(const backend::Model& model, const std::vector<corpus::GeneralTextSample>& samples,
                                     const std::vector<int>& layers, const std::vector<int>& ks,
                                     const LookaheadOptions& opts = {},
                                     std::vector<std::vector<TokenId>>* completions = nullptr);

struct CoupletDatasetOptions {
    std::size_t max_new_tokens = 20;
};

/// Index of the first token of the final word in `tokens[begin, end)`, or nullopt.
std::optional<std::size_t> final_word_token(std::span<const TokenId> tokens, std::size_t begin, std::size_t end,
                                            const Tokenizer& tokenizer);

/// Greedy second lines; label = first token of the generated final word.
DatasetBuild build_couplet_dataset(const backend::Model& model, const std::vector<corpus::Couplet>& couplets,
                                   const std::vector<int>& layers, const std::vector<corpus::RelPosition>& positions,
                                   const CoupletDatasetOptions& opts = {},
                                   std::vector<std::vector<TokenId>>* completions = nullptr);

enum class LabelSpace { observed, full };

std::string to_string(LabelSpace s);
LabelSpace label_space_from_string(const std::string& s);

struct ProbeHyperparams {
    double lr = 1e-4;
    double weight_decay = 1e-3;
    std::size_t batch_size = 32;
    std::size_t epochs = 10;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double init_std = 0.01;
    std::uint64_t seed = 0;
    bool standardize = true;  // optimize on z-scored features, fold the scaling back into W and b
    LabelSpace label_space = LabelSpace::observed;
    std::size_t max_labels = 1000;  // observed space: most frequent training labels
};

void to_json(nlohmann::json& j, const ProbeHyperparams& h);
void from_json(const nlohmann::json& j, ProbeHyperparams& h);

/// softmax(W h + b) over `labels` (token ids, ascending).
struct LinearProbe {
    std::size_t width = 0;
    std::vector<TokenId> labels;
    std::vector<float> W;  // [labels][width]
    std::vector<float> b;
    ProbeHyperparams hyper;
    std::size_t epochs_completed = 0;
    std::vector<double> loss_history;  // mean training loss per epoch
    nlohmann::json meta;

    std::vector<float> scores(std::span<const float> h) const;
    std::vector<double> apply(std::span<const float> h) const;
    /// Label token ids ordered by score desc, token id asc.
    std::vector<TokenId> ranked(std::span<const float> h, std::size_t k) const;
};

struct TrainingDiverged : Error {
    TrainingDiverged(const std::string& what, std::vector<double> history) : Error(what), history(std::move(history)) {}
    std::vector<double> history;
};

/// AdamW on cross-entropy over the training split, examples shuffled per epoch by seed.
LinearProbe train_probe(const ProbeDataset& dataset, const ProbeHyperparams& hyper, std::size_t vocab_size);

void save_probe(const std::filesystem::path& path, const LinearProbe& probe);
LinearProbe load_probe(const std::filesystem::path& path);

struct ProbeEval {
    stats::Interval top1;
    stats::Interval top5;
    stats::Interval rhyme;   // top-1 prediction rhymes with r1
    stats::Interval rhyme5;  // any top-5 prediction rhymes with r1
    std::size_t n = 0;
    std::vector<bool> top1_hits;
    std::vector<bool> top5_hits;
    std::vector<bool> rhyme_hits;
    std::vector<bool> rhyme5_hits;
    std::vector<std::string> record_ids;
};

void to_json(nlohmann::json& j, const ProbeEval& e);
void from_json(const nlohmann::json& j, ProbeEval& e);

struct EvalOptions {
    bool allow_train_split = false;
    phonology::IdenticalWordPolicy policy = phonology::IdenticalWordPolicy::count_identical;
    double confidence = 0.95;
};

/// Scores predictions for examples of `split`. Rhyme accuracy needs a lexicon and r1 per example.
/// Under count_identical a prediction equal to the label is a rhyme hit.
ProbeEval evaluate_predictions(const ProbeDataset& dataset, const std::string& split,
                               const std::function<std::vector<TokenId>(const ProbeExample&)>& top5,
                               const Tokenizer* tokenizer, const phonology::PronunciationLexicon* lexicon,
                               const EvalOptions& opts);

ProbeEval evaluate_probe(const LinearProbe& probe, const ProbeDataset& dataset, const Tokenizer* tokenizer,
                         const phonology::PronunciationLexicon* lexicon, const EvalOptions& opts = {},
                         const std::string& split = "validation");

struct UnigramBaseline {
    std::vector<std::pair<TokenId, std::size_t>> counts;  // token id ascending
    std::size_t total = 0;

    double frequency(TokenId t) const;
    /// k most frequent tokens, ties by token id.
    std::vector<TokenId> top(std::size_t k) const;
};

UnigramBaseline build_unigram(const std::vector<std::vector<TokenId>>& completions);

ProbeEval unigram_eval(const UnigramBaseline& baseline, const ProbeDataset& dataset, const Tokenizer* tokenizer,
                       const phonology::PronunciationLexicon* lexicon, const EvalOptions& opts = {},
                       const std::string& split = "validation");

struct GridCell {
    int layer = 0;
    std::string axis_label;  // position label or "k=<k>"
    std::size_t n_train = 0;
    double final_loss = 0.0;
    ProbeEval eval;
    std::optional<ProbeEval> baseline;
};

void to_json(nlohmann::json& j, const GridCell& c);
void from_json(const nlohmann::json& j, GridCell& c);

struct ProbeGrid {
    std::string axis;
    std::vector<GridCell> cells;
    const GridCell* find(int layer, const std::string& axis_label) const;
};

void to_json(nlohmann::json& j, const ProbeGrid& g);
void from_json(const nlohmann::json& j, ProbeGrid& g);

/// Trains and evaluates one probe per dataset cell.
ProbeGrid train_grid(const DatasetBuild& build, const ProbeHyperparams& hyper, std::size_t vocab_size,
                     const Tokenizer* tokenizer, const phonology::PronunciationLexicon* lexicon,
                     const std::optional<UnigramBaseline>& baseline = std::nullopt,
                     const std::filesystem::path& checkpoint_dir = {}, const nlohmann::json& meta = {});

struct NewlineGap {
    double gap = 0.0;
    int peak_layer = 0;
    stats::Interval interval;
};

void to_json(nlohmann::json& j, const NewlineGap& g);

/// max over layers of acc(i=0) - acc(i=1) (top-1); paired interval at the peak layer.
NewlineGap newline_gap(const ProbeGrid& grid, const std::vector<int>& layers);

}  // namespace plansite::probing
