#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "plansite/phonology.hpp"
#include "plansite/tokenizer.hpp"

namespace plansite::corpus {

inline constexpr std::string_view kDefaultPreamble = "A rhyming couplet:\n";

struct Couplet {
    std::string id;
    std::string line1;
    std::string line2;
    std::string r1;
    std::string r2;
    std::string topic;
    std::string split;  // "train" | "validation"

    friend bool operator==(const Couplet&, const Couplet&) = default;
};

void to_json(nlohmann::json& j, const Couplet& c);
void from_json(const nlohmann::json& j, Couplet& c);

struct RecordIssue {
    std::string record_id;  // "line N" when the record has no usable id
    std::string reason;
};

struct CoupletLoadResult {
    std::vector<Couplet> couplets;
    std::size_t train = 0;
    std::size_t validation = 0;
    std::vector<RecordIssue> rejected;
    std::vector<std::string> warnings;  // e.g. rhyme words missing from the lexicon
};

struct CoupletLoadOptions {
    double max_reject_fraction = 0.10;
    phonology::IdenticalWordPolicy policy = phonology::IdenticalWordPolicy::count_identical;
};

/// Why a couplet violates its invariants, or nullopt when valid. Unknown
/// rhyme verdicts are valid (reported as warnings by the loader).
std::optional<std::string> couplet_violation(const Couplet& c, const phonology::PronunciationLexicon& lexicon,
                                             phonology::IdenticalWordPolicy policy);

/// JSON-lines couplet dataset. Invalid records are listed and excluded; more
/// than max_reject_fraction of them aborts with ValidationError.
CoupletLoadResult load_couplets(const std::filesystem::path& path, const phonology::PronunciationLexicon& lexicon,
                                const CoupletLoadOptions& opts = {});

void save_couplets(const std::filesystem::path& path, const std::vector<Couplet>& couplets);

/// preamble + line1 + "\n"; the second line is dropped entirely.
std::string truncation_prompt(const Couplet& c, std::string_view preamble = kDefaultPreamble);

/// Relative positions around the line-ending newline (relative 0).
struct PositionMap {
    std::size_t newline_index = 0;
    std::size_t last_word_index = 0;  // first token of the last word
    int last_word_rel = -1;
    std::size_t last_word_tokens = 1;
    bool comma_newline_fused = false;
    bool multi_token_word = false;
    std::size_t sequence_length = 0;

    /// Absolute index for relative position `rel`; may point past the
    /// sequence (generated positions). Throws RangeError below zero.
    std::size_t absolute(int rel) const;
    int relative(std::size_t absolute_index) const {
        return static_cast<int>(absolute_index) - static_cast<int>(newline_index);
    }

    friend bool operator==(const PositionMap&, const PositionMap&) = default;
};

void to_json(nlohmann::json& j, const PositionMap& m);

/// Scans backward for the newline-bearing token and the first token of the word before it.
PositionMap resolve_positions(std::span<const TokenId> tokens, const Tokenizer& tokenizer);

/// A relative position spec: either a literal offset or the symbolic last-word site.
struct RelPosition {
    bool last_word = false;
    int offset = 0;

    static RelPosition at(int offset) { return RelPosition{false, offset}; }
    static RelPosition last_word_site() { return RelPosition{true, 0}; }
    static RelPosition parse(const nlohmann::json& j);
    nlohmann::json to_json() const;
    std::string label() const;
    int resolve(const PositionMap& m) const { return last_word ? m.last_word_rel : offset; }
    friend bool operator==(const RelPosition&, const RelPosition&) = default;
};

struct PromptPairSpec {
    std::string pair_id;
    std::string template_text;  // contains "{word}" exactly once
    std::string clean_word;
    std::string corrupt_word;
};

std::vector<PromptPairSpec> load_prompt_pair_specs(const std::filesystem::path& path);

struct PromptPair {
    std::string pair_id;
    std::string clean_prompt;
    std::string corrupt_prompt;
    std::string clean_word;
    std::string corrupt_word;
    std::vector<TokenId> clean_tokens;
    std::vector<TokenId> corrupt_tokens;
    PositionMap clean_map;
    PositionMap corrupt_map;

    /// Second-line text already present in the prompt (after the newline).
    std::string line2_prefix() const;
};

struct PromptPairBuild {
    std::vector<PromptPair> pairs;
    std::vector<RecordIssue> rejected;
};

/// Rejects specs whose words rhyme (or cannot be checked), whose prompts
/// tokenize to different lengths, or whose positions fail to resolve.
PromptPairBuild build_prompt_pairs(const std::vector<PromptPairSpec>& specs, const Tokenizer& tokenizer,
                                   const phonology::PronunciationLexicon& lexicon);

struct GeneralTextSample {
    std::vector<TokenId> tokens;
    std::string doc_id;
    std::size_t source_offset = 0;
    std::string split;
};

struct LengthBounds {
    std::size_t min_tokens = 8;
    std::size_t max_tokens = 32;
};

/// One window per document, documents drawn without replacement. With n = 1200
/// the split is 1000 train / 200 validation; in general round(n / 6) validation.
std::vector<GeneralTextSample> sample_general_text(const std::filesystem::path& corpus_path, const Tokenizer& tokenizer,
                                                   std::size_t n, LengthBounds bounds, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Couplet synthesis through an external text-generation provider.

class TextProvider {
public:
    virtual ~TextProvider() = default;
    virtual std::string complete(const std::string& prompt) = 0;
};

/// Replays canned responses (JSON lines with a "response" field) in order.
class FixtureProvider final : public TextProvider {
public:
    explicit FixtureProvider(const std::filesystem::path& path);
    explicit FixtureProvider(std::vector<std::string> responses) : responses_(std::move(responses)) {}
    std::string complete(const std::string& prompt) override;
    std::size_t served() const { return next_; }
    const std::vector<std::string>& prompts() const { return prompts_; }

private:
    std::vector<std::string> responses_;
    std::vector<std::string> prompts_;
    std::size_t next_ = 0;
};

/// OpenAI-compatible chat-completions endpoint over plain HTTP. The API key
/// comes from the named environment variable. Calls are serialized.
class HttpProvider final : public TextProvider {
public:
    struct Options {
        std::string host = "127.0.0.1";
        int port = 8080;
        std::string path = "/v1/chat/completions";
        std::string model = "default";
        std::string api_key_env = "PLANSITE_PROVIDER_KEY";
        double temperature = 1.0;
        int timeout_seconds = 60;
        int min_interval_ms = 0;
    };
    explicit HttpProvider(Options opts);
    ~HttpProvider() override;
    std::string complete(const std::string& prompt) override;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

struct SynthesisSpec {
    std::size_t count = 10;
    std::vector<std::string> topics = {"nature"};
    std::size_t max_attempts = 0;  // 0 = 5 * count
    std::size_t provider_retries = 3;
    double min_yield = 0.2;        // accepted / attempts below this aborts
    std::string id_prefix = "syn";
};

struct SynthesisReport {
    std::vector<Couplet> couplets;
    std::size_t attempts = 0;
    std::size_t provider_failures = 0;
    std::vector<RecordIssue> rejected;
};

std::string synthesis_prompt(const std::string& topic);

SynthesisReport synthesize_couplets(TextProvider& provider, const SynthesisSpec& spec,
                                    const phonology::PronunciationLexicon& lexicon);

}  // namespace plansite::corpus
