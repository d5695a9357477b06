#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "plansite/random.hpp"
#include "plansite/tokenizer.hpp"
#include "plansite/weights.hpp"

namespace plansite::backend {

struct ModelSpec {
    std::string model_id;
    std::string family;  // hook layout name, e.g. "gpt2", "llama", "gemma3"
    std::size_t layers = 0;
    std::size_t hidden = 0;
    std::size_t vocab = 0;
    std::size_t heads = 0;
    std::size_t kv_heads = 0;
    std::size_t head_dim = 0;
    std::size_t attention_width = 0;  // heads * head_dim
    std::size_t context = 0;
    bool fuses_comma_newline = false;

    void validate() const;
    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

void to_json(nlohmann::json& j, const ModelSpec& s);

enum class Component { residual_post_block, attention_head, attention_output, mlp_output };

std::string to_string(Component c);
Component component_from_string(const std::string& s);

/// A hook site at an absolute token position. Relative positions are resolved
/// through corpus::PositionMap before a site is built.
struct HookSite {
    int layer = 0;
    std::size_t position = 0;
    Component component = Component::residual_post_block;
    int head = -1;  // attention_head only

    static HookSite residual(int layer, std::size_t pos) { return {layer, pos, Component::residual_post_block, -1}; }
    static HookSite attn_head(int layer, std::size_t pos, int h) { return {layer, pos, Component::attention_head, h}; }
    static HookSite attn_out(int layer, std::size_t pos) { return {layer, pos, Component::attention_output, -1}; }
    static HookSite mlp(int layer, std::size_t pos) { return {layer, pos, Component::mlp_output, -1}; }

    std::size_t width(const ModelSpec& spec) const;
    /// Throws RangeError for bad layer/head (position is checked by the caller).
    void check(const ModelSpec& spec) const;
    std::string label() const;

    auto operator<=>(const HookSite&) const = default;
};

void to_json(nlohmann::json& j, const HookSite& s);
void from_json(const nlohmann::json& j, HookSite& s);

/// Captured activations. Immutable after being returned by the runtime.
class ActivationStore {
public:
    struct Provenance {
        std::uint64_t prompt_hash = 0;
        std::size_t decode_step = 0;
    };

    void insert(const HookSite& site, std::vector<float> v, std::size_t expected_width);
    bool contains(const HookSite& site) const { return data_.count(site) != 0; }
    const std::vector<float>& at(const HookSite& site) const;
    std::size_t size() const { return data_.size(); }
    const std::map<HookSite, std::vector<float>>& entries() const { return data_; }

    Provenance provenance;

private:
    std::map<HookSite, std::vector<float>> data_;
};

std::uint64_t hash_tokens(std::span<const TokenId> tokens);

enum class PatchKind { replace, zero, add_scaled };

struct PatchEntry {
    HookSite site;
    PatchKind kind = PatchKind::replace;
    std::vector<float> vector;  // unused for zero
    float alpha = 1.0f;         // add_scaled: x += alpha * vector
};

enum class PatchScope { every_step, prompt_only, steps };

/// Step 0 is the prompt pass; step s >= 1 computes the s-th generated token's position.
struct PatchPlan {
    std::vector<PatchEntry> entries;
    PatchScope scope = PatchScope::every_step;
    std::vector<std::size_t> steps;

    PatchPlan& replace(const HookSite& s, std::vector<float> v);
    PatchPlan& zero(const HookSite& s);
    PatchPlan& add(const HookSite& s, std::vector<float> v, float alpha);

    bool empty() const { return entries.empty(); }
    /// Throws ValidationError on width mismatch, duplicate sites or non-finite vectors.
    void validate(const ModelSpec& spec) const;
};

struct DecodeParams {
    double temperature = 1.0;
    double top_p = 0.95;
    std::uint64_t seed = 0;
    std::size_t max_new_tokens = 20;
    bool stop_at_newline = true;

    friend bool operator==(const DecodeParams&, const DecodeParams&) = default;
};

void to_json(nlohmann::json& j, const DecodeParams& p);
void from_json(const nlohmann::json& j, DecodeParams& p);

struct Generation {
    std::vector<TokenId> prompt;
    std::vector<TokenId> continuation;
    std::string text;  // decoded continuation
    std::vector<double> logprobs;
    DecodeParams params;
    bool stopped = false;            // stop mark produced
    bool nonfinite_logits = false;   // sampling aborted
    std::optional<ActivationStore> captures;
};

/// Post-softmax attention probabilities for a contiguous layer range.
struct AttentionMap {
    int first_layer = 0;
    std::size_t heads = 0;
    std::size_t length = 0;
    std::vector<float> weights;  // [layer-first][head][query][key], keys > query are 0

    float at(int layer, int head, std::size_t query, std::size_t key) const;
    std::size_t layers() const { return length ? weights.size() / (heads * length * length) : 0; }
};

struct ForwardOptions {
    const PatchPlan* plan = nullptr;
    std::vector<HookSite> capture;
    bool all_logits = false;
};

struct ForwardResult {
    std::vector<float> logits;               // next-token logits at the last position
    std::vector<std::vector<float>> all;     // per position, when requested
    ActivationStore captures;
};

class Session;

/// In-process transformer runtime. Every position is computed once with a
/// key/value cache, so a full forward pass and incremental decoding share the
/// same arithmetic and a patch at a context position is what every later step reads.
class Model {
public:
    Model(std::string model_id, ArchConfig arch, Weights weights, std::shared_ptr<const Tokenizer> tokenizer);
    ~Model();

    const ModelSpec& spec() const { return spec_; }
    const ArchConfig& arch() const { return arch_; }
    const Tokenizer& tokenizer() const { return *tokenizer_; }
    std::shared_ptr<const Tokenizer> tokenizer_ptr() const { return tokenizer_; }

    ForwardResult forward(std::span<const TokenId> tokens, const ForwardOptions& opts = {}) const;
    std::vector<float> logits(std::span<const TokenId> tokens, const PatchPlan* plan = nullptr) const;

    ActivationStore capture(std::span<const TokenId> tokens, std::span<const HookSite> sites) const;

    Generation generate(std::span<const TokenId> prompt, const DecodeParams& params, const PatchPlan* plan = nullptr,
                        std::span<const HookSite> capture = {}) const;

    /// One prompt pass shared by every sample; sample s decodes with params[s].
    std::vector<Generation> generate_many(std::span<const TokenId> prompt, const std::vector<DecodeParams>& params,
                                          const PatchPlan* plan = nullptr) const;

    AttentionMap attention_weights(std::span<const TokenId> tokens, int first_layer, int last_layer) const;

    /// Raw weights for adapters and tests.
    const Weights& weights() const { return weights_; }

private:
    friend class Session;
    std::string id_;
    ArchConfig arch_;
    Weights weights_;
    std::shared_ptr<const Tokenizer> tokenizer_;
    ModelSpec spec_;
    std::vector<float> rope_cos_, rope_sin_;
};

/// Picks a token from logits. temperature 0 = argmax (lowest id on ties);
/// otherwise softmax(logits / T) truncated to the smallest top-p prefix under
/// a descending stable order. Returns -1 if any logit is non-finite.
TokenId sample_token(std::span<const float> logits, double temperature, double top_p, Rng& rng);

std::vector<double> log_softmax(std::span<const float> logits);

// ---------------------------------------------------------------------------
// Registry

struct DeviceConfig {
    std::string device = "cpu";
    std::string precision = "fp32";
    bool deterministic = true;
    std::string data_dir;  // empty = plansite::data_dir()
};

/// Hook layouts the in-process runtime can execute.
std::vector<std::string> known_hook_layouts();

/// Catalogued architecture summaries (no weights) for large models.
std::optional<ModelSpec> catalog_spec(const std::string& model_id);
std::vector<std::string> catalog_ids();

/// Ids: "toy-rhymer", "toy-rhymer-fused", "toy-gpt2[:seed]", "toy-llama[:seed]",
/// "llmc:<checkpoint.bin>" (encoder.json + vocab.bpe beside it). Catalog ids
/// raise UnsupportedError naming the known layouts; anything else is unknown.
std::shared_ptr<Model> load_model(const std::string& model_id, const DeviceConfig& device = {});

/// Planted layout for the toy rhymer ids (nullopt for other models).
std::optional<ToyRhymerLayout> toy_rhymer_layout(const std::string& model_id, const DeviceConfig& device = {});

}  // namespace plansite::backend
