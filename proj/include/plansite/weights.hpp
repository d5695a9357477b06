#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "plansite/phonology.hpp"
#include "plansite/tokenizer.hpp"

namespace plansite::backend {

enum class Family { gpt2, llama };

std::string to_string(Family f);

/// Architecture hyperparameters shared by both hook layouts.
///   gpt2:  LayerNorm, learned positions, GELU(tanh) MLP, biased projections.
///   llama: RMSNorm, rotary positions, SwiGLU MLP, grouped-query attention.
struct ArchConfig {
    Family family = Family::gpt2;
    std::size_t layers = 0;
    std::size_t hidden = 0;
    std::size_t heads = 0;
    std::size_t kv_heads = 0;
    std::size_t head_dim = 0;
    std::size_t ffn = 0;
    std::size_t vocab = 0;
    std::size_t context = 0;
    float norm_eps = 1e-5f;
    float rope_theta = 10000.0f;

    void validate() const;
};

/// Row-major [out][in] matrices, matching torch.nn.Linear.weight.
struct LayerWeights {
    std::vector<float> norm1_w, norm1_b;
    std::vector<float> wq, bq;  // [heads*head_dim][hidden]
    std::vector<float> wk, bk;  // [kv_heads*head_dim][hidden]
    std::vector<float> wv, bv;
    std::vector<float> wo, bo;  // [hidden][heads*head_dim]
    std::vector<float> norm2_w, norm2_b;
    std::vector<float> w_up, b_up;      // [ffn][hidden]
    std::vector<float> w_gate;          // llama only, [ffn][hidden]
    std::vector<float> w_down, b_down;  // [hidden][ffn]
};

struct Weights {
    std::vector<float> token_embedding;     // [vocab][hidden]
    std::vector<float> position_embedding;  // gpt2 only, [context][hidden]
    std::vector<LayerWeights> layers;
    std::vector<float> final_norm_w, final_norm_b;
    std::vector<float> lm_head;  // [vocab][hidden]; empty = tied to token_embedding

    /// Size checks against the architecture; throws ValidationError.
    void validate(const ArchConfig& arch) const;
};

/// Gaussian init (std 0.02, residual projections scaled by 1/sqrt(2L)).
Weights random_weights(const ArchConfig& arch, std::uint64_t seed, float std_dev = 0.02f);

struct ToyRhymerOptions {
    std::size_t layers = 6;
    std::size_t hidden = 256;
    std::size_t heads = 4;
    std::size_t context = 128;
    std::size_t max_classes = 40;
    float weight_noise = 1e-3f;
    std::uint64_t seed = 7;
};

struct ToyRhymerLayout {
    std::size_t classes = 0;
    std::vector<phonology::RhymeKey> class_keys;
    std::vector<int> token_class;  // -1 when the token carries no planted rhyme class
    /// (layer, head) of the heads that copy the last word's class onto the newline.
    std::vector<std::pair<int, int>> routing_heads;
    std::pair<int, int> readout_head{0, 0};
};

/// GPT-2 layout with analytically placed weights: three heads copy the last
/// word's rhyme class onto the line-ending newline, a later head carries that
/// plan to every second-line position, and the final MLP schedules a rhyming
/// word followed by a newline. Deterministic for a fixed seed.
Weights toy_rhymer_weights(const WordTokenizer& tokenizer, const phonology::PronunciationLexicon& lexicon,
                           const ToyRhymerOptions& opts, ArchConfig* arch_out, ToyRhymerLayout* layout_out = nullptr);

/// llm.c GPT-2 checkpoint (magic 20240326, version 3, fp32).
struct LlmcCheckpoint {
    ArchConfig arch;
    Weights weights;
    std::size_t padded_vocab = 0;
};

LlmcCheckpoint load_llmc_checkpoint(const std::filesystem::path& path);
void save_llmc_checkpoint(const std::filesystem::path& path, const ArchConfig& arch, const Weights& weights);

}  // namespace plansite::backend
