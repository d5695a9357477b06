#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>

#include "plansite/common.hpp"
#include "plansite/random.hpp"
#include "plansite/weights.hpp"

namespace plansite::backend {

namespace {

// Residual layout.
constexpr std::size_t kAnchor0 = 0, kAnchor1 = 1, kIsWord = 2, kIsNewline = 3, kRamp = 4, kNewlinePos = 5, kNewlineBoost = 6;
constexpr std::size_t kBalance = 7;  // keeps feature sums at zero so normalization does not shift by token
constexpr std::size_t kCur = 8;

constexpr float kAnchorNorm = 100.0f;
constexpr float kWordScore = 20.0f;     // attention bonus for word tokens
constexpr float kNewlineScore = 200.0f; // attention bonus for newline tokens
constexpr float kRecency = 5.0f;        // attention score per position
constexpr float kPlanGate = 12.0f;
constexpr float kBoostBase = 2.0f;
constexpr float kBoostPerToken = 1.0f;
constexpr float kLogitScale = 10.0f;

bool has_primary_stress(const phonology::Pronunciation& p) {
    return std::any_of(p.begin(), p.end(), [](const std::string& ph) { return !ph.empty() && ph.back() == '1'; });
}

bool is_alnum_start(const std::string& s) {
    std::size_t i = 0;
    while (i < s.size() && s[i] == ' ') ++i;
    return i < s.size() && std::isalnum(static_cast<unsigned char>(s[i]));
}

}  // namespace

Weights toy_rhymer_weights(const WordTokenizer& tok, const phonology::PronunciationLexicon& lex,
                           const ToyRhymerOptions& opts, ArchConfig* arch_out, ToyRhymerLayout* layout_out) {
    const std::size_t C = opts.max_classes;
    const std::size_t d = opts.hidden;
    const std::size_t kPlan1 = kCur + C, kPlan2 = kPlan1 + C, kBoost = kPlan2 + C, kIdent = kBoost + C;
    if (opts.layers < 6 || opts.heads < 4) throw ValidationError("toy rhymer needs at least 6 layers and 4 heads");
    if (kIdent + 16 > d) throw ValidationError("toy rhymer hidden size too small for the class count");
    const std::size_t hd = d / opts.heads;
    if (hd * opts.heads != d || hd < C + 1) throw ValidationError("toy rhymer head_dim must hold every class");
    const std::size_t ident = d - kIdent;

    // Rhyme classes: keys shared by at least three stressed vocabulary words.
    std::map<phonology::RhymeKey, std::size_t> counts;
    for (const auto& w : tok.words()) {
        const auto* prons = lex.find(w);
        if (!prons || prons->empty() || !has_primary_stress(prons->front())) continue;
        ++counts[phonology::rhyme_key_of(prons->front())];
    }
    std::vector<std::pair<phonology::RhymeKey, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    ToyRhymerLayout layout;
    for (const auto& [key, n] : ranked) {
        if (n < 3 || layout.class_keys.size() == C) break;
        layout.class_keys.push_back(key);
    }
    layout.classes = layout.class_keys.size();
    auto word_class = [&](const std::string& w) -> int {
        const auto* prons = lex.find(w);
        if (!prons || prons->empty() || !has_primary_stress(prons->front())) return -1;
        for (std::size_t c = 0; c < layout.class_keys.size(); ++c) {
            for (const auto& p : *prons) {
                if (phonology::rhyme_key_of(p) == layout.class_keys[c]) return static_cast<int>(c);
            }
        }
        return -1;
    };

    ArchConfig a;
    a.family = Family::gpt2;
    a.layers = opts.layers;
    a.hidden = d;
    a.heads = a.kv_heads = opts.heads;
    a.head_dim = hd;
    a.ffn = 4 * d;
    a.vocab = tok.vocab_size();
    a.context = opts.context;
    a.validate();

    Rng rng(opts.seed);
    const float noise = opts.weight_noise;
    auto noisy = [&](std::size_t n) {
        std::vector<float> v(n);
        for (auto& x : v) x = static_cast<float>(rng.normal()) * noise;
        return v;
    };

    const std::size_t V = a.vocab;
    const float half = kAnchorNorm / std::sqrt(2.0f);
    layout.token_class.assign(V, -1);
    Weights w;
    w.token_embedding.assign(V * d, 0.0f);
    w.lm_head = noisy(V * d);
    const TokenId nl = tok.newline_id();
    for (std::size_t t = 0; t < V; ++t) {
        const std::string text = tok.token_text(static_cast<TokenId>(t));
        float* e = w.token_embedding.data() + t * d;
        float* out = w.lm_head.data() + t * d;
        e[kAnchor0] = half;
        e[kAnchor1] = -half;
        const bool word = is_alnum_start(text);
        const bool spaced = !text.empty() && text[0] == ' ';
        if (word) e[kIsWord] = 1.0f;
        if (text.find('\n') != std::string::npos) e[kIsNewline] = 1.0f;
        std::vector<float> id(ident);
        double norm = 0;
        for (auto& x : id) {
            x = static_cast<float>(rng.normal());
            norm += static_cast<double>(x) * x;
        }
        double mean = 0;
        for (float x : id) mean += x;
        mean /= static_cast<double>(ident);
        norm = 0;
        for (auto& x : id) {
            x = static_cast<float>(x - mean);
            norm += static_cast<double>(x) * x;
        }
        for (std::size_t i = 0; i < ident; ++i) e[kIdent + i] = id[i] / static_cast<float>(std::sqrt(norm));

        const std::string surface = spaced ? text.substr(1) : text;
        const bool vocab_word = word && std::binary_search(tok.words().begin(), tok.words().end(), surface);
        const int cls = vocab_word ? word_class(surface) : -1;
        layout.token_class[t] = cls;
        if (cls >= 0) e[kCur + static_cast<std::size_t>(cls)] = 1.0f;
        e[kBalance] = -(e[kIsWord] + e[kIsNewline] + (cls >= 0 ? 1.0f : 0.0f));

        float base = -20.0f;
        if (static_cast<TokenId>(t) == nl) {
            base = -10.0f;
            out[kNewlineBoost] += 5.0f * kLogitScale;
        } else if (vocab_word && spaced) {
            if (cls >= 0) {
                base = -3.0f;
                out[kBoost + static_cast<std::size_t>(cls)] += kLogitScale;
            } else {
                base = 0.0f;
                for (std::size_t i = 0; i < ident; ++i) out[kIdent + i] += static_cast<float>(rng.normal()) * 1.5f;
            }
        } else if (vocab_word) {
            base = -12.0f;
        } else if (text.size() <= 2 && !word) {
            base = -12.0f;
        }
        out[kAnchor0] += base / half;
    }

    w.position_embedding.assign(a.context * d, 0.0f);
    for (std::size_t p = 0; p < a.context; ++p) {
        w.position_embedding[p * d + kRamp] = static_cast<float>(p) / static_cast<float>(a.context);
        w.position_embedding[p * d + kBalance] = -static_cast<float>(p) / static_cast<float>(a.context);
    }

    const float gain = kAnchorNorm / std::sqrt(static_cast<float>(d));
    auto fresh_layer = [&]() {
        LayerWeights lw;
        lw.norm1_w.assign(d, gain);
        lw.norm1_b.assign(d, 0.0f);
        lw.norm2_w.assign(d, gain);
        lw.norm2_b.assign(d, 0.0f);
        lw.wq = noisy(d * d);
        lw.bq = noisy(d);
        lw.wk = noisy(d * d);
        lw.bk = noisy(d);
        lw.wv = noisy(d * d);
        lw.bv = noisy(d);
        lw.wo = noisy(d * d);
        lw.bo = noisy(d);
        lw.w_up = noisy(a.ffn * d);
        lw.b_up = noisy(a.ffn);
        lw.w_down = noisy(d * a.ffn);
        lw.b_down = noisy(d);
        return lw;
    };
    for (std::size_t l = 0; l < a.layers; ++l) w.layers.push_back(fresh_layer());

    const float ctx = static_cast<float>(a.context);
    const float qscale = std::sqrt(static_cast<float>(hd));
    auto set = [&](std::vector<float>& m, std::size_t cols, std::size_t r, std::size_t c, float v) { m[r * cols + c] = v; };

    // Routing heads: attend to the most recent word and copy its class into the plan slot.
    layout.routing_heads = {{2, 1}, {3, 0}, {3, 2}};
    for (auto [l, h] : layout.routing_heads) {
        auto& lw = w.layers[static_cast<std::size_t>(l)];
        const std::size_t base = static_cast<std::size_t>(h) * hd;
        lw.bq[base] = qscale;
        set(lw.wk, d, base, kIsWord, kWordScore);
        set(lw.wk, d, base, kRamp, kRecency * ctx);
        for (std::size_t c = 0; c < layout.classes; ++c) {
            set(lw.wv, d, base + c, kCur + c, 1.0f);
            const float share = 1.0f / static_cast<float>(layout.routing_heads.size());
            set(lw.wo, d, kPlan1 + c, base + c, share);
            set(lw.wo, d, kBalance, base + c, -share);
        }
    }

    // Readout head: attend to the most recent newline and carry its plan and position forward.
    const std::size_t last = a.layers - 1;
    layout.readout_head = {static_cast<int>(last), 3};
    {
        auto& lw = w.layers[last];
        const std::size_t base = 3 * hd;
        lw.bq[base] = qscale;
        set(lw.wk, d, base, kIsNewline, kNewlineScore);
        set(lw.wk, d, base, kRamp, kRecency * ctx);
        for (std::size_t c = 0; c < layout.classes; ++c) {
            set(lw.wv, d, base + c, kPlan1 + c, 1.0f);
            set(lw.wo, d, kPlan2 + c, base + c, 1.0f);
            set(lw.wo, d, kBalance, base + c, -1.0f);
        }
        set(lw.wv, d, base + C, kRamp, 1.0f);
        set(lw.wo, d, kNewlinePos, base + C, 1.0f);
        set(lw.wo, d, kBalance, base + C, -1.0f);

        // Final MLP: per-class rhyme boost growing with distance from the newline,
        // and a newline boost once the current word carries the planned class.
        for (std::size_t c = 0; c < layout.classes; ++c) {
            const std::size_t u = c, g1 = C + c, g2 = 2 * C + c;
            set(lw.w_up, d, u, kPlan2 + c, kPlanGate);
            set(lw.w_up, d, u, kRamp, kBoostPerToken * ctx);
            set(lw.w_up, d, u, kNewlinePos, -kBoostPerToken * ctx);
            lw.b_up[u] = kBoostBase - kPlanGate;
            set(lw.w_down, a.ffn, kBoost + c, u, 1.0f / kLogitScale);
            for (std::size_t g : {g1, g2}) {
                set(lw.w_up, d, g, kCur + c, 20.0f);
                set(lw.w_up, d, g, kPlan2 + c, 30.0f);
                lw.b_up[g] = g == g1 ? -35.0f : -40.0f;
            }
            set(lw.w_down, a.ffn, kNewlineBoost, g1, 1.0f / kLogitScale);
            set(lw.w_down, a.ffn, kNewlineBoost, g2, -1.0f / kLogitScale);
        }
    }

    w.final_norm_w.assign(d, gain);
    w.final_norm_b.assign(d, 0.0f);
    w.validate(a);
    if (arch_out) *arch_out = a;
    if (layout_out) *layout_out = std::move(layout);
    return w;
}

}  // namespace plansite::backend
