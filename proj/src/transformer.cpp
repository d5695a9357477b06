#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "plansite/backend.hpp"
#include "plansite/common.hpp"

namespace plansite::backend {

// ---------------------------------------------------------------------------
// Small types

void ModelSpec::validate() const {
    if (layers == 0 || hidden == 0 || vocab == 0 || heads == 0 || head_dim == 0) {
        throw ValidationError("model spec: L, d, |V|, heads and head_dim must be positive");
    }
    if (attention_width != heads * head_dim) throw ValidationError("model spec: attention width != heads * head_dim");
    if (kv_heads == 0 || heads % kv_heads != 0) throw ValidationError("model spec: heads must be a multiple of kv_heads");
}

void to_json(nlohmann::json& j, const ModelSpec& s) {
    j = {{"model_id", s.model_id}, {"family", s.family},       {"layers", s.layers},
         {"hidden", s.hidden},     {"vocab", s.vocab},         {"heads", s.heads},
         {"kv_heads", s.kv_heads}, {"head_dim", s.head_dim},   {"attention_width", s.attention_width},
         {"context", s.context},   {"fuses_comma_newline", s.fuses_comma_newline}};
}

std::string to_string(Component c) {
    switch (c) {
        case Component::residual_post_block: return "residual_post_block";
        case Component::attention_head: return "attention_head";
        case Component::attention_output: return "attention_output";
        case Component::mlp_output: return "mlp_output";
    }
    return "?";
}

Component component_from_string(const std::string& s) {
    if (s == "residual_post_block" || s == "residual") return Component::residual_post_block;
    if (s == "attention_head") return Component::attention_head;
    if (s == "attention_output") return Component::attention_output;
    if (s == "mlp_output" || s == "mlp") return Component::mlp_output;
    throw ValidationError("unknown hook component: " + s);
}

std::size_t HookSite::width(const ModelSpec& spec) const {
    return component == Component::attention_head ? spec.head_dim : spec.hidden;
}

void HookSite::check(const ModelSpec& spec) const {
    if (layer < 0 || static_cast<std::size_t>(layer) >= spec.layers) {
        throw RangeError("hook site layer " + std::to_string(layer) + " outside [0, " + std::to_string(spec.layers) + ")");
    }
    if (component == Component::attention_head) {
        if (head < 0 || static_cast<std::size_t>(head) >= spec.heads) {
            throw RangeError("hook site head " + std::to_string(head) + " outside [0, " + std::to_string(spec.heads) + ")");
        }
    } else if (head != -1) {
        throw ValidationError("hook site: head index given for " + to_string(component));
    }
}

std::string HookSite::label() const {
    std::string s = "L" + std::to_string(layer) + "@" + std::to_string(position) + ":" + to_string(component);
    if (component == Component::attention_head) s += "(" + std::to_string(head) + ")";
    return s;
}

void to_json(nlohmann::json& j, const HookSite& s) {
    j = {{"layer", s.layer}, {"position", s.position}, {"component", to_string(s.component)}};
    if (s.component == Component::attention_head) j["head"] = s.head;
}

void from_json(const nlohmann::json& j, HookSite& s) {
    s.layer = j.at("layer").get<int>();
    s.position = j.at("position").get<std::size_t>();
    s.component = component_from_string(j.at("component").get<std::string>());
    s.head = j.value("head", -1);
}

void ActivationStore::insert(const HookSite& site, std::vector<float> v, std::size_t expected_width) {
    if (v.size() != expected_width) throw ValidationError("activation width mismatch at " + site.label());
    for (float x : v) {
        if (!std::isfinite(x)) throw ValidationError("non-finite activation at " + site.label());
    }
    data_[site] = std::move(v);
}

const std::vector<float>& ActivationStore::at(const HookSite& site) const {
    auto it = data_.find(site);
    if (it == data_.end()) throw RangeError("no captured activation at " + site.label());
    return it->second;
}

std::uint64_t hash_tokens(std::span<const TokenId> tokens) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (TokenId t : tokens) h = mix_seed(h, static_cast<std::uint64_t>(t));
    return h;
}

PatchPlan& PatchPlan::replace(const HookSite& s, std::vector<float> v) {
    entries.push_back({s, PatchKind::replace, std::move(v), 1.0f});
    return *this;
}

PatchPlan& PatchPlan::zero(const HookSite& s) {
    entries.push_back({s, PatchKind::zero, {}, 1.0f});
    return *this;
}

PatchPlan& PatchPlan::add(const HookSite& s, std::vector<float> v, float alpha) {
    entries.push_back({s, PatchKind::add_scaled, std::move(v), alpha});
    return *this;
}

void PatchPlan::validate(const ModelSpec& spec) const {
    std::set<HookSite> seen;
    for (const auto& e : entries) {
        e.site.check(spec);
        if (!seen.insert(e.site).second) throw ValidationError("duplicate patch site " + e.site.label());
        if (e.kind != PatchKind::zero) {
            if (e.vector.size() != e.site.width(spec)) {
                throw ValidationError("patch width " + std::to_string(e.vector.size()) + " != " +
                                      std::to_string(e.site.width(spec)) + " at " + e.site.label());
            }
            for (float x : e.vector) {
                if (!std::isfinite(x)) throw ValidationError("non-finite patch vector at " + e.site.label());
            }
        }
        if (!std::isfinite(e.alpha)) throw ValidationError("non-finite patch alpha");
    }
    if (scope == PatchScope::steps && steps.empty()) throw ValidationError("patch scope 'steps' with no steps listed");
}

void to_json(nlohmann::json& j, const DecodeParams& p) {
    j = {{"temperature", p.temperature},
         {"top_p", p.top_p},
         {"seed", p.seed},
         {"max_new_tokens", p.max_new_tokens},
         {"stop", p.stop_at_newline ? "newline" : "none"}};
}

void from_json(const nlohmann::json& j, DecodeParams& p) {
    DecodeParams d;
    p.temperature = j.value("temperature", d.temperature);
    p.top_p = j.value("top_p", d.top_p);
    p.seed = j.value("seed", d.seed);
    p.max_new_tokens = j.value("max_new_tokens", d.max_new_tokens);
    p.stop_at_newline = j.value("stop", std::string("newline")) == "newline";
    if (p.temperature < 0 || !(p.top_p > 0 && p.top_p <= 1)) throw ValidationError("decode params out of range");
}

float AttentionMap::at(int layer, int head, std::size_t query, std::size_t key) const {
    const int l = layer - first_layer;
    if (l < 0 || static_cast<std::size_t>(l) >= layers() || head < 0 || static_cast<std::size_t>(head) >= heads ||
        query >= length || key >= length) {
        throw RangeError("attention map index out of range");
    }
    return weights[((static_cast<std::size_t>(l) * heads + static_cast<std::size_t>(head)) * length + query) * length + key];
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

void matvec(const std::vector<float>& w, const std::vector<float>& b, const float* x, float* y, std::size_t rows,
            std::size_t cols) {
    const float* wp = w.data();
    const std::size_t blocked = cols - cols % 8;
    for (std::size_t r = 0; r < rows; ++r, wp += cols) {
        float acc[8] = {};
        for (std::size_t c = 0; c < blocked; c += 8) {
            for (std::size_t k = 0; k < 8; ++k) acc[k] += wp[c + k] * x[c + k];
        }
        float tail = 0.0f;
        for (std::size_t c = blocked; c < cols; ++c) tail += wp[c] * x[c];
        const float sum = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail;
        y[r] = b.empty() ? sum : sum + b[r];
    }
}

void layer_norm(const float* x, const std::vector<float>& w, const std::vector<float>& b, float* y, std::size_t n,
                float eps) {
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += x[i];
    mean /= static_cast<double>(n);
    double var = 0;
    for (std::size_t i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= static_cast<double>(n);
    const float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
    const float m = static_cast<float>(mean);
    for (std::size_t i = 0; i < n; ++i) y[i] = (x[i] - m) * inv * w[i] + (b.empty() ? 0.0f : b[i]);
}

void rms_norm(const float* x, const std::vector<float>& w, float* y, std::size_t n, float eps) {
    double ss = 0;
    for (std::size_t i = 0; i < n; ++i) ss += static_cast<double>(x[i]) * x[i];
    const float inv = static_cast<float>(1.0 / std::sqrt(ss / static_cast<double>(n) + eps));
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * inv * w[i];
}

float gelu_tanh(float x) {
    constexpr float k = 0.7978845608028654f;
    return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

float silu(float x) { return x / (1.0f + std::exp(-x)); }

}  // namespace

// ---------------------------------------------------------------------------
// Session: one sequence being computed position by position.

class Session {
public:
    Session(const Model& m, const PatchPlan* plan, std::size_t prompt_len)
        : m_(&m), prompt_len_(prompt_len), kcache_(m.arch_.layers), vcache_(m.arch_.layers) {
        if (plan) {
            plan_ = plan;
            for (const auto& e : plan->entries) patches_[e.site] = &e;
            for (const auto& e : plan->entries) patch_positions_.insert(e.site.position);
        }
    }

    void set_capture(const std::set<HookSite>* sites, ActivationStore* store) {
        capture_ = sites;
        store_ = store;
        capture_positions_.clear();
        if (sites) {
            for (const auto& s : *sites) capture_positions_.insert(s.position);
        }
    }

    void set_attention_record(AttentionMap* rec, int first, int last) {
        attn_ = rec;
        attn_first_ = first;
        attn_last_ = last;
    }

    std::size_t length() const { return pos_; }

    /// Computes the next position. Writes next-token logits when `logits` is non-null.
    void step(TokenId token, std::vector<float>* logits) {
        const auto& a = m_->arch_;
        const auto& w = m_->weights_;
        const std::size_t d = a.hidden, hd = a.head_dim, nh = a.heads, nkv = a.kv_heads;
        const std::size_t aw = nh * hd, kvw = nkv * hd, group = nh / nkv;
        if (token < 0 || static_cast<std::size_t>(token) >= a.vocab) {
            throw RangeError("token id " + std::to_string(token) + " outside vocabulary");
        }
        if (pos_ >= a.context) throw RangeError("sequence exceeds context length " + std::to_string(a.context));
        const std::size_t pos = pos_;
        const std::size_t step_index = pos < prompt_len_ ? 0 : pos - prompt_len_ + 1;
        const bool patch_here = plan_ && patch_positions_.count(pos) && scope_active(step_index);
        const bool capture_here = capture_ && capture_positions_.count(pos);

        x_.assign(w.token_embedding.begin() + static_cast<std::ptrdiff_t>(token * d),
                  w.token_embedding.begin() + static_cast<std::ptrdiff_t>((token + 1) * d));
        if (a.family == Family::gpt2) {
            const float* pe = w.position_embedding.data() + pos * d;
            for (std::size_t i = 0; i < d; ++i) x_[i] += pe[i];
        }
        h_.resize(d);
        q_.resize(aw);
        k_.resize(kvw);
        v_.resize(kvw);
        z_.resize(aw);
        o_.resize(d);
        const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

        for (std::size_t l = 0; l < a.layers; ++l) {
            const auto& lw = w.layers[l];
            const int li = static_cast<int>(l);
            norm(x_.data(), lw.norm1_w, lw.norm1_b, h_.data());
            matvec(lw.wq, lw.bq, h_.data(), q_.data(), aw, d);
            matvec(lw.wk, lw.bk, h_.data(), k_.data(), kvw, d);
            matvec(lw.wv, lw.bv, h_.data(), v_.data(), kvw, d);
            if (a.family == Family::llama) {
                for (std::size_t hh = 0; hh < nh; ++hh) rope(q_.data() + hh * hd, pos);
                for (std::size_t hh = 0; hh < nkv; ++hh) rope(k_.data() + hh * hd, pos);
            }
            kcache_[l].insert(kcache_[l].end(), k_.begin(), k_.end());
            vcache_[l].insert(vcache_[l].end(), v_.begin(), v_.end());
            const std::size_t n = pos + 1;
            scores_.resize(n);
            for (std::size_t hh = 0; hh < nh; ++hh) {
                const std::size_t g = hh / group;
                const float* qh = q_.data() + hh * hd;
                float mx = -INFINITY;
                for (std::size_t t = 0; t < n; ++t) {
                    const float* kt = kcache_[l].data() + t * kvw + g * hd;
                    float s = 0.0f;
                    for (std::size_t i = 0; i < hd; ++i) s += qh[i] * kt[i];
                    scores_[t] = s * scale;
                    mx = std::max(mx, scores_[t]);
                }
                float sum = 0.0f;
                for (std::size_t t = 0; t < n; ++t) {
                    scores_[t] = std::exp(scores_[t] - mx);
                    sum += scores_[t];
                }
                const float inv = 1.0f / sum;
                float* zh = z_.data() + hh * hd;
                std::fill(zh, zh + hd, 0.0f);
                for (std::size_t t = 0; t < n; ++t) {
                    const float p = scores_[t] * inv;
                    scores_[t] = p;
                    const float* vt = vcache_[l].data() + t * kvw + g * hd;
                    for (std::size_t i = 0; i < hd; ++i) zh[i] += p * vt[i];
                }
                if (attn_ && li >= attn_first_ && li <= attn_last_) {
                    const std::size_t L = attn_->length;
                    float* row = attn_->weights.data() +
                                 ((static_cast<std::size_t>(li - attn_first_) * nh + hh) * L + pos) * L;
                    std::copy(scores_.begin(), scores_.end(), row);
                }
                if (patch_here || capture_here) {
                    hook(HookSite::attn_head(li, pos, static_cast<int>(hh)), zh, hd, patch_here, capture_here);
                }
            }
            matvec(lw.wo, lw.bo, z_.data(), o_.data(), d, aw);
            if (patch_here || capture_here) hook(HookSite::attn_out(li, pos), o_.data(), d, patch_here, capture_here);
            for (std::size_t i = 0; i < d; ++i) x_[i] += o_[i];

            norm(x_.data(), lw.norm2_w, lw.norm2_b, h_.data());
            up_.resize(a.ffn);
            matvec(lw.w_up, lw.b_up, h_.data(), up_.data(), a.ffn, d);
            if (a.family == Family::gpt2) {
                for (auto& u : up_) u = gelu_tanh(u);
            } else {
                gate_.resize(a.ffn);
                matvec(lw.w_gate, {}, h_.data(), gate_.data(), a.ffn, d);
                for (std::size_t i = 0; i < a.ffn; ++i) up_[i] *= silu(gate_[i]);
            }
            matvec(lw.w_down, lw.b_down, up_.data(), o_.data(), d, a.ffn);
            if (patch_here || capture_here) hook(HookSite::mlp(li, pos), o_.data(), d, patch_here, capture_here);
            for (std::size_t i = 0; i < d; ++i) x_[i] += o_[i];
            if (patch_here || capture_here) {
                hook(HookSite::residual(li, pos), x_.data(), d, patch_here, capture_here);
            }
        }
        ++pos_;
        if (logits) {
            norm(x_.data(), w.final_norm_w, w.final_norm_b, h_.data());
            const auto& head = w.lm_head.empty() ? w.token_embedding : w.lm_head;
            logits->resize(a.vocab);
            matvec(head, {}, h_.data(), logits->data(), a.vocab, d);
        }
    }

private:
    bool scope_active(std::size_t step_index) const {
        switch (plan_->scope) {
            case PatchScope::every_step: return true;
            case PatchScope::prompt_only: return step_index == 0;
            case PatchScope::steps:
                return std::find(plan_->steps.begin(), plan_->steps.end(), step_index) != plan_->steps.end();
        }
        return true;
    }

    void norm(const float* x, const std::vector<float>& w, const std::vector<float>& b, float* y) const {
        const auto& a = m_->arch_;
        if (a.family == Family::gpt2) {
            layer_norm(x, w, b, y, a.hidden, a.norm_eps);
        } else {
            rms_norm(x, w, y, a.hidden, a.norm_eps);
        }
    }

    void rope(float* v, std::size_t pos) const {
        const std::size_t half = m_->arch_.head_dim / 2;
        const float* c = m_->rope_cos_.data() + pos * half;
        const float* s = m_->rope_sin_.data() + pos * half;
        for (std::size_t i = 0; i < half; ++i) {
            const float x1 = v[i], x2 = v[i + half];
            v[i] = x1 * c[i] - x2 * s[i];
            v[i + half] = x2 * c[i] + x1 * s[i];
        }
    }

    void hook(const HookSite& site, float* v, std::size_t n, bool patch, bool capture) {
        if (patch) {
            auto it = patches_.find(site);
            if (it != patches_.end()) {
                const PatchEntry& e = *it->second;
                switch (e.kind) {
                    case PatchKind::replace: std::copy(e.vector.begin(), e.vector.end(), v); break;
                    case PatchKind::zero: std::fill(v, v + n, 0.0f); break;
                    case PatchKind::add_scaled:
                        for (std::size_t i = 0; i < n; ++i) v[i] += e.alpha * e.vector[i];
                        break;
                }
            }
        }
        if (capture && capture_->count(site)) store_->insert(site, std::vector<float>(v, v + n), n);
    }

    const Model* m_;
    std::size_t prompt_len_;
    std::size_t pos_ = 0;
    std::vector<std::vector<float>> kcache_, vcache_;
    const PatchPlan* plan_ = nullptr;
    std::map<HookSite, const PatchEntry*> patches_;
    std::set<std::size_t> patch_positions_;
    const std::set<HookSite>* capture_ = nullptr;
    ActivationStore* store_ = nullptr;
    std::set<std::size_t> capture_positions_;
    AttentionMap* attn_ = nullptr;
    int attn_first_ = 0, attn_last_ = -1;
    std::vector<float> x_, h_, q_, k_, v_, z_, o_, up_, gate_, scores_;
};

// ---------------------------------------------------------------------------
// Model

Model::Model(std::string model_id, ArchConfig arch, Weights weights, std::shared_ptr<const Tokenizer> tokenizer)
    : id_(std::move(model_id)), arch_(arch), weights_(std::move(weights)), tokenizer_(std::move(tokenizer)) {
    arch_.validate();
    weights_.validate(arch_);
    if (!tokenizer_) throw ValidationError("model requires a tokenizer");
    if (tokenizer_->vocab_size() > arch_.vocab) throw ValidationError("tokenizer vocabulary larger than model vocabulary");
    spec_.model_id = id_;
    spec_.family = to_string(arch_.family);
    spec_.layers = arch_.layers;
    spec_.hidden = arch_.hidden;
    spec_.vocab = arch_.vocab;
    spec_.heads = arch_.heads;
    spec_.kv_heads = arch_.kv_heads;
    spec_.head_dim = arch_.head_dim;
    spec_.attention_width = arch_.heads * arch_.head_dim;
    spec_.context = arch_.context;
    spec_.fuses_comma_newline = tokenizer_->fuses_comma_newline();
    spec_.validate();
    if (arch_.family == Family::llama) {
        const std::size_t half = arch_.head_dim / 2;
        rope_cos_.resize(arch_.context * half);
        rope_sin_.resize(arch_.context * half);
        for (std::size_t p = 0; p < arch_.context; ++p) {
            for (std::size_t i = 0; i < half; ++i) {
                const double freq = std::pow(static_cast<double>(arch_.rope_theta),
                                             -2.0 * static_cast<double>(i) / static_cast<double>(arch_.head_dim));
                rope_cos_[p * half + i] = static_cast<float>(std::cos(static_cast<double>(p) * freq));
                rope_sin_[p * half + i] = static_cast<float>(std::sin(static_cast<double>(p) * freq));
            }
        }
    }
}

Model::~Model() = default;

namespace {

std::set<HookSite> checked_sites(const ModelSpec& spec, std::span<const HookSite> sites, std::size_t limit) {
    std::set<HookSite> out;
    for (const auto& s : sites) {
        s.check(spec);
        if (s.position >= limit) {
            throw RangeError("hook site position " + std::to_string(s.position) + " beyond sequence length " +
                             std::to_string(limit));
        }
        out.insert(s);
    }
    return out;
}

}  // namespace

ForwardResult Model::forward(std::span<const TokenId> tokens, const ForwardOptions& opts) const {
    if (tokens.empty()) throw ValidationError("forward: empty token sequence");
    if (opts.plan) opts.plan->validate(spec_);
    const auto sites = checked_sites(spec_, opts.capture, tokens.size());
    ForwardResult res;
    res.captures.provenance = {hash_tokens(tokens), 0};
    Session s(*this, opts.plan, tokens.size());
    s.set_capture(sites.empty() ? nullptr : &sites, &res.captures);
    std::vector<float> lg;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const bool last = i + 1 == tokens.size();
        s.step(tokens[i], (last || opts.all_logits) ? &lg : nullptr);
        if (opts.all_logits) res.all.push_back(lg);
    }
    res.logits = std::move(lg);
    return res;
}

std::vector<float> Model::logits(std::span<const TokenId> tokens, const PatchPlan* plan) const {
    ForwardOptions o;
    o.plan = plan;
    return forward(tokens, o).logits;
}

ActivationStore Model::capture(std::span<const TokenId> tokens, std::span<const HookSite> sites) const {
    ForwardOptions o;
    o.capture.assign(sites.begin(), sites.end());
    return forward(tokens, o).captures;
}

std::vector<double> log_softmax(std::span<const float> logits) {
    double mx = -INFINITY;
    for (float x : logits) mx = std::max(mx, static_cast<double>(x));
    double sum = 0;
    for (float x : logits) sum += std::exp(static_cast<double>(x) - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
    return out;
}

TokenId sample_token(std::span<const float> logits, double temperature, double top_p, Rng& rng) {
    for (float x : logits) {
        if (!std::isfinite(x)) return -1;
    }
    if (temperature <= 0.0) {
        return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    }
    const std::size_t n = logits.size();
    double mx = -INFINITY;
    for (float x : logits) mx = std::max(mx, static_cast<double>(x));
    std::vector<double> p(n);
    double sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
        p[i] = std::exp((static_cast<double>(logits[i]) - mx) / temperature);
        sum += p[i];
    }
    for (auto& v : p) v /= sum;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    std::size_t keep = n;
    if (top_p < 1.0) {
        double cum = 0;
        for (std::size_t r = 0; r < n; ++r) {
            cum += p[order[r]];
            if (cum >= top_p) {
                keep = r + 1;
                break;
            }
        }
    }
    double total = 0;
    for (std::size_t r = 0; r < keep; ++r) total += p[order[r]];
    const double u = rng.uniform() * total;
    double cum = 0;
    for (std::size_t r = 0; r < keep; ++r) {
        cum += p[order[r]];
        if (u < cum) return static_cast<TokenId>(order[r]);
    }
    return static_cast<TokenId>(order[keep - 1]);
}

namespace {

void decode_loop(const Model& m, Session& s, std::vector<float> logits, const DecodeParams& params, Generation& g,
                 std::size_t vocab_limit) {
    Rng rng(params.seed);
    for (std::size_t step = 0; step < params.max_new_tokens; ++step) {
        std::span<const float> lg(logits.data(), vocab_limit);
        const TokenId tok = sample_token(lg, params.temperature, params.top_p, rng);
        if (tok < 0) {
            g.nonfinite_logits = true;
            break;
        }
        g.logprobs.push_back(log_softmax(lg)[static_cast<std::size_t>(tok)]);
        g.continuation.push_back(tok);
        if (params.stop_at_newline && m.tokenizer().contains_newline(tok)) {
            g.stopped = true;
            break;
        }
        if (step + 1 == params.max_new_tokens || s.length() >= m.spec().context) break;
        s.step(tok, &logits);
    }
    g.text = m.tokenizer().decode(g.continuation);
}

}  // namespace

Generation Model::generate(std::span<const TokenId> prompt, const DecodeParams& params, const PatchPlan* plan,
                           std::span<const HookSite> capture) const {
    if (prompt.empty()) throw ValidationError("generate: empty prompt");
    if (plan) plan->validate(spec_);
    const auto sites = checked_sites(spec_, capture, prompt.size() + params.max_new_tokens);
    Generation g;
    g.prompt.assign(prompt.begin(), prompt.end());
    g.params = params;
    ActivationStore store;
    store.provenance = {hash_tokens(prompt), 0};
    Session s(*this, plan, prompt.size());
    s.set_capture(sites.empty() ? nullptr : &sites, &store);
    std::vector<float> lg;
    for (std::size_t i = 0; i < prompt.size(); ++i) s.step(prompt[i], i + 1 == prompt.size() ? &lg : nullptr);
    decode_loop(*this, s, std::move(lg), params, g, tokenizer_->vocab_size());
    if (!sites.empty()) {
        // Sites on the final sampled token need one more position computed.
        const std::size_t total = prompt.size() + g.continuation.size();
        if (s.length() < total) {
            bool need = false;
            for (const auto& site : sites) need = need || (site.position >= s.length() && site.position < total);
            if (need && total <= spec_.context) s.step(g.continuation.back(), nullptr);
        }
        store.provenance.decode_step = g.continuation.size();
        g.captures = std::move(store);
    }
    return g;
}

std::vector<Generation> Model::generate_many(std::span<const TokenId> prompt, const std::vector<DecodeParams>& params,
                                             const PatchPlan* plan) const {
    if (prompt.empty()) throw ValidationError("generate: empty prompt");
    if (plan) plan->validate(spec_);
    Session base(*this, plan, prompt.size());
    std::vector<float> lg;
    for (std::size_t i = 0; i < prompt.size(); ++i) base.step(prompt[i], i + 1 == prompt.size() ? &lg : nullptr);
    std::vector<Generation> out;
    out.reserve(params.size());
    for (const auto& p : params) {
        Session s = base;
        Generation g;
        g.prompt.assign(prompt.begin(), prompt.end());
        g.params = p;
        decode_loop(*this, s, lg, p, g, tokenizer_->vocab_size());
        out.push_back(std::move(g));
    }
    return out;
}

AttentionMap Model::attention_weights(std::span<const TokenId> tokens, int first_layer, int last_layer) const {
    if (first_layer < 0 || last_layer < first_layer || static_cast<std::size_t>(last_layer) >= spec_.layers) {
        throw RangeError("attention layer range [" + std::to_string(first_layer) + ", " + std::to_string(last_layer) +
                         "] invalid");
    }
    if (tokens.empty()) throw ValidationError("attention_weights: empty token sequence");
    AttentionMap map;
    map.first_layer = first_layer;
    map.heads = spec_.heads;
    map.length = tokens.size();
    map.weights.assign(static_cast<std::size_t>(last_layer - first_layer + 1) * map.heads * map.length * map.length, 0.0f);
    Session s(*this, nullptr, tokens.size());
    s.set_attention_record(&map, first_layer, last_layer);
    for (TokenId t : tokens) s.step(t, nullptr);
    return map;
}

}  // namespace plansite::backend
