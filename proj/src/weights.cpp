#include <cmath>
#include <cstring>
#include <fstream>

#include "plansite/common.hpp"
#include "plansite/random.hpp"
#include "plansite/weights.hpp"

namespace plansite::backend {

std::string to_string(Family f) { return f == Family::gpt2 ? "gpt2" : "llama"; }

void ArchConfig::validate() const {
    if (layers == 0 || hidden == 0 || heads == 0 || head_dim == 0 || ffn == 0 || vocab == 0 || context == 0) {
        throw ValidationError("architecture: all sizes must be positive");
    }
    if (kv_heads == 0 || heads % kv_heads != 0) throw ValidationError("architecture: heads must be a multiple of kv_heads");
    if (family == Family::gpt2 && kv_heads != heads) throw ValidationError("architecture: gpt2 layout has no grouped-query attention");
    if (family == Family::llama && head_dim % 2 != 0) throw ValidationError("architecture: rotary embedding needs an even head_dim");
}

namespace {

void expect(const std::vector<float>& v, std::size_t n, const char* what, bool optional = false) {
    if (optional && v.empty()) return;
    if (v.size() != n) {
        throw ValidationError(std::string("weights: ") + what + " has " + std::to_string(v.size()) + " values, expected " +
                              std::to_string(n));
    }
}

}  // namespace

void Weights::validate(const ArchConfig& a) const {
    const std::size_t d = a.hidden, aw = a.heads * a.head_dim, kvw = a.kv_heads * a.head_dim;
    const bool g = a.family == Family::gpt2;
    expect(token_embedding, a.vocab * d, "token_embedding");
    if (g) expect(position_embedding, a.context * d, "position_embedding");
    if (layers.size() != a.layers) throw ValidationError("weights: layer count mismatch");
    for (const auto& l : layers) {
        expect(l.norm1_w, d, "norm1_w");
        expect(l.norm1_b, d, "norm1_b", true);
        expect(l.wq, aw * d, "wq");
        expect(l.bq, aw, "bq", true);
        expect(l.wk, kvw * d, "wk");
        expect(l.bk, kvw, "bk", true);
        expect(l.wv, kvw * d, "wv");
        expect(l.bv, kvw, "bv", true);
        expect(l.wo, d * aw, "wo");
        expect(l.bo, d, "bo", true);
        expect(l.norm2_w, d, "norm2_w");
        expect(l.norm2_b, d, "norm2_b", true);
        expect(l.w_up, a.ffn * d, "w_up");
        expect(l.b_up, a.ffn, "b_up", true);
        if (!g) expect(l.w_gate, a.ffn * d, "w_gate");
        expect(l.w_down, d * a.ffn, "w_down");
        expect(l.b_down, d, "b_down", true);
    }
    expect(final_norm_w, d, "final_norm_w");
    expect(final_norm_b, d, "final_norm_b", true);
    expect(lm_head, a.vocab * d, "lm_head", true);
}

Weights random_weights(const ArchConfig& a, std::uint64_t seed, float std_dev) {
    a.validate();
    Rng rng(seed);
    auto gauss = [&](std::size_t n, float s) {
        std::vector<float> v(n);
        for (auto& x : v) x = static_cast<float>(rng.normal()) * s;
        return v;
    };
    const std::size_t d = a.hidden, aw = a.heads * a.head_dim, kvw = a.kv_heads * a.head_dim;
    const bool g = a.family == Family::gpt2;
    const float proj_std = std_dev / std::sqrt(2.0f * static_cast<float>(a.layers));
    Weights w;
    w.token_embedding = gauss(a.vocab * d, std_dev);
    if (g) w.position_embedding = gauss(a.context * d, std_dev / 2);
    for (std::size_t l = 0; l < a.layers; ++l) {
        LayerWeights lw;
        lw.norm1_w.assign(d, 1.0f);
        lw.norm2_w.assign(d, 1.0f);
        lw.wq = gauss(aw * d, std_dev);
        lw.wk = gauss(kvw * d, std_dev);
        lw.wv = gauss(kvw * d, std_dev);
        lw.wo = gauss(d * aw, proj_std);
        lw.w_up = gauss(a.ffn * d, std_dev);
        if (!g) lw.w_gate = gauss(a.ffn * d, std_dev);
        lw.w_down = gauss(d * a.ffn, proj_std);
        if (g) {
            lw.norm1_b.assign(d, 0.0f);
            lw.norm2_b.assign(d, 0.0f);
            lw.bq = gauss(aw, std_dev);
            lw.bk = gauss(kvw, std_dev);
            lw.bv = gauss(kvw, std_dev);
            lw.bo = gauss(d, std_dev);
            lw.b_up = gauss(a.ffn, std_dev);
            lw.b_down = gauss(d, std_dev);
        }
        w.layers.push_back(std::move(lw));
    }
    w.final_norm_w.assign(d, 1.0f);
    if (g) w.final_norm_b.assign(d, 0.0f);
    return w;
}

// ---------------------------------------------------------------------------
// llm.c checkpoints

namespace {

constexpr std::int32_t kLlmcMagic = 20240326;

void read_floats(std::ifstream& in, std::vector<float>& v, std::size_t n) {
    v.resize(n);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw IoError("llm.c checkpoint truncated");
}

void write_floats(std::ofstream& out, const std::vector<float>& v) {
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
}

}  // namespace

LlmcCheckpoint load_llmc_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint: " + path.string());
    std::int32_t header[256];
    in.read(reinterpret_cast<char*>(header), sizeof(header));
    if (!in) throw ParseError("llm.c checkpoint header truncated", 0);
    if (header[0] != kLlmcMagic) throw ParseError("not an llm.c GPT-2 checkpoint (bad magic)", 0);
    if (header[1] != 3) {
        throw UnsupportedError("llm.c checkpoint version " + std::to_string(header[1]) + " unsupported (fp32 version 3 only)");
    }
    LlmcCheckpoint ck;
    auto& a = ck.arch;
    a.family = Family::gpt2;
    a.context = static_cast<std::size_t>(header[2]);
    a.vocab = static_cast<std::size_t>(header[3]);
    a.layers = static_cast<std::size_t>(header[4]);
    a.heads = a.kv_heads = static_cast<std::size_t>(header[5]);
    a.hidden = static_cast<std::size_t>(header[6]);
    ck.padded_vocab = static_cast<std::size_t>(header[7]);
    if (a.heads == 0 || a.hidden % a.heads != 0 || ck.padded_vocab < a.vocab) {
        throw ParseError("llm.c checkpoint header inconsistent", 0);
    }
    a.head_dim = a.hidden / a.heads;
    a.ffn = 4 * a.hidden;
    a.validate();
    const std::size_t C = a.hidden, L = a.layers, Vp = ck.padded_vocab, T = a.context;
    std::vector<float> wte, wpe, ln1w, ln1b, qkvw, qkvb, attw, attb, ln2w, ln2b, fcw, fcb, fcpw, fcpb, lnfw, lnfb;
    read_floats(in, wte, Vp * C);
    read_floats(in, wpe, T * C);
    read_floats(in, ln1w, L * C);
    read_floats(in, ln1b, L * C);
    read_floats(in, qkvw, L * 3 * C * C);
    read_floats(in, qkvb, L * 3 * C);
    read_floats(in, attw, L * C * C);
    read_floats(in, attb, L * C);
    read_floats(in, ln2w, L * C);
    read_floats(in, ln2b, L * C);
    read_floats(in, fcw, L * 4 * C * C);
    read_floats(in, fcb, L * 4 * C);
    read_floats(in, fcpw, L * C * 4 * C);
    read_floats(in, fcpb, L * C);
    read_floats(in, lnfw, C);
    read_floats(in, lnfb, C);

    auto slice = [](const std::vector<float>& v, std::size_t off, std::size_t n) {
        return std::vector<float>(v.begin() + static_cast<std::ptrdiff_t>(off), v.begin() + static_cast<std::ptrdiff_t>(off + n));
    };
    auto& w = ck.weights;
    w.token_embedding = slice(wte, 0, a.vocab * C);
    w.position_embedding = std::move(wpe);
    for (std::size_t l = 0; l < L; ++l) {
        LayerWeights lw;
        lw.norm1_w = slice(ln1w, l * C, C);
        lw.norm1_b = slice(ln1b, l * C, C);
        const std::size_t q0 = l * 3 * C * C;
        lw.wq = slice(qkvw, q0, C * C);
        lw.wk = slice(qkvw, q0 + C * C, C * C);
        lw.wv = slice(qkvw, q0 + 2 * C * C, C * C);
        lw.bq = slice(qkvb, l * 3 * C, C);
        lw.bk = slice(qkvb, l * 3 * C + C, C);
        lw.bv = slice(qkvb, l * 3 * C + 2 * C, C);
        lw.wo = slice(attw, l * C * C, C * C);
        lw.bo = slice(attb, l * C, C);
        lw.norm2_w = slice(ln2w, l * C, C);
        lw.norm2_b = slice(ln2b, l * C, C);
        lw.w_up = slice(fcw, l * 4 * C * C, 4 * C * C);
        lw.b_up = slice(fcb, l * 4 * C, 4 * C);
        lw.w_down = slice(fcpw, l * 4 * C * C, 4 * C * C);
        lw.b_down = slice(fcpb, l * C, C);
        w.layers.push_back(std::move(lw));
    }
    w.final_norm_w = std::move(lnfw);
    w.final_norm_b = std::move(lnfb);
    w.validate(a);
    return ck;
}

void save_llmc_checkpoint(const std::filesystem::path& path, const ArchConfig& a, const Weights& w) {
    if (a.family != Family::gpt2 || !w.lm_head.empty()) {
        throw UnsupportedError("llm.c checkpoints hold tied-embedding gpt2 layouts only");
    }
    w.validate(a);
    const std::size_t C = a.hidden;
    for (const auto& l : w.layers) {
        if (l.bq.empty() || l.norm1_b.empty() || l.b_up.empty() || l.b_down.empty() || l.bo.empty() || l.bk.empty() ||
            l.bv.empty() || l.norm2_b.empty()) {
            throw UnsupportedError("llm.c checkpoints require every bias");
        }
    }
    if (a.ffn != 4 * C) throw UnsupportedError("llm.c checkpoints require ffn = 4 * hidden");
    const std::size_t Vp = (a.vocab + 127) / 128 * 128;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path.string());
    std::int32_t header[256] = {};
    header[0] = kLlmcMagic;
    header[1] = 3;
    header[2] = static_cast<std::int32_t>(a.context);
    header[3] = static_cast<std::int32_t>(a.vocab);
    header[4] = static_cast<std::int32_t>(a.layers);
    header[5] = static_cast<std::int32_t>(a.heads);
    header[6] = static_cast<std::int32_t>(C);
    header[7] = static_cast<std::int32_t>(Vp);
    out.write(reinterpret_cast<const char*>(header), sizeof(header));
    std::vector<float> wte = w.token_embedding;
    wte.resize(Vp * C, 0.0f);
    write_floats(out, wte);
    write_floats(out, w.position_embedding);
    auto each = [&](auto get) {
        for (const auto& l : w.layers) write_floats(out, get(l));
    };
    each([](const LayerWeights& l) { return l.norm1_w; });
    each([](const LayerWeights& l) { return l.norm1_b; });
    for (const auto& l : w.layers) {
        write_floats(out, l.wq);
        write_floats(out, l.wk);
        write_floats(out, l.wv);
    }
    for (const auto& l : w.layers) {
        write_floats(out, l.bq);
        write_floats(out, l.bk);
        write_floats(out, l.bv);
    }
    each([](const LayerWeights& l) { return l.wo; });
    each([](const LayerWeights& l) { return l.bo; });
    each([](const LayerWeights& l) { return l.norm2_w; });
    each([](const LayerWeights& l) { return l.norm2_b; });
    each([](const LayerWeights& l) { return l.w_up; });
    each([](const LayerWeights& l) { return l.b_up; });
    each([](const LayerWeights& l) { return l.w_down; });
    each([](const LayerWeights& l) { return l.b_down; });
    write_floats(out, w.final_norm_w);
    write_floats(out, w.final_norm_b);
    if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

}  // namespace plansite::backend
