#include <cstdlib>
#include <map>
#include <mutex>

#include "plansite/backend.hpp"
#include "plansite/common.hpp"
#include "plansite/phonology.hpp"

#ifndef PLANSITE_DEFAULT_DATA_DIR
#define PLANSITE_DEFAULT_DATA_DIR "data"
#endif

namespace plansite {

std::string data_dir() {
    if (const char* env = std::getenv("PLANSITE_DATA_DIR"); env && *env) return env;
    return PLANSITE_DEFAULT_DATA_DIR;
}

}  // namespace plansite

namespace plansite::backend {

namespace {

struct CatalogEntry {
    std::vector<std::string> ids;
    ModelSpec spec;
};

const std::vector<CatalogEntry>& catalog() {
    static const std::vector<CatalogEntry> entries = [] {
        auto make = [](std::string id, std::string family, std::size_t L, std::size_t d, std::size_t V, std::size_t heads,
                       std::size_t kv, std::size_t hd, bool fused) {
            ModelSpec s;
            s.model_id = std::move(id);
            s.family = std::move(family);
            s.layers = L;
            s.hidden = d;
            s.vocab = V;
            s.heads = heads;
            s.kv_heads = kv;
            s.head_dim = hd;
            s.attention_width = heads * hd;
            s.context = 0;
            s.fuses_comma_newline = fused;
            return s;
        };
        return std::vector<CatalogEntry>{
            {{"google/gemma-3-27b-pt", "gemma-3-27b"}, make("google/gemma-3-27b-pt", "gemma3", 62, 5376, 262208, 32, 16, 128, false)},
            {{"Qwen/Qwen3-32B", "qwen3-32b"}, make("Qwen/Qwen3-32B", "qwen3", 64, 5120, 151936, 64, 8, 128, true)},
            {{"meta-llama/Llama-3.1-70B", "llama-3.1-70b"},
             make("meta-llama/Llama-3.1-70B", "llama", 80, 8192, 128256, 64, 8, 128, true)},
        };
    }();
    return entries;
}

struct Shared {
    std::mutex mu;
    std::map<std::string, std::shared_ptr<phonology::PronunciationLexicon>> lexicons;
    std::map<std::string, std::shared_ptr<Model>> models;
    std::map<std::string, ToyRhymerLayout> layouts;
};

Shared& shared() {
    static Shared s;
    return s;
}

std::string resolve_dir(const DeviceConfig& dev) { return dev.data_dir.empty() ? data_dir() : dev.data_dir; }

std::shared_ptr<phonology::PronunciationLexicon> lexicon_for(const std::string& dir) {
    auto& s = shared();
    auto it = s.lexicons.find(dir);
    if (it != s.lexicons.end()) return it->second;
    auto lex = std::make_shared<phonology::PronunciationLexicon>(
        phonology::load_pronouncing_lexicon(std::filesystem::path(dir) / "cmudict-0.7b"));
    s.lexicons[dir] = lex;
    return lex;
}

std::uint64_t parse_seed(const std::string& id, const std::string& prefix) {
    if (id.size() == prefix.size()) return 0;
    if (id[prefix.size()] != ':') throw ValidationError("unknown model id: " + id);
    try {
        return std::stoull(id.substr(prefix.size() + 1));
    } catch (const std::exception&) {
        throw ValidationError("bad seed in model id: " + id);
    }
}

std::shared_ptr<Model> build(const std::string& id, const DeviceConfig& dev) {
    const std::string dir = resolve_dir(dev);
    const auto vocab = std::filesystem::path(dir) / "toy_vocab.txt";
    if (id == "toy-rhymer" || id == "toy-rhymer-fused") {
        auto tok = WordTokenizer::from_vocab_file(vocab, id == "toy-rhymer-fused");
        ArchConfig arch;
        ToyRhymerLayout layout;
        auto w = toy_rhymer_weights(*tok, *lexicon_for(dir), ToyRhymerOptions{}, &arch, &layout);
        shared().layouts[id + "|" + dir] = layout;
        return std::make_shared<Model>(id, arch, std::move(w), tok);
    }
    if (id.rfind("toy-gpt2", 0) == 0 || id.rfind("toy-llama", 0) == 0) {
        const bool llama = id.rfind("toy-llama", 0) == 0;
        const std::uint64_t seed = parse_seed(id, llama ? "toy-llama" : "toy-gpt2");
        auto tok = WordTokenizer::from_vocab_file(vocab, llama);
        ArchConfig a;
        a.family = llama ? Family::llama : Family::gpt2;
        a.layers = 4;
        a.hidden = 64;
        a.heads = 4;
        a.kv_heads = llama ? 2 : 4;
        a.head_dim = 16;
        a.ffn = llama ? 172 : 256;
        a.vocab = tok->vocab_size();
        a.context = 128;
        return std::make_shared<Model>(id, a, random_weights(a, seed), tok);
    }
    if (id.rfind("llmc:", 0) == 0) {
        const std::filesystem::path bin = id.substr(5);
        auto ck = load_llmc_checkpoint(bin);
        const auto parent = bin.parent_path();
        auto tok = std::make_shared<Gpt2BpeTokenizer>(parent / "encoder.json", parent / "vocab.bpe");
        if (tok->vocab_size() != ck.arch.vocab) {
            throw ValidationError("tokenizer vocabulary " + std::to_string(tok->vocab_size()) + " != checkpoint vocabulary " +
                                  std::to_string(ck.arch.vocab));
        }
        return std::make_shared<Model>(id, ck.arch, std::move(ck.weights), tok);
    }
    if (auto spec = catalog_spec(id)) {
        std::string layouts;
        for (const auto& l : known_hook_layouts()) layouts += (layouts.empty() ? "" : ", ") + l;
        if (spec->family == "llama") {
            throw UnsupportedError("no local weights for " + id + "; the in-process runtime loads gpt2 (llm.c) and toy checkpoints only");
        }
        throw UnsupportedError("unsupported architecture family '" + spec->family + "' for " + id +
                               "; known hook layouts: " + layouts);
    }
    throw ValidationError("unknown model id: " + id);
}

}  // namespace

std::vector<std::string> known_hook_layouts() { return {"gpt2", "llama"}; }

std::optional<ModelSpec> catalog_spec(const std::string& model_id) {
    for (const auto& e : catalog()) {
        for (const auto& id : e.ids) {
            if (id == model_id) return e.spec;
        }
    }
    return std::nullopt;
}

std::vector<std::string> catalog_ids() {
    std::vector<std::string> out;
    for (const auto& e : catalog()) out.push_back(e.ids.front());
    return out;
}

std::shared_ptr<Model> load_model(const std::string& model_id, const DeviceConfig& device) {
    if (device.device != "cpu") throw UnsupportedError("device '" + device.device + "' unavailable; only cpu is supported");
    if (device.precision != "fp32") throw UnsupportedError("precision '" + device.precision + "' unsupported; use fp32");
    auto& s = shared();
    std::lock_guard lock(s.mu);
    const std::string key = model_id + "|" + resolve_dir(device);
    if (auto it = s.models.find(key); it != s.models.end()) return it->second;
    auto m = build(model_id, device);
    s.models[key] = m;
    return m;
}

std::optional<ToyRhymerLayout> toy_rhymer_layout(const std::string& model_id, const DeviceConfig& device) {
    if (model_id != "toy-rhymer" && model_id != "toy-rhymer-fused") return std::nullopt;
    load_model(model_id, device);
    auto& s = shared();
    std::lock_guard lock(s.mu);
    return s.layouts.at(model_id + "|" + resolve_dir(device));
}

}  // namespace plansite::backend
