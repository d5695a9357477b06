#include "plansite/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>

#include "plansite/common.hpp"
#include "plansite/random.hpp"

namespace plansite::corpus {

using phonology::RhymeVerdict;

void to_json(nlohmann::json& j, const Couplet& c) {
    j = nlohmann::json{{"id", c.id}, {"line1", c.line1}, {"line2", c.line2}, {"r1", c.r1},
                       {"r2", c.r2}, {"topic", c.topic}, {"split", c.split}};
}

void from_json(const nlohmann::json& j, Couplet& c) {
    c.id = j.at("id").get<std::string>();
    c.line1 = j.at("line1").get<std::string>();
    c.line2 = j.at("line2").get<std::string>();
    c.r1 = j.at("r1").get<std::string>();
    c.r2 = j.at("r2").get<std::string>();
    c.topic = j.value("topic", "");
    c.split = j.at("split").get<std::string>();
}

std::optional<std::string> couplet_violation(const Couplet& c, const phonology::PronunciationLexicon& lexicon,
                                             phonology::IdenticalWordPolicy policy) {
    if (c.split != "train" && c.split != "validation") return "split must be 'train' or 'validation'";
    std::string last1;
    std::string last2;
    try {
        last1 = phonology::final_word(c.line1);
        last2 = phonology::final_word(c.line2);
    } catch (const ValidationError&) {
        return "line without a final word";
    }
    if (last1 != phonology::normalize_word(c.r1)) return "r1 is not the final word of line1";
    if (last2 != phonology::normalize_word(c.r2)) return "r2 is not the final word of line2";
    if (phonology::rhymes(c.r1, c.r2, lexicon, policy) == RhymeVerdict::no_rhyme) {
        return "r1 and r2 do not rhyme";
    }
    return std::nullopt;
}

CoupletLoadResult load_couplets(const std::filesystem::path& path, const phonology::PronunciationLexicon& lexicon,
                                const CoupletLoadOptions& opts) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read couplet dataset: " + path.string());
    CoupletLoadResult result;
    std::string line;
    std::size_t line_no = 0;
    std::size_t records = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (std::all_of(line.begin(), line.end(), [](unsigned char ch) { return std::isspace(ch); })) continue;
        ++records;
        Couplet c;
        try {
            c = nlohmann::json::parse(line).get<Couplet>();
        } catch (const nlohmann::json::exception& e) {
            result.rejected.push_back({"line " + std::to_string(line_no), std::string("schema: ") + e.what()});
            continue;
        }
        if (auto why = couplet_violation(c, lexicon, opts.policy)) {
            result.rejected.push_back({c.id, *why});
            continue;
        }
        if (phonology::rhymes(c.r1, c.r2, lexicon, opts.policy) == RhymeVerdict::unknown) {
            result.warnings.push_back(c.id + ": rhyme words not in lexicon (" + c.r1 + ", " + c.r2 + ")");
        }
        (c.split == "train" ? result.train : result.validation) += 1;
        result.couplets.push_back(std::move(c));
    }
    if (records == 0) throw ValidationError("no records in " + path.string());
    const double frac = static_cast<double>(result.rejected.size()) / static_cast<double>(records);
    if (frac > opts.max_reject_fraction) {
        throw ValidationError("couplet dataset rejected: " + std::to_string(result.rejected.size()) + " of " +
                              std::to_string(records) + " records fail validation (first: " +
                              result.rejected.front().record_id + ": " + result.rejected.front().reason + ")");
    }
    return result;
}

void save_couplets(const std::filesystem::path& path, const std::vector<Couplet>& couplets) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    for (const auto& c : couplets) out << nlohmann::json(c).dump() << '\n';
}

std::string truncation_prompt(const Couplet& c, std::string_view preamble) {
    std::string out(preamble);
    out += c.line1;
    out += '\n';
    return out;
}

// ---------------------------------------------------------------------------
// Positions

std::size_t PositionMap::absolute(int rel) const {
    const long long abs = static_cast<long long>(newline_index) + rel;
    if (abs < 0) throw RangeError("relative position " + std::to_string(rel) + " precedes the sequence start");
    return static_cast<std::size_t>(abs);
}

void to_json(nlohmann::json& j, const PositionMap& m) {
    j = nlohmann::json{{"newline_index", m.newline_index},
                       {"last_word_index", m.last_word_index},
                       {"last_word_rel", m.last_word_rel},
                       {"last_word_tokens", m.last_word_tokens},
                       {"comma_newline_fused", m.comma_newline_fused},
                       {"multi_token_word", m.multi_token_word},
                       {"sequence_length", m.sequence_length}};
}

namespace {

bool has_alnum(const std::string& s) {
    return std::any_of(s.begin(), s.end(), [](unsigned char c) { return std::isalnum(c) || c >= 0x80; });
}

bool ends_alnum(const std::string& s) {
    return !s.empty() && (std::isalnum(static_cast<unsigned char>(s.back())) || static_cast<unsigned char>(s.back()) >= 0x80);
}

bool starts_alnum(const std::string& s) {
    return !s.empty() && (std::isalnum(static_cast<unsigned char>(s.front())) ||
                          static_cast<unsigned char>(s.front()) >= 0x80);
}

}  // namespace

PositionMap resolve_positions(std::span<const TokenId> tokens, const Tokenizer& tokenizer) {
    PositionMap m;
    m.sequence_length = tokens.size();
    std::optional<std::size_t> nl;
    for (std::size_t k = tokens.size(); k-- > 0;) {
        if (tokenizer.contains_newline(tokens[k])) {
            nl = k;
            break;
        }
    }
    if (!nl) throw ValidationError("position resolution: no newline token in sequence");
    m.newline_index = *nl;
    const std::string nl_text = tokenizer.token_text(tokens[*nl]);
    m.comma_newline_fused = nl_text.substr(0, nl_text.find('\n')).find_first_not_of(" \t") != std::string::npos;

    std::optional<std::size_t> last;
    for (std::size_t k = *nl; k-- > 0;) {
        const std::string t = tokenizer.token_text(tokens[k]);
        if (t.find('\n') != std::string::npos) break;
        if (has_alnum(t)) {
            last = k;
            break;
        }
    }
    if (!last) throw ValidationError("position resolution: no word before the newline");
    std::size_t first = *last;
    while (first > 0) {
        const std::string cur = tokenizer.token_text(tokens[first]);
        const std::string prev = tokenizer.token_text(tokens[first - 1]);
        if (!starts_alnum(cur) || !ends_alnum(prev)) break;
        --first;
    }
    m.last_word_index = first;
    m.last_word_tokens = *last - first + 1;
    m.multi_token_word = m.last_word_tokens > 1;
    m.last_word_rel = static_cast<int>(first) - static_cast<int>(*nl);
    return m;
}

RelPosition RelPosition::parse(const nlohmann::json& j) {
    RelPosition p;
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "last_word") {
            p.last_word = true;
            return p;
        }
        if (s == "newline") return p;
        try {
            std::size_t used = 0;
            p.offset = std::stoi(s, &used);
            if (used != s.size()) throw std::invalid_argument(s);
            return p;
        } catch (const std::exception&) {
            throw ValidationError("position must be an integer, 'newline' or 'last_word', got '" + s + "'");
        }
    }
    if (j.is_number_integer()) {
        p.offset = j.get<int>();
        return p;
    }
    throw ValidationError("position must be an integer or 'last_word'");
}

nlohmann::json RelPosition::to_json() const {
    if (last_word) return "last_word";
    return offset;
}

std::string RelPosition::label() const { return last_word ? "last_word" : "i=" + std::to_string(offset); }

// ---------------------------------------------------------------------------
// Prompt pairs

std::vector<PromptPairSpec> load_prompt_pair_specs(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read prompt-pair specs: " + path.string());
    std::vector<PromptPairSpec> specs;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (std::all_of(line.begin(), line.end(), [](unsigned char ch) { return std::isspace(ch); })) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            specs.push_back({j.at("pair_id").get<std::string>(), j.at("template").get<std::string>(),
                             j.at("clean_word").get<std::string>(), j.at("corrupt_word").get<std::string>()});
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("prompt-pair spec: ") + e.what(), line_no);
        }
    }
    if (specs.empty()) throw ValidationError("no prompt-pair specs in " + path.string());
    return specs;
}

std::string PromptPair::line2_prefix() const {
    const auto nl = clean_prompt.rfind('\n');
    return nl == std::string::npos ? std::string() : clean_prompt.substr(nl + 1);
}

PromptPairBuild build_prompt_pairs(const std::vector<PromptPairSpec>& specs, const Tokenizer& tokenizer,
                                   const phonology::PronunciationLexicon& lexicon) {
    PromptPairBuild out;
    for (const auto& spec : specs) {
        auto reject = [&](std::string why) { out.rejected.push_back({spec.pair_id, std::move(why)}); };
        const auto slot = spec.template_text.find("{word}");
        if (slot == std::string::npos || spec.template_text.find("{word}", slot + 1) != std::string::npos) {
            reject("template must contain {word} exactly once");
            continue;
        }
        const auto verdict = phonology::rhymes(spec.clean_word, spec.corrupt_word, lexicon,
                                               phonology::IdenticalWordPolicy::count_identical);
        if (verdict == RhymeVerdict::rhyme) {
            reject("clean and corrupt words rhyme (" + spec.clean_word + "/" + spec.corrupt_word + ")");
            continue;
        }
        if (verdict == RhymeVerdict::unknown) {
            reject("rhyme relation unknown: word missing from lexicon");
            continue;
        }
        PromptPair p;
        p.pair_id = spec.pair_id;
        p.clean_word = spec.clean_word;
        p.corrupt_word = spec.corrupt_word;
        p.clean_prompt = spec.template_text;
        p.clean_prompt.replace(slot, 6, spec.clean_word);
        p.corrupt_prompt = spec.template_text;
        p.corrupt_prompt.replace(slot, 6, spec.corrupt_word);
        p.clean_tokens = tokenizer.encode(p.clean_prompt);
        p.corrupt_tokens = tokenizer.encode(p.corrupt_prompt);
        if (p.clean_tokens.size() != p.corrupt_tokens.size()) {
            reject("clean and corrupt prompts tokenize to different lengths (" +
                   std::to_string(p.clean_tokens.size()) + " vs " + std::to_string(p.corrupt_tokens.size()) + ")");
            continue;
        }
        try {
            p.clean_map = resolve_positions(p.clean_tokens, tokenizer);
            p.corrupt_map = resolve_positions(p.corrupt_tokens, tokenizer);
        } catch (const ValidationError& e) {
            reject(e.what());
            continue;
        }
        if (p.clean_map.newline_index != p.corrupt_map.newline_index ||
            p.clean_map.last_word_index != p.corrupt_map.last_word_index) {
            reject("clean and corrupt position maps do not align");
            continue;
        }
        const std::size_t lw = p.clean_map.last_word_index;
        const std::size_t lw_end = lw + p.clean_map.last_word_tokens;
        bool prefix_ok = std::equal(p.clean_tokens.begin(), p.clean_tokens.begin() + static_cast<long>(lw),
                                    p.corrupt_tokens.begin());
        bool suffix_ok = std::equal(p.clean_tokens.begin() + static_cast<long>(lw_end), p.clean_tokens.end(),
                                    p.corrupt_tokens.begin() + static_cast<long>(lw_end));
        bool differs = !std::equal(p.clean_tokens.begin() + static_cast<long>(lw),
                                   p.clean_tokens.begin() + static_cast<long>(lw_end),
                                   p.corrupt_tokens.begin() + static_cast<long>(lw));
        if (!prefix_ok || !suffix_ok || !differs) {
            reject("prompts must differ exactly in the last-word tokens");
            continue;
        }
        out.pairs.push_back(std::move(p));
    }
    return out;
}

// ---------------------------------------------------------------------------
// General text

std::vector<GeneralTextSample> sample_general_text(const std::filesystem::path& corpus_path, const Tokenizer& tokenizer,
                                                   std::size_t n, LengthBounds bounds, std::uint64_t seed) {
    if (n == 0) throw ValidationError("sample_general_text: n must be >= 1");
    if (bounds.min_tokens == 0 || bounds.min_tokens > bounds.max_tokens) {
        throw ValidationError("sample_general_text: invalid length bounds");
    }
    std::ifstream in(corpus_path);
    if (!in) throw IoError("cannot read corpus: " + corpus_path.string());
    struct Doc {
        std::string id;
        std::vector<TokenId> tokens;
    };
    std::vector<Doc> eligible;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (std::all_of(line.begin(), line.end(), [](unsigned char ch) { return std::isspace(ch); })) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("corpus document: ") + e.what(), line_no);
        }
        const std::string id = j.value("doc_id", "line" + std::to_string(line_no));
        auto toks = tokenizer.encode(j.at("text").get<std::string>());
        if (toks.size() >= bounds.min_tokens) eligible.push_back({id, std::move(toks)});
    }
    if (eligible.empty()) throw ValidationError("sample_general_text: no document satisfies the length bounds");
    if (eligible.size() < n) {
        throw ValidationError("sample_general_text: corpus has " + std::to_string(eligible.size()) +
                              " eligible documents, fewer than n = " + std::to_string(n));
    }
    Rng rng(seed);
    std::vector<std::size_t> order(eligible.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);

    const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) / 6.0));
    std::vector<GeneralTextSample> out;
    out.reserve(n);
    for (std::size_t s = 0; s < n; ++s) {
        const Doc& d = eligible[order[s]];
        GeneralTextSample g;
        g.doc_id = d.id;
        std::size_t len = std::min(d.tokens.size(), bounds.max_tokens);
        g.source_offset = d.tokens.size() > len ? rng.index(d.tokens.size() - len + 1) : 0;
        g.tokens.assign(d.tokens.begin() + static_cast<long>(g.source_offset),
                        d.tokens.begin() + static_cast<long>(g.source_offset + len));
        g.split = s < n - n_val ? "train" : "validation";
        out.push_back(std::move(g));
    }
    return out;
}

}  // namespace plansite::corpus
