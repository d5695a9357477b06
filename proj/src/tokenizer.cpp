#include "plansite/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <climits>
#include <fstream>
#include <set>

#include <json.hpp>

#include "plansite/common.hpp"

namespace plansite {

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) out += token_text(id);
    return out;
}

bool Tokenizer::contains_newline(TokenId id) const { return token_text(id).find('\n') != std::string::npos; }

// ---------------------------------------------------------------------------
// WordTokenizer

namespace {

constexpr std::string_view kPunct = ",.:;!?'\"-()";

bool is_word_byte(unsigned char c) { return std::isalnum(c) != 0; }

}  // namespace

WordTokenizer::WordTokenizer(std::vector<std::string> words, bool fuse_comma_newline)
    : fuse_(fuse_comma_newline), words_(std::move(words)) {
    std::sort(words_.begin(), words_.end());
    words_.erase(std::unique(words_.begin(), words_.end()), words_.end());
    add("<|endoftext|>");
    add("\n");
    if (fuse_) add(",\n");
    add(" ");
    for (char p : kPunct) {
        add(std::string(1, p));
        add(std::string(" ") + p);
    }
    for (int c = 0; c < 128; ++c) {
        if (std::isalnum(c)) {
            add(std::string(1, static_cast<char>(c)));
            add(std::string(" ") + static_cast<char>(c));
        }
    }
    byte_base_ = static_cast<TokenId>(tokens_.size());
    for (int b = 0; b < 256; ++b) {
        tokens_.push_back(std::string(1, static_cast<char>(b)));  // not indexed: only reachable as fallback
    }
    for (const auto& w : words_) {
        if (w.empty() || !std::all_of(w.begin(), w.end(), [](unsigned char c) { return is_word_byte(c) || c == '\''; })) {
            throw ValidationError("vocabulary word must be alphanumeric: '" + w + "'");
        }
        if (index_.count(w) == 0) add(w);
        if (index_.count(" " + w) == 0) add(" " + w);
    }
}

void WordTokenizer::add(std::string surface) {
    index_.emplace(surface, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(std::move(surface));
}

TokenId WordTokenizer::lookup(std::string_view surface) const {
    auto it = index_.find(std::string(surface));
    return it == index_.end() ? -1 : it->second;
}

void WordTokenizer::push_byte(std::vector<TokenId>& out, unsigned char b) const {
    out.push_back(byte_base_ + static_cast<TokenId>(b));
}

std::shared_ptr<WordTokenizer> WordTokenizer::from_vocab_file(const std::filesystem::path& path,
                                                              bool fuse_comma_newline) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read vocabulary: " + path.string());
    std::vector<std::string> words;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (!line.empty()) words.push_back(line);
    }
    return std::make_shared<WordTokenizer>(std::move(words), fuse_comma_newline);
}

std::vector<TokenId> WordTokenizer::encode(std::string_view text) const {
    std::vector<TokenId> out;
    std::size_t i = 0;
    const std::size_t n = text.size();
    while (i < n) {
        const auto c = static_cast<unsigned char>(text[i]);
        if (fuse_ && c == ',' && i + 1 < n && text[i + 1] == '\n') {
            out.push_back(lookup(",\n"));
            i += 2;
            continue;
        }
        if (c == '\n') {
            out.push_back(lookup("\n"));
            ++i;
            continue;
        }
        bool space = false;
        std::size_t j = i;
        if (c == ' ' && i + 1 < n && text[i + 1] != ' ' && text[i + 1] != '\n' &&
            !(fuse_ && text[i + 1] == ',' && i + 2 < n && text[i + 2] == '\n')) {
            space = true;
            j = i + 1;
        } else if (c == ' ') {
            out.push_back(lookup(" "));
            ++i;
            continue;
        }
        const auto d = static_cast<unsigned char>(text[j]);
        if (is_word_byte(d)) {
            std::size_t k = j;
            while (k < n && (is_word_byte(static_cast<unsigned char>(text[k])) ||
                             (text[k] == '\'' && k + 1 < n && is_word_byte(static_cast<unsigned char>(text[k + 1])) &&
                              k > j))) {
                ++k;
            }
            const std::string word(text.substr(j, k - j));
            const TokenId whole = lookup(space ? " " + word : word);
            if (whole >= 0) {
                out.push_back(whole);
            } else {
                for (std::size_t p = 0; p < word.size(); ++p) {
                    const std::string piece = (p == 0 && space ? " " : "") + word.substr(p, 1);
                    const TokenId id = lookup(piece);
                    if (id >= 0) {
                        out.push_back(id);
                    } else {
                        if (p == 0 && space) push_byte(out, ' ');
                        push_byte(out, static_cast<unsigned char>(word[p]));
                    }
                }
            }
            i = k;
            continue;
        }
        const std::string punct = (space ? " " : "") + std::string(1, static_cast<char>(d));
        const TokenId id = lookup(punct);
        if (id >= 0) {
            out.push_back(id);
        } else {
            if (space) push_byte(out, ' ');
            push_byte(out, d);
        }
        i = j + 1;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gpt2BpeTokenizer

namespace {

std::array<int, 256> byte_to_codepoint() {
    std::array<int, 256> map{};
    std::vector<bool> direct(256, false);
    for (int b = '!'; b <= '~'; ++b) direct[b] = true;
    for (int b = 0xA1; b <= 0xAC; ++b) direct[b] = true;
    for (int b = 0xAE; b <= 0xFF; ++b) direct[b] = true;
    int extra = 0;
    for (int b = 0; b < 256; ++b) map[b] = direct[b] ? b : 256 + extra++;
    return map;
}

// Decodes a GPT-2 "unicode-mapped" token string back to raw bytes.
std::string unmap_bytes(const std::string& s) {
    static const auto forward = byte_to_codepoint();
    static const auto inverse = [] {
        std::vector<int> inv(512, -1);
        for (int b = 0; b < 256; ++b) inv[forward[b]] = b;
        return inv;
    }();
    std::string out;
    for (std::size_t i = 0; i < s.size();) {
        const auto c = static_cast<unsigned char>(s[i]);
        int cp;
        int len;
        if (c < 0x80) {
            cp = c;
            len = 1;
        } else if ((c >> 5) == 0x6 && i + 1 < s.size()) {
            cp = ((c & 0x1F) << 6) | (static_cast<unsigned char>(s[i + 1]) & 0x3F);
            len = 2;
        } else {
            throw ParseError("unexpected code point in BPE vocabulary", 0);
        }
        if (cp >= static_cast<int>(inverse.size()) || inverse[cp] < 0) {
            throw ParseError("code point outside the byte map in BPE vocabulary", 0);
        }
        out.push_back(static_cast<char>(inverse[cp]));
        i += static_cast<std::size_t>(len);
    }
    return out;
}

std::string pair_key(const std::string& a, const std::string& b) {
    return std::to_string(a.size()) + ":" + a + b;
}

bool is_letter(unsigned char c) { return std::isalpha(c) || c >= 0x80; }
bool is_digit(unsigned char c) { return std::isdigit(c) != 0; }
bool is_space(unsigned char c) { return std::isspace(c) != 0; }

}  // namespace

Gpt2BpeTokenizer::Gpt2BpeTokenizer(const std::filesystem::path& encoder_json, const std::filesystem::path& merges_txt) {
    std::ifstream ej(encoder_json);
    if (!ej) throw IoError("cannot read " + encoder_json.string());
    nlohmann::json enc;
    try {
        ej >> enc;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("encoder.json: ") + e.what(), 0);
    }
    id_to_bytes_.resize(enc.size());
    for (auto it = enc.begin(); it != enc.end(); ++it) {
        const int id = it.value().get<int>();
        if (id < 0 || static_cast<std::size_t>(id) >= id_to_bytes_.size()) {
            throw ParseError("encoder.json: token id out of range", 0);
        }
        std::string bytes = unmap_bytes(it.key());
        encoder_[bytes] = id;
        id_to_bytes_[static_cast<std::size_t>(id)] = std::move(bytes);
    }
    std::ifstream mf(merges_txt);
    if (!mf) throw IoError("cannot read " + merges_txt.string());
    std::string line;
    std::size_t line_no = 0;
    int rank = 0;
    while (std::getline(mf, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.starts_with("#version")) continue;
        const auto sp = line.find(' ');
        if (sp == std::string::npos || line.find(' ', sp + 1) != std::string::npos) {
            throw ParseError("vocab.bpe: expected two symbols", line_no);
        }
        merge_rank_.emplace(pair_key(unmap_bytes(line.substr(0, sp)), unmap_bytes(line.substr(sp + 1))), rank++);
    }
}

std::string Gpt2BpeTokenizer::token_text(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_bytes_.size()) {
        return {};  // padded checkpoint rows have no surface text
    }
    return id_to_bytes_[static_cast<std::size_t>(id)];
}

std::vector<std::string_view> Gpt2BpeTokenizer::pretokenize(std::string_view text) {
    std::vector<std::string_view> out;
    const std::size_t n = text.size();
    std::size_t i = 0;
    auto run = [&](std::size_t from, auto pred) {
        std::size_t k = from;
        while (k < n && pred(static_cast<unsigned char>(text[k]))) ++k;
        return k;
    };
    auto other = [](unsigned char c) { return !is_space(c) && !is_letter(c) && !is_digit(c); };
    while (i < n) {
        const auto c = static_cast<unsigned char>(text[i]);
        if (c == '\'') {
            static constexpr std::array<std::string_view, 7> contractions = {"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"};
            bool matched = false;
            for (auto con : contractions) {
                if (text.substr(i, con.size()) == con) {
                    out.push_back(text.substr(i, con.size()));
                    i += con.size();
                    matched = true;
                    break;
                }
            }
            if (matched) continue;
        }
        std::size_t start = i;
        std::size_t j = i;
        if (c == ' ' && i + 1 < n && !is_space(static_cast<unsigned char>(text[i + 1]))) j = i + 1;
        const auto d = static_cast<unsigned char>(text[j]);
        if (!is_space(d)) {
            std::size_t k;
            if (is_letter(d)) {
                k = run(j, is_letter);
            } else if (is_digit(d)) {
                k = run(j, is_digit);
            } else {
                k = run(j, other);
            }
            out.push_back(text.substr(start, k - start));
            i = k;
            continue;
        }
        const std::size_t k = run(i, is_space);
        if (k < n && k - i >= 2) {
            out.push_back(text.substr(i, k - 1 - i));
            i = k - 1;
        } else {
            out.push_back(text.substr(i, k - i));
            i = k;
        }
    }
    return out;
}

std::vector<TokenId> Gpt2BpeTokenizer::bpe(std::string_view piece) const {
    std::vector<std::string> parts;
    for (char ch : piece) parts.emplace_back(1, ch);
    while (parts.size() > 1) {
        int best = INT_MAX;
        std::size_t at = 0;
        for (std::size_t k = 0; k + 1 < parts.size(); ++k) {
            auto it = merge_rank_.find(pair_key(parts[k], parts[k + 1]));
            if (it != merge_rank_.end() && it->second < best) {
                best = it->second;
                at = k;
            }
        }
        if (best == INT_MAX) break;
        // Merge every occurrence of the winning pair, left to right.
        const std::string a = parts[at];
        const std::string b = parts[at + 1];
        std::vector<std::string> merged;
        for (std::size_t k = 0; k < parts.size();) {
            if (k + 1 < parts.size() && parts[k] == a && parts[k + 1] == b) {
                merged.push_back(a + b);
                k += 2;
            } else {
                merged.push_back(parts[k]);
                ++k;
            }
        }
        parts = std::move(merged);
    }
    std::vector<TokenId> ids;
    for (const auto& p : parts) {
        auto it = encoder_.find(p);
        if (it == encoder_.end()) throw ValidationError("BPE symbol missing from encoder.json");
        ids.push_back(it->second);
    }
    return ids;
}

std::vector<TokenId> Gpt2BpeTokenizer::encode(std::string_view text) const {
    std::vector<TokenId> out;
    for (auto piece : pretokenize(text)) {
        auto ids = bpe(piece);
        out.insert(out.end(), ids.begin(), ids.end());
    }
    return out;
}

}  // namespace plansite
