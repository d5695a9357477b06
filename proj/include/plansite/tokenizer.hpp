#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace plansite {

using TokenId = int;

/// Text <-> token id mapping for one model family. Decoding the concatenated
/// surface text of every token reproduces the encoded string exactly.
class Tokenizer {
public:
    virtual ~Tokenizer() = default;

    virtual std::vector<TokenId> encode(std::string_view text) const = 0;
    virtual std::string token_text(TokenId id) const = 0;
    virtual std::size_t vocab_size() const = 0;

    /// True when ",\n" is emitted as a single token (last word at relative -1).
    virtual bool fuses_comma_newline() const = 0;
    virtual std::string name() const = 0;

    std::string decode(std::span<const TokenId> ids) const;
    bool contains_newline(TokenId id) const;
};

/// Closed-vocabulary word tokenizer used by the toy models. Every listed word
/// gets a bare and a space-prefixed token; anything else falls back to
/// single-character pieces and raw bytes, so encoding never fails.
class WordTokenizer final : public Tokenizer {
public:
    WordTokenizer(std::vector<std::string> words, bool fuse_comma_newline);

    static std::shared_ptr<WordTokenizer> from_vocab_file(const std::filesystem::path& path, bool fuse_comma_newline);

    std::vector<TokenId> encode(std::string_view text) const override;
    std::string token_text(TokenId id) const override { return tokens_.at(static_cast<std::size_t>(id)); }
    std::size_t vocab_size() const override { return tokens_.size(); }
    bool fuses_comma_newline() const override { return fuse_; }
    std::string name() const override { return fuse_ ? "word-fused" : "word"; }

    const std::vector<std::string>& words() const { return words_; }
    /// Token id of an exact surface string, or -1.
    TokenId lookup(std::string_view surface) const;
    TokenId newline_id() const { return lookup("\n"); }

private:
    void add(std::string surface);
    void push_byte(std::vector<TokenId>& out, unsigned char b) const;

    bool fuse_;
    std::vector<std::string> words_;
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
    TokenId byte_base_ = 0;
};

/// GPT-2 byte-level BPE from `encoder.json` + `vocab.bpe`.
class Gpt2BpeTokenizer final : public Tokenizer {
public:
    Gpt2BpeTokenizer(const std::filesystem::path& encoder_json, const std::filesystem::path& merges_txt);

    std::vector<TokenId> encode(std::string_view text) const override;
    std::string token_text(TokenId id) const override;
    std::size_t vocab_size() const override { return id_to_bytes_.size(); }
    bool fuses_comma_newline() const override { return false; }
    std::string name() const override { return "gpt2-bpe"; }

    /// The pre-tokenizer split (GPT-2 regex semantics; bytes >= 0x80 count as letters).
    static std::vector<std::string_view> pretokenize(std::string_view text);

private:
    std::vector<TokenId> bpe(std::string_view piece) const;

    std::unordered_map<std::string, TokenId> encoder_;  // keyed by raw bytes
    std::vector<std::string> id_to_bytes_;
    std::unordered_map<std::string, int> merge_rank_;    // "a b" over raw-byte symbols
};

}  // namespace plansite
