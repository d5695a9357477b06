#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace plansite::phonology {

using Pronunciation = std::vector<std::string>;

/// Phoneme suffix from the rhyming vowel to the end, stress digits stripped.
using RhymeKey = std::vector<std::string>;

enum class RhymeVerdict { rhyme, no_rhyme, unknown };

std::string to_string(RhymeVerdict v);

/// Whether two identical normalized words count as rhyming.
enum class IdenticalWordPolicy { count_identical, exclude_identical };

IdenticalWordPolicy identical_policy_from_string(const std::string& s);
std::string to_string(IdenticalWordPolicy p);

/// CMU-style pronouncing lexicon. Immutable once constructed.
class PronunciationLexicon {
public:
    PronunciationLexicon() = default;

    /// Takes already normalized (lowercase) headwords.
    explicit PronunciationLexicon(std::unordered_map<std::string, std::vector<Pronunciation>> entries);

    std::size_t size() const { return entries_.size(); }
    bool contains(std::string_view word) const;

    /// Case-insensitive; nullptr when absent.
    const std::vector<Pronunciation>* find(std::string_view word) const;

private:
    std::unordered_map<std::string, std::vector<Pronunciation>> entries_;
};

struct LoadReport {
    std::size_t entries = 0;
    std::size_t pronunciations = 0;
    std::vector<std::string> warnings;
};

/// Reads the cmudict-0.7b plain-text layout (Latin-1, `;;;` comments,
/// `WORD(2)` variants). Any malformed line aborts with a ParseError.
PronunciationLexicon load_pronouncing_lexicon(const std::filesystem::path& path, LoadReport* report = nullptr);

/// Lowercases and strips surrounding punctuation; interior apostrophes and hyphens survive.
std::string normalize_word(std::string_view word);

bool is_vowel_phoneme(std::string_view phoneme);

/// One key per distinct pronunciation, or nullopt for out-of-lexicon words.
std::optional<std::vector<RhymeKey>> rhyme_key(std::string_view word, const PronunciationLexicon& lexicon);

RhymeKey rhyme_key_of(const Pronunciation& pron);

RhymeVerdict rhymes(std::string_view a, std::string_view b, const PronunciationLexicon& lexicon,
                    IdenticalWordPolicy policy = IdenticalWordPolicy::count_identical);

/// Last whitespace-delimited token, punctuation stripped, lowercased.
/// Throws ValidationError when the line has no word characters.
std::string final_word(std::string_view line);

std::string key_to_string(const RhymeKey& key);

}  // namespace plansite::phonology
