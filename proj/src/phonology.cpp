#include "plansite/phonology.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <set>

#include "plansite/common.hpp"

namespace plansite::phonology {

namespace {

constexpr std::array<std::string_view, 15> kVowels = {"AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER",
                                                      "EY", "IH", "IY", "OW", "OY", "UH", "UW"};
constexpr std::array<std::string_view, 24> kConsonants = {"B",  "CH", "D",  "DH", "F", "G", "HH", "JH",
                                                          "K",  "L",  "M",  "N",  "NG", "P", "R",  "S",
                                                          "SH", "T",  "TH", "V",  "W",  "Y", "Z",  "ZH"};

bool is_base_vowel(std::string_view s) {
    return std::find(kVowels.begin(), kVowels.end(), s) != kVowels.end();
}

bool is_consonant(std::string_view s) {
    return std::find(kConsonants.begin(), kConsonants.end(), s) != kConsonants.end();
}

bool valid_phoneme(std::string_view p) {
    if (p.size() >= 3 && (p.back() == '0' || p.back() == '1' || p.back() == '2')) {
        return is_base_vowel(p.substr(0, p.size() - 1));
    }
    return is_consonant(p);
}

std::string latin1_to_utf8(std::string_view in) {
    std::string out;
    out.reserve(in.size());
    for (unsigned char c : in) {
        if (c < 0x80) {
            out.push_back(static_cast<char>(c));
        } else {
            out.push_back(static_cast<char>(0xC0 | (c >> 6)));
            out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
        }
    }
    return out;
}

std::string ascii_lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

bool is_word_char(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

std::vector<std::string_view> split_ws(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
        const std::size_t start = i;
        while (i < s.size() && !std::isspace(static_cast<unsigned char>(s[i]))) ++i;
        if (i > start) out.push_back(s.substr(start, i - start));
    }
    return out;
}

}  // namespace

std::string to_string(RhymeVerdict v) {
    switch (v) {
        case RhymeVerdict::rhyme: return "rhyme";
        case RhymeVerdict::no_rhyme: return "no_rhyme";
        case RhymeVerdict::unknown: return "unknown";
    }
    return "unknown";
}

IdenticalWordPolicy identical_policy_from_string(const std::string& s) {
    if (s == "count_identical") return IdenticalWordPolicy::count_identical;
    if (s == "exclude_identical") return IdenticalWordPolicy::exclude_identical;
    throw ValidationError("unknown identical-word policy '" + s + "'");
}

std::string to_string(IdenticalWordPolicy p) {
    return p == IdenticalWordPolicy::count_identical ? "count_identical" : "exclude_identical";
}

PronunciationLexicon::PronunciationLexicon(std::unordered_map<std::string, std::vector<Pronunciation>> entries)
    : entries_(std::move(entries)) {}

bool PronunciationLexicon::contains(std::string_view word) const { return find(word) != nullptr; }

const std::vector<Pronunciation>* PronunciationLexicon::find(std::string_view word) const {
    auto it = entries_.find(ascii_lower(word));
    return it == entries_.end() ? nullptr : &it->second;
}

PronunciationLexicon load_pronouncing_lexicon(const std::filesystem::path& path, LoadReport* report) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read pronouncing lexicon: " + path.string());

    std::unordered_map<std::string, std::vector<Pronunciation>> entries;
    std::size_t prons = 0;
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        if (!raw.empty() && raw.back() == '\r') raw.pop_back();
        if (raw.starts_with(";;;")) continue;
        if (std::all_of(raw.begin(), raw.end(), [](unsigned char c) { return std::isspace(c); })) continue;

        const std::string line = latin1_to_utf8(raw);
        auto fields = split_ws(line);
        if (fields.size() < 2) throw ParseError("lexicon entry without phonemes", line_no);

        std::string_view head = fields[0];
        if (head.back() == ')') {
            const auto open = head.rfind('(');
            if (open == std::string_view::npos || open == 0) throw ParseError("malformed variant suffix", line_no);
            const auto digits = head.substr(open + 1, head.size() - open - 2);
            if (digits.empty() || !std::all_of(digits.begin(), digits.end(),
                                               [](unsigned char c) { return std::isdigit(c); })) {
                throw ParseError("malformed variant suffix", line_no);
            }
            head = head.substr(0, open);
        }
        Pronunciation pron;
        pron.reserve(fields.size() - 1);
        for (std::size_t i = 1; i < fields.size(); ++i) {
            if (!valid_phoneme(fields[i])) {
                throw ParseError("invalid phoneme '" + std::string(fields[i]) + "'", line_no);
            }
            pron.emplace_back(fields[i]);
        }
        entries[ascii_lower(head)].push_back(std::move(pron));
        ++prons;
    }
    if (report) {
        report->entries = entries.size();
        report->pronunciations = prons;
        if (entries.empty()) report->warnings.push_back("lexicon is empty: " + path.string());
    }
    return PronunciationLexicon(std::move(entries));
}

std::string normalize_word(std::string_view word) {
    std::size_t b = 0;
    std::size_t e = word.size();
    while (b < e && !is_word_char(static_cast<unsigned char>(word[b]))) ++b;
    while (e > b && !is_word_char(static_cast<unsigned char>(word[e - 1]))) --e;
    return ascii_lower(word.substr(b, e - b));
}

bool is_vowel_phoneme(std::string_view phoneme) {
    while (!phoneme.empty() && std::isdigit(static_cast<unsigned char>(phoneme.back()))) {
        phoneme.remove_suffix(1);
    }
    return is_base_vowel(phoneme);
}

RhymeKey rhyme_key_of(const Pronunciation& pron) {
    std::optional<std::size_t> stressed;
    std::optional<std::size_t> any_vowel;
    for (std::size_t i = 0; i < pron.size(); ++i) {
        const auto& p = pron[i];
        if (!is_vowel_phoneme(p)) continue;
        any_vowel = i;
        if (p.back() == '1' || p.back() == '2') stressed = i;
    }
    const auto start = stressed ? stressed : any_vowel;
    if (!start) return {};
    RhymeKey key;
    for (std::size_t i = *start; i < pron.size(); ++i) {
        std::string p = pron[i];
        while (!p.empty() && std::isdigit(static_cast<unsigned char>(p.back()))) p.pop_back();
        key.push_back(std::move(p));
    }
    return key;
}

std::optional<std::vector<RhymeKey>> rhyme_key(std::string_view word, const PronunciationLexicon& lexicon) {
    const auto* prons = lexicon.find(normalize_word(word));
    if (!prons) return std::nullopt;
    std::vector<RhymeKey> keys;
    for (const auto& p : *prons) {
        auto k = rhyme_key_of(p);
        if (k.empty()) continue;
        if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(std::move(k));
    }
    if (keys.empty()) return std::nullopt;
    return keys;
}

RhymeVerdict rhymes(std::string_view a, std::string_view b, const PronunciationLexicon& lexicon,
                    IdenticalWordPolicy policy) {
    const std::string na = normalize_word(a);
    const std::string nb = normalize_word(b);
    const auto ka = rhyme_key(na, lexicon);
    const auto kb = rhyme_key(nb, lexicon);
    if (!ka || !kb) return RhymeVerdict::unknown;
    if (na == nb) {
        return policy == IdenticalWordPolicy::count_identical ? RhymeVerdict::rhyme : RhymeVerdict::no_rhyme;
    }
    for (const auto& x : *ka) {
        for (const auto& y : *kb) {
            if (x == y) return RhymeVerdict::rhyme;
        }
    }
    return RhymeVerdict::no_rhyme;
}

std::string final_word(std::string_view line) {
    const auto tokens = split_ws(line);
    for (auto it = tokens.rbegin(); it != tokens.rend(); ++it) {
        std::string w = normalize_word(*it);
        if (!w.empty()) return w;
    }
    throw ValidationError("no final word in line");
}

std::string key_to_string(const RhymeKey& key) {
    std::string out;
    for (const auto& p : key) {
        if (!out.empty()) out.push_back(' ');
        out += p;
    }
    return out;
}

}  // namespace plansite::phonology
