#include <filesystem>
#include <fstream>

#include <doctest.h>

#include "plansite/common.hpp"
#include "plansite/phonology.hpp"

using namespace plansite;
using namespace plansite::phonology;

namespace {

const PronunciationLexicon& cmu() {
    static const PronunciationLexicon lex = load_pronouncing_lexicon(data_dir() + "/cmudict-0.7b");
    return lex;
}

std::filesystem::path write_tmp(const std::string& name, const std::string& body) {
    const auto p = std::filesystem::temp_directory_path() / name;
    std::ofstream(p, std::ios::binary) << body;
    return p;
}

}  // namespace

TEST_CASE("rhyme verdicts on known words") {
    CHECK(rhymes("fright", "night", cmu()) == RhymeVerdict::rhyme);
    CHECK(rhymes("fright", "joy", cmu()) == RhymeVerdict::no_rhyme);
    CHECK(rhymes("fright", "fear", cmu()) == RhymeVerdict::no_rhyme);
    CHECK(rhymes("Night,", "LIGHT.", cmu()) == RhymeVerdict::rhyme);
    CHECK(rhymes("pain", "rain", cmu()) == RhymeVerdict::rhyme);
    CHECK(rhymes("bed", "dread", cmu()) == RhymeVerdict::rhyme);
    CHECK(rhymes("appear", "fear", cmu()) == RhymeVerdict::rhyme);
}

TEST_CASE("unknown words") {
    CHECK(rhymes("fright", "zzyzxqq", cmu()) == RhymeVerdict::unknown);
    CHECK(rhymes("zzyzxqq", "zzyzxqq", cmu()) == RhymeVerdict::unknown);
    CHECK_FALSE(rhyme_key("zzyzxqq", cmu()).has_value());
}

TEST_CASE("identical words follow the policy") {
    CHECK(rhymes("night", "night", cmu()) == RhymeVerdict::rhyme);
    CHECK(rhymes("night", "Night!", cmu(), IdenticalWordPolicy::exclude_identical) == RhymeVerdict::no_rhyme);
    CHECK(identical_policy_from_string("exclude_identical") == IdenticalWordPolicy::exclude_identical);
    CHECK(to_string(IdenticalWordPolicy::count_identical) == "count_identical");
}

TEST_CASE("rhyme verdict is symmetric") {
    const char* words[] = {"night", "fright", "joy", "toy", "fear", "appear", "pain", "rain", "bed", "dread", "light"};
    for (const char* a : words) {
        for (const char* b : words) CHECK(rhymes(a, b, cmu()) == rhymes(b, a, cmu()));
    }
}

TEST_CASE("rhyme keys start at the stressed vowel") {
    CHECK(key_to_string(rhyme_key_of({"N", "AY1", "T"})) == "AY T");
    CHECK(key_to_string(rhyme_key_of({"AH0", "P", "IH1", "R"})) == "IH R");
    // no stressed vowel: fall back to the last vowel
    CHECK(key_to_string(rhyme_key_of({"DH", "AH0"})) == "AH");
    CHECK(rhyme_key_of({"S", "T"}).empty());
    CHECK(is_vowel_phoneme("AY1"));
    CHECK_FALSE(is_vowel_phoneme("T"));
}

TEST_CASE("final word extraction") {
    CHECK(final_word("when suddenly they heard a creaking bed.") == "bed");
    CHECK(final_word("The hall was filled with silent dread,") == "dread");
    CHECK(final_word("  so much \"JOY\"!  ") == "joy");
    CHECK(final_word("it's the end ...") == "end");
    CHECK(final_word("rock-and-roll") == "rock-and-roll");
    CHECK_THROWS_AS(final_word("?!"), ValidationError);
    CHECK_THROWS_AS(final_word(""), ValidationError);
    CHECK(normalize_word("'Don't'") == "don't");
}

TEST_CASE("lexicon parsing") {
    const auto p = write_tmp("plansite_lex_ok.txt",
                             ";;; comment line\n"
                             "NIGHT  N AY1 T\n"
                             "READ  R IY1 D\n"
                             "READ(1)  R EH1 D\n"
                             "\n");
    LoadReport rep;
    const auto lex = load_pronouncing_lexicon(p, &rep);
    CHECK(lex.size() == 2);
    CHECK(rep.entries == 2);
    CHECK(rep.pronunciations == 3);
    REQUIRE(lex.find("Night") != nullptr);
    CHECK(lex.find("night")->front() == Pronunciation{"N", "AY1", "T"});
    CHECK(lex.find("read")->size() == 2);
    CHECK(rhymes("read", "bed", PronunciationLexicon({{"read", {{"R", "IY1", "D"}, {"R", "EH1", "D"}}},
                                                      {"bed", {{"B", "EH1", "D"}}}})) == RhymeVerdict::rhyme);
    const auto keys = rhyme_key("read", lex);
    REQUIRE(keys.has_value());
    CHECK(keys->size() == 2);
}

TEST_CASE("malformed lexicon lines abort") {
    const auto p = write_tmp("plansite_lex_bad.txt", "NIGHT  N AY1 T\nBROKEN\n");
    CHECK_THROWS_AS(load_pronouncing_lexicon(p), ParseError);
    CHECK_THROWS_AS(load_pronouncing_lexicon("/nonexistent/cmudict"), IoError);
}

TEST_CASE("bundled lexicon is large") {
    CHECK(cmu().size() > 100000);
    CHECK(cmu().contains("fright"));
}
