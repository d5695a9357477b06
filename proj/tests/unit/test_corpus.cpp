#include <filesystem>
#include <fstream>
#include <set>
#include <thread>

#include <doctest.h>
#include <httplib.h>

#include "plansite/common.hpp"
#include "plansite/corpus.hpp"

using namespace plansite;
using namespace plansite::corpus;

namespace {

const phonology::PronunciationLexicon& cmu() {
    static const auto lex = phonology::load_pronouncing_lexicon(data_dir() + "/cmudict-0.7b");
    return lex;
}

std::shared_ptr<WordTokenizer> toy_tokenizer(bool fused = false) {
    return WordTokenizer::from_vocab_file(data_dir() + "/toy_vocab.txt", fused);
}

std::filesystem::path tmp_file(const std::string& name, const std::string& body) {
    const auto p = std::filesystem::temp_directory_path() / name;
    std::ofstream(p) << body;
    return p;
}

}  // namespace

TEST_CASE("position map on a plain tokenizer") {
    WordTokenizer t({"the", "hall", "was", "dread", "when", "sky"}, false);
    const auto ids = t.encode("The hall was dread,\nwhen the sky");
    const auto m = resolve_positions(ids, t);
    CHECK(t.token_text(ids[m.newline_index]) == "\n");
    CHECK(t.token_text(ids[m.last_word_index]) == " dread");
    CHECK(m.last_word_rel == -2);
    CHECK_FALSE(m.comma_newline_fused);
    CHECK(m.absolute(0) == m.newline_index);
    CHECK(m.absolute(3) == m.newline_index + 3);
    CHECK(m.relative(m.last_word_index) == -2);
    CHECK_THROWS_AS(m.absolute(-100), RangeError);
}

TEST_CASE("comma-newline fusion moves the last word to -1") {
    WordTokenizer t({"the", "hall", "was", "dread", "when"}, true);
    const auto ids = t.encode("The hall was dread,\nwhen");
    const auto m = resolve_positions(ids, t);
    CHECK(m.comma_newline_fused);
    CHECK(m.last_word_rel == -1);
}

TEST_CASE("multi-token last words resolve to their first token") {
    WordTokenizer t({"the", "hall", "was", "when"}, false);
    const auto ids = t.encode("The hall was zorp,\nwhen");
    const auto m = resolve_positions(ids, t);
    CHECK(m.multi_token_word);
    CHECK(m.last_word_tokens == 4);
    CHECK(t.token_text(ids[m.last_word_index]) == " z");
    WordTokenizer u({"a"}, false);
    CHECK_THROWS_AS(resolve_positions(u.encode("a a a"), u), ValidationError);
}

TEST_CASE("relative position specs") {
    CHECK(RelPosition::parse("last_word") == RelPosition::last_word_site());
    CHECK(RelPosition::parse(-1) == RelPosition::at(-1));
    CHECK(RelPosition::parse(RelPosition::at(2).to_json()) == RelPosition::at(2));
    CHECK(RelPosition::parse(RelPosition::last_word_site().to_json()) == RelPosition::last_word_site());
    PositionMap m;
    m.newline_index = 9;
    m.last_word_rel = -2;
    CHECK(RelPosition::last_word_site().resolve(m) == -2);
    CHECK(RelPosition::at(1).resolve(m) == 1);
}

TEST_CASE("bundled prompt pairs") {
    const auto specs = load_prompt_pair_specs(data_dir() + "/prompt_pairs.jsonl");
    REQUIRE(specs.size() == 5);
    const auto tok = toy_tokenizer();
    const auto built = build_prompt_pairs(specs, *tok, cmu());
    CHECK(built.rejected.empty());
    REQUIRE(built.pairs.size() == 5);
    for (const auto& p : built.pairs) {
        CHECK(p.clean_tokens.size() == p.corrupt_tokens.size());
        CHECK(p.clean_map.newline_index == p.corrupt_map.newline_index);
        CHECK(p.clean_tokens[p.clean_map.last_word_index] != p.corrupt_tokens[p.corrupt_map.last_word_index]);
        CHECK(phonology::rhymes(p.clean_word, p.corrupt_word, cmu()) == phonology::RhymeVerdict::no_rhyme);
        CHECK(p.clean_prompt.find('\n' + p.line2_prefix()) != std::string::npos);
    }
}

TEST_CASE("prompt pairs whose words rhyme are rejected") {
    std::vector<PromptPairSpec> specs = {
        {"ok", "A rhyming couplet:\nThe hall was filled with silent {word},\nwhen suddenly they", "doom", "dread"},
        {"rhymes", "A rhyming couplet:\nShe wandered home alone into the {word},\nand then she", "night", "light"},
    };
    const auto built = build_prompt_pairs(specs, *toy_tokenizer(), cmu());
    CHECK(built.pairs.size() == 1);
    REQUIRE(built.rejected.size() == 1);
    CHECK(built.rejected[0].record_id == "rhymes");
}

TEST_CASE("bundled couplets load cleanly") {
    const auto r = load_couplets(data_dir() + "/couplets.jsonl", cmu());
    CHECK(r.rejected.empty());
    CHECK(r.couplets.size() == 1200);
    CHECK(r.train + r.validation == 1200);
    CHECK(r.validation > 0);
    std::set<std::string> ids;
    for (const auto& c : r.couplets) ids.insert(c.id);
    CHECK(ids.size() == r.couplets.size());
}

TEST_CASE("couplet invariants") {
    Couplet c{"x", "The hall was filled with fright,", "and then we saw the night.", "fright", "night", "t", "train"};
    CHECK_FALSE(couplet_violation(c, cmu(), phonology::IdenticalWordPolicy::count_identical));
    Couplet bad = c;
    bad.line2 = "and then we found a toy.";
    bad.r2 = "toy";
    CHECK(*couplet_violation(bad, cmu(), phonology::IdenticalWordPolicy::count_identical) == "r1 and r2 do not rhyme");
    bad = c;
    bad.r1 = "hall";
    CHECK(couplet_violation(bad, cmu(), phonology::IdenticalWordPolicy::count_identical).has_value());
    bad = c;
    bad.split = "test";
    CHECK(couplet_violation(bad, cmu(), phonology::IdenticalWordPolicy::count_identical).has_value());
    Couplet same{"y", "we sang all night,", "we sang all night.", "night", "night", "t", "train"};
    CHECK_FALSE(couplet_violation(same, cmu(), phonology::IdenticalWordPolicy::count_identical));
    CHECK(couplet_violation(same, cmu(), phonology::IdenticalWordPolicy::exclude_identical).has_value());
}

TEST_CASE("loader rejects over the threshold and lists rejects below it") {
    std::string body;
    for (int i = 0; i < 19; ++i) {
        body += R"({"id": "g)" + std::to_string(i) +
                R"(", "line1": "a fright,", "line2": "the night.", "r1": "fright", "r2": "night", "split": "train", "topic": "t"})" "\n";
    }
    body += R"({"id": "bad", "line1": "a fright,", "line2": "a toy.", "r1": "fright", "r2": "toy", "split": "train", "topic": "t"})" "\n";
    const auto r = load_couplets(tmp_file("plansite_couplets_ok.jsonl", body), cmu());
    CHECK(r.couplets.size() == 19);
    REQUIRE(r.rejected.size() == 1);
    CHECK(r.rejected[0].record_id == "bad");

    body += "not json\nnot json either\n";
    CHECK_THROWS_AS(load_couplets(tmp_file("plansite_couplets_bad.jsonl", body), cmu()), ValidationError);
}

TEST_CASE("couplet save/load round trip") {
    std::vector<Couplet> cs = {{"a", "we met in fright,", "beneath the night.", "fright", "night", "sea", "train"},
                               {"b", "it filled with pain,", "beneath the rain.", "pain", "rain", "sea", "validation"}};
    const auto p = std::filesystem::temp_directory_path() / "plansite_roundtrip.jsonl";
    save_couplets(p, cs);
    const auto r = load_couplets(p, cmu());
    CHECK(r.couplets == cs);
}

TEST_CASE("truncation prompt drops the second line") {
    Couplet c{"x", "The hall was filled with fright,", "and then we saw the night.", "fright", "night", "t", "train"};
    const auto p = truncation_prompt(c);
    CHECK(p == "A rhyming couplet:\nThe hall was filled with fright,\n");
    CHECK(p.find("night") == std::string::npos);
}

TEST_CASE("general text sampling") {
    const auto tok = toy_tokenizer();
    const auto s = sample_general_text(data_dir() + "/general_corpus.jsonl", *tok, 120, {8, 32}, 7);
    REQUIRE(s.size() == 120);
    std::size_t val = 0;
    std::set<std::string> docs;
    for (const auto& g : s) {
        CHECK(g.tokens.size() >= 8);
        CHECK(g.tokens.size() <= 32);
        val += g.split == "validation";
        docs.insert(g.doc_id);
    }
    CHECK(val == 20);
    CHECK(docs.size() == 120);
    const auto again = sample_general_text(data_dir() + "/general_corpus.jsonl", *tok, 120, {8, 32}, 7);
    for (std::size_t i = 0; i < s.size(); ++i) CHECK(again[i].tokens == s[i].tokens);
    const auto odd = sample_general_text(data_dir() + "/general_corpus.jsonl", *tok, 10, {8, 32}, 7);
    CHECK(std::count_if(odd.begin(), odd.end(), [](const auto& g) { return g.split == "validation"; }) == 2);
}

TEST_CASE("couplet synthesis through a fixture provider") {
    FixtureProvider p(std::vector<std::string>{
        "The hall was filled with fright,\nand then we saw the night.",
        "just one line",
        "The sea was full of joy,\nwe watched a broken fear.",
        "It rained on us in pain,\nwe walked home in the rain.",
    });
    SynthesisSpec spec;
    spec.count = 2;
    spec.topics = {"sea", "sky"};
    const auto rep = synthesize_couplets(p, spec, cmu());
    CHECK(rep.couplets.size() == 2);
    CHECK(rep.attempts == 4);
    CHECK(rep.rejected.size() == 2);
    CHECK(rep.couplets[0].r1 == "fright");
    CHECK(rep.couplets[1].r2 == "rain");
    CHECK(p.prompts()[1] == synthesis_prompt("sky"));

    FixtureProvider bad(std::vector<std::string>{"nope", "nope", "nope"});
    spec.count = 1;
    spec.max_attempts = 3;
    CHECK_THROWS_AS(synthesize_couplets(bad, spec, cmu()), ValidationError);
}

TEST_CASE("couplet synthesis over HTTP") {
    httplib::Server srv;
    std::string seen_auth;
    srv.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        seen_auth = req.get_header_value("Authorization");
        const auto body = nlohmann::json::parse(req.body);
        CHECK(body.at("messages").at(0).at("content").get<std::string>().find("couplet") != std::string::npos);
        nlohmann::json out;
        out["choices"] = nlohmann::json::array(
            {{{"message", {{"content", "The hall was filled with fright,\nand then we saw the night."}}}}});
        res.set_content(out.dump(), "application/json");
    });
    const int port = srv.bind_to_any_port("127.0.0.1");
    std::thread th([&] { srv.listen_after_bind(); });
    srv.wait_until_ready();
    ::setenv("PLANSITE_TEST_KEY", "sekret", 1);
    HttpProvider::Options o;
    o.port = port;
    o.api_key_env = "PLANSITE_TEST_KEY";
    HttpProvider prov(o);
    SynthesisSpec spec;
    spec.count = 1;
    const auto rep = synthesize_couplets(prov, spec, cmu());
    srv.stop();
    th.join();
    CHECK(rep.couplets.size() == 1);
    CHECK(seen_auth == "Bearer sekret");

    HttpProvider::Options dead;
    dead.port = port;
    dead.timeout_seconds = 1;
    HttpProvider gone(dead);
    CHECK_THROWS_AS(gone.complete("x"), IoError);
}
