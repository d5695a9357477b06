#include <algorithm>
#include <set>

#include <doctest.h>

#include "plansite/backend.hpp"
#include "plansite/circuits.hpp"
#include "plansite/common.hpp"

using namespace plansite;
using namespace plansite::circuits;
using corpus::RelPosition;

namespace {

struct Fixture {
    std::shared_ptr<backend::Model> model;
    phonology::PronunciationLexicon lex = phonology::load_pronouncing_lexicon(data_dir() + "/cmudict-0.7b");
    std::vector<corpus::PromptPair> pairs;

    explicit Fixture(const std::string& id) : model(backend::load_model(id)) {
        pairs = corpus::build_prompt_pairs(corpus::load_prompt_pair_specs(data_dir() + "/prompt_pairs.jsonl"),
                                           model->tokenizer(), lex)
                    .pairs;
    }
};

const Fixture& fx() {
    static const Fixture f("toy-rhymer");
    return f;
}

interventions::RunOptions small_opts() {
    interventions::RunOptions o;
    o.samples = 3;
    o.seed = 9;
    o.bootstrap.resamples = 500;
    return o;
}

}  // namespace

TEST_CASE("attention ranking recovers the planted routing heads") {
    const auto& f = fx();
    const auto layout = backend::toy_rhymer_layout("toy-rhymer");
    REQUIRE(layout.has_value());
    const int last = static_cast<int>(f.model->spec().layers) - 1;
    const auto r = rank_heads(*f.model, f.pairs, 0, last);
    CHECK(r.order.size() == f.model->spec().layers * f.model->spec().heads);
    std::set<std::pair<int, int>> top;
    for (const auto& h : r.top(3)) top.insert({h.layer, h.head});
    std::set<std::pair<int, int>> planted(layout->routing_heads.begin(), layout->routing_heads.end());
    CHECK(top == planted);
    for (std::size_t i = 1; i < r.order.size(); ++i) CHECK(r.order[i - 1].score >= r.order[i].score);
    for (const auto& h : r.order) {
        CHECK(h.score >= 0.0);
        CHECK(h.score <= 1.0);
        CHECK(r.score(h.layer, h.head) == h.score);
    }
    const nlohmann::json j = r;
    CHECK(j.get<HeadRanking>().top(5) == r.top(5));
}

TEST_CASE("head sets") {
    const auto& f = fx();
    const auto r = rank_heads(*f.model, f.pairs, 1, 4);
    const auto t = topk_set(r, 3);
    CHECK(t.heads == r.top(3));
    CHECK(topk_set(r, 0).heads.empty());
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto c = control_head_set(r, 3, HeadSetKind::random, seed, f.model->spec());
        REQUIRE(c.heads.size() == 3);
        std::set<HeadRef> uniq(c.heads.begin(), c.heads.end());
        CHECK(uniq.size() == 3);
        for (const auto& h : c.heads) {
            CHECK(std::find(t.heads.begin(), t.heads.end(), h) == t.heads.end());
            CHECK(h.layer >= 1);
            CHECK(h.layer <= 4);
        }
    }
    CHECK(control_head_set(r, 3, HeadSetKind::random, 4, f.model->spec()).heads ==
          control_head_set(r, 3, HeadSetKind::random, 4, f.model->spec()).heads);
    CHECK_THROWS_AS(control_head_set(r, 3, HeadSetKind::comma, 0, f.model->spec()), UnsupportedError);
    const auto comma = rank_heads_to_comma(*f.model, f.pairs, 1, 4);
    CHECK(control_head_set(r, 2, HeadSetKind::comma, 0, f.model->spec(), &comma).heads == comma.top(2));
}

TEST_CASE("comma ranking is unsupported when comma and newline share a token") {
    static const Fixture fused("toy-rhymer-fused");
    CHECK(fused.model->tokenizer().fuses_comma_newline());
    CHECK_THROWS_AS(rank_heads_to_comma(*fused.model, fused.pairs, 0, 2), UnsupportedError);
}

TEST_CASE("path patching with an empty head set is the clean run") {
    const auto& f = fx();
    const auto opts = small_opts();
    const auto clean = interventions::clean_cell(*f.model, f.pairs, opts, f.lex);
    const auto empty = path_patch_cell(*f.model, f.pairs, HeadSet{}, PathOptions{}, opts, f.lex, "path/k=0", {});
    REQUIRE(clean.pairs.size() == empty.pairs.size());
    for (std::size_t i = 0; i < clean.pairs.size(); ++i) CHECK(clean.pairs[i] == empty.pairs[i]);
    const auto heads = head_set_patch(*f.model, f.pairs, {HeadSet{}}, RelPosition::at(0), opts, f.lex);
    REQUIRE(heads.cells.size() == 1);
    for (std::size_t i = 0; i < clean.pairs.size(); ++i) CHECK(clean.pairs[i] == heads.cells[0].pairs[i]);
}

TEST_CASE("planted heads carry the rhyme and random controls do not") {
    const auto& f = fx();
    const auto opts = small_opts();
    const auto r = rank_heads(*f.model, f.pairs, 0, 5);
    const auto res = topk_head_patch(*f.model, f.pairs, r, {3}, RelPosition::at(0), opts, f.lex);
    REQUIRE(res.cells.size() == 1);
    CHECK(res.cells[0].rate > 0.8);
    const auto ctrl = control_head_set(r, 3, HeadSetKind::random, 1, f.model->spec());
    const auto c = head_set_patch(*f.model, f.pairs, {ctrl}, RelPosition::at(0), opts, f.lex);
    CHECK(c.cells[0].rate < 0.2);
    const auto path = two_stage_path_patch(*f.model, f.pairs, {topk_set(r, 3)}, PathOptions{}, opts, f.lex);
    CHECK(path.cells[0].rate > 0.8);
    CHECK(head_sites(topk_set(r, 3), RelPosition::at(0)).size() == 3);
}

TEST_CASE("MLP layer ranking") {
    const auto& f = fx();
    const auto ranking = rank_mlp_layers(*f.model, f.pairs, RelPosition::at(0));
    CHECK(ranking.size() == f.model->spec().layers);
    for (std::size_t i = 1; i < ranking.size(); ++i) CHECK(ranking[i - 1].score >= ranking[i].score);
    for (const auto& l : ranking) CHECK(l.score >= 0.0);
}

TEST_CASE("enum strings") {
    CHECK(head_set_kind_from_string(to_string(HeadSetKind::comma)) == HeadSetKind::comma);
    CHECK(stage1_mode_from_string(to_string(Stage1Mode::single_layer)) == Stage1Mode::single_layer);
    PathOptions o;
    o.mode = Stage1Mode::single_layer;
    o.stage1_layer = 2;
    const nlohmann::json j = o;
    const auto back = j.get<PathOptions>();
    CHECK(back.mode == Stage1Mode::single_layer);
    CHECK(back.stage1_layer == 2);
    CHECK(back.source == RelPosition::last_word_site());
}
