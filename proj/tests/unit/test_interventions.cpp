#include <set>

#include <doctest.h>

#include "plansite/backend.hpp"
#include "plansite/common.hpp"
#include "plansite/corpus.hpp"
#include "plansite/interventions.hpp"

using namespace plansite;
using namespace plansite::interventions;
using corpus::RelPosition;

namespace {

struct Fixture {
    std::shared_ptr<backend::Model> model = backend::load_model("toy-rhymer");
    phonology::PronunciationLexicon lex = phonology::load_pronouncing_lexicon(data_dir() + "/cmudict-0.7b");
    std::vector<corpus::PromptPair> pairs;

    Fixture() {
        pairs = corpus::build_prompt_pairs(corpus::load_prompt_pair_specs(data_dir() + "/prompt_pairs.jsonl"),
                                           model->tokenizer(), lex)
                    .pairs;
    }
};

const Fixture& fx() {
    static const Fixture f;
    return f;
}

RunOptions small_opts(SeedPolicy policy = SeedPolicy::per_cell) {
    RunOptions o;
    o.samples = 3;
    o.seed = 5;
    o.seed_policy = policy;
    o.bootstrap.resamples = 500;
    return o;
}

void same_outcome(const CellResult& a, const CellResult& b) {
    REQUIRE(a.pairs.size() == b.pairs.size());
    for (std::size_t i = 0; i < a.pairs.size(); ++i) CHECK(a.pairs[i] == b.pairs[i]);
    CHECK(a.rate == b.rate);
}

}  // namespace

TEST_CASE("completed line") {
    CHECK(completed_line("when suddenly they", " heard a creaking bed.\nA new") == "when suddenly they heard a creaking bed.");
    CHECK(completed_line("", " no newline") == " no newline");
}

TEST_CASE("scoring against the corrupt word") {
    const auto& lex = fx().lex;
    const auto r = corrupt_rhyme_rate({"when suddenly they heard a creaking bed.", "when suddenly they saw the room.",
                                       "when suddenly they", "when suddenly they saw a zzyzxqq"},
                                      "dread", "doom", lex);
    CHECK(r.total == 4);
    CHECK(r.successes == 1);
    CHECK(r.clean_rhymes == 1);
    CHECK(r.verdicts[0].success);
    CHECK(r.verdicts[1].clean_rhyme);
    CHECK(r.verdicts[2].final_word == "they");
    CHECK(r.verdicts[3].unknown);
    CHECK(r.unknowns == 1);
    CHECK(r.rate() == doctest::Approx(0.25));
}

TEST_CASE("sample seeds") {
    CHECK(sample_seed(SeedPolicy::shared, 10, "a", "x", 3) == 13);
    CHECK(sample_seed(SeedPolicy::shared, 10, "b", "y", 3) == 13);
    std::set<std::uint64_t> seen;
    for (const char* pair : {"a", "b"}) {
        for (const char* cell : {"clean", "L0@0", "L1@0"}) {
            for (std::size_t s = 0; s < 20; ++s) seen.insert(sample_seed(SeedPolicy::per_cell, 10, pair, cell, s));
        }
    }
    CHECK(seen.size() == 120);
    CHECK(sample_seed(SeedPolicy::per_cell, 10, "a", "x", 1) == sample_seed(SeedPolicy::per_cell, 10, "a", "x", 1));
    CHECK(seed_policy_from_string("shared") == SeedPolicy::shared);
    CHECK_THROWS(seed_policy_from_string("bogus"));
}

TEST_CASE("site keys") {
    CHECK(sites_key({}) == "clean");
    SiteSpec a{2, RelPosition::at(0)};
    SiteSpec b{3, RelPosition::last_word_site(), backend::Component::attention_head, 1};
    CHECK(sites_key({a, b}) == a.key() + "+" + b.key());
    CHECK(a.key() != b.key());
    CHECK(patch_cell_key({a}, PatchSource::corrupt) == sites_key({a}));
    CHECK(patch_cell_key({a}, PatchSource::zero) == "baseline_zero:" + sites_key({a}));
    const nlohmann::json j = b;
    CHECK(j.get<SiteSpec>() == b);
}

TEST_CASE("site resolution and alignment") {
    const auto& p = fx().pairs.front();
    SiteSpec s{1, RelPosition::last_word_site()};
    const auto h = s.resolve(p.clean_map);
    CHECK(h.position == p.clean_map.last_word_index);
    CHECK(h.layer == 1);
    CHECK_NOTHROW(check_aligned(p, {s}));
    auto bad = p;
    bad.corrupt_map.newline_index += 1;
    CHECK_THROWS_AS(check_aligned(bad, {SiteSpec{1, RelPosition::at(0)}}), ValidationError);
}

TEST_CASE("an empty patch plan reproduces the clean run") {
    const auto& f = fx();
    for (auto policy : {SeedPolicy::per_cell, SeedPolicy::shared}) {
        const auto opts = small_opts(policy);
        const auto clean = clean_cell(*f.model, f.pairs, opts, f.lex);
        const auto empty = run_patch_cell(*f.model, f.pairs, {}, opts, f.lex);
        same_outcome(clean, empty);
        CHECK(clean.transcripts == empty.transcripts);
    }
}

TEST_CASE("patch cells are deterministic and carry their condition") {
    const auto& f = fx();
    const auto opts = small_opts();
    const std::vector<SiteSpec> sites = {SiteSpec{1, RelPosition::last_word_site()}};
    const auto a = run_patch_cell(*f.model, f.pairs, sites, opts, f.lex);
    const auto b = run_patch_cell(*f.model, f.pairs, sites, opts, f.lex);
    same_outcome(a, b);
    CHECK(a.interval == b.interval);
    CHECK(a.total() == f.pairs.size() * opts.samples);
    CHECK(a.interval.contains(a.rate));
    const nlohmann::json j = a;
    const auto back = j.get<CellResult>();
    same_outcome(a, back);
    // last-word patching at an early layer moves the rhyme
    CHECK(a.rate > 0.5);
    CHECK(clean_cell(*f.model, f.pairs, opts, f.lex).rate < 0.2);
}

TEST_CASE("run options JSON") {
    auto o = small_opts(SeedPolicy::shared);
    o.decode.temperature = 0.7;
    const nlohmann::json j = o;
    const auto back = j.get<RunOptions>();
    CHECK(back.samples == o.samples);
    CHECK(back.seed_policy == SeedPolicy::shared);
    CHECK(back.decode.temperature == doctest::Approx(0.7));
    CHECK(back.bootstrap.resamples == 500);
}

TEST_CASE("samples must be positive") {
    const auto& f = fx();
    auto opts = small_opts();
    opts.samples = 0;
    CHECK_THROWS_AS(clean_cell(*f.model, f.pairs, opts, f.lex), ValidationError);
}

TEST_CASE("sweep ids and layout") {
    CHECK(sweep_cell_id("patch_sweep", RelPosition::at(0), 3) == "patch_sweep/i=0/L3");
    CHECK(sweep_cell_id("patch_sweep", RelPosition::last_word_site(), 0) == "patch_sweep/last_word/L0");
    const auto& f = fx();
    auto opts = small_opts();
    opts.samples = 1;
    const auto s = layer_position_sweep(*f.model, f.pairs, {RelPosition::at(0)}, {0, 4}, opts, f.lex);
    REQUIRE(s.cells.size() == 2);
    CHECK(s.cell(0, 1).cell_id == "patch_sweep/i=0/L4");
    CHECK(s.failures.empty());
}

TEST_CASE("steering with alpha 0 or v(s->s) leaves generation unchanged") {
    const auto& f = fx();
    const auto couplets = corpus::load_couplets(data_dir() + "/couplets.jsonl", f.lex).couplets;
    const auto schemes = build_schemes(couplets, f.model->tokenizer(), f.lex, 2, 4, 2);
    REQUIRE(schemes.size() == 2);
    for (const auto& s : schemes) {
        CHECK(s.fit.size() == 4);
        CHECK(s.heldout.size() == 2);
    }
    const std::vector<RelPosition> positions = {RelPosition::at(0)};
    const auto means = fit_scheme_means(*f.model, schemes, positions, {3});
    const auto v = means.vector(0, 1, 0, 0);
    CHECK(v.vector.size() == f.model->spec().hidden);

    const auto opts = small_opts(SeedPolicy::shared);
    // Reference: unsteered generations under the same shared seeds.
    auto direct = [&](const Scheme& src, const std::string& target) {
        std::size_t hits = 0;
        for (const auto& p : src.heldout) {
            std::vector<backend::DecodeParams> params(opts.samples, opts.decode);
            for (std::size_t i = 0; i < opts.samples; ++i) params[i].seed = sample_seed(opts.seed_policy, opts.seed, "", "", i);
            std::vector<std::string> lines;
            for (const auto& g : f.model->generate_many(p.tokens, params)) lines.push_back(completed_line("", g.text));
            hits += corrupt_rhyme_rate(lines, target, src.word, f.lex).successes;
        }
        return hits;
    };

    const auto zero = steer_cell(*f.model, schemes, means, 0, 0, 0.0, opts, f.lex, 0, "steer/0/L3", {});
    REQUIRE(zero.pairs.size() == 2);
    CHECK(zero.pairs[0].n_success == direct(schemes[0], schemes[1].word));
    CHECK(zero.pairs[1].n_success == direct(schemes[1], schemes[0].word));

    // Two copies of the same scheme: v(s->s) is exactly zero.
    std::vector<Scheme> twins = {schemes[0], schemes[0]};
    twins[1].name += "'";
    SchemeMeans tm = means;
    tm.schemes = {twins[0].name, twins[1].name};
    tm.means = {means.means[0], means.means[0]};
    tm.counts = {means.counts[0], means.counts[0]};
    for (float x : tm.vector(0, 1, 0, 0).vector) CHECK(x == 0.0f);
    const auto self = steer_cell(*f.model, twins, tm, 0, 0, 4.0, opts, f.lex, 1, "steer/self", {});
    REQUIRE(self.pairs.size() == 1);
    CHECK(self.pairs[0].n_success == direct(schemes[0], schemes[0].word));
}
