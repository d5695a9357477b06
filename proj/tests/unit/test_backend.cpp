#include <algorithm>
#include <cmath>

#include <doctest.h>

#include "plansite/backend.hpp"
#include "plansite/common.hpp"

using namespace plansite;
using namespace plansite::backend;

namespace {

std::shared_ptr<Model> toy(const std::string& id) {
    static std::map<std::string, std::shared_ptr<Model>> cache;
    auto& m = cache[id];
    if (!m) m = load_model(id);
    return m;
}

double max_rel(const std::vector<float>& a, const std::vector<float>& b) {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num = std::max(num, static_cast<double>(std::abs(a[i] - b[i])));
        den = std::max(den, static_cast<double>(std::abs(b[i])));
    }
    return num / std::max(den, 1e-12);
}

std::vector<TokenId> prompt(const Model& m) {
    return m.tokenizer().encode("A rhyming couplet:\nThe hall was filled with silent dread,\nwhen suddenly they");
}

}  // namespace

TEST_CASE("registry") {
    const auto m = toy("toy-rhymer");
    CHECK(m->spec().layers == 6);
    CHECK(m->spec().family == "gpt2");
    CHECK_THROWS_AS(load_model("no-such-model"), ValidationError);
    const auto ids = catalog_ids();
    REQUIRE_FALSE(ids.empty());
    CHECK_THROWS_AS(load_model(ids.front()), UnsupportedError);
    CHECK(catalog_spec(ids.front()).has_value());
    CHECK(toy_rhymer_layout("toy-rhymer")->routing_heads.size() == 3);
    CHECK_FALSE(toy_rhymer_layout("toy-gpt2").has_value());
}

TEST_CASE("identity patch leaves logits unchanged") {
    for (const char* id : {"toy-rhymer", "toy-llama"}) {
        const auto m = toy(id);
        const auto toks = prompt(*m);
        std::vector<HookSite> sites;
        for (int l = 0; l < static_cast<int>(m->spec().layers); ++l) {
            sites.push_back(HookSite::residual(l, toks.size() - 3));
            sites.push_back(HookSite::mlp(l, 2));
            sites.push_back(HookSite::attn_head(l, toks.size() - 1, static_cast<int>(m->spec().heads) - 1));
        }
        const auto store = m->capture(toks, sites);
        PatchPlan plan;
        for (const auto& s : sites) plan.replace(s, store.at(s));
        CHECK(m->logits(toks, &plan) == m->logits(toks));
    }
}

TEST_CASE("final-layer residual substitution reproduces the donor distribution") {
    const auto m = toy("toy-rhymer");
    const auto clean = m->tokenizer().encode("A rhyming couplet:\nThe hall was filled with silent doom,\nwhen suddenly they");
    const auto donor = m->tokenizer().encode("A rhyming couplet:\nThe hall was filled with silent dread,\nwhen suddenly they");
    REQUIRE(clean.size() == donor.size());
    const int last = static_cast<int>(m->spec().layers) - 1;
    const std::size_t p = clean.size() - 1;
    const auto site = HookSite::residual(last, p);
    PatchPlan plan;
    plan.replace(site, m->capture(donor, std::vector<HookSite>{site}).at(site));
    CHECK(max_rel(m->logits(clean, &plan), m->logits(donor)) < 1e-4);
    CHECK(max_rel(m->logits(clean), m->logits(donor)) > 1e-3);
}

TEST_CASE("attention output is the sum of per-head projections") {
    for (const char* id : {"toy-gpt2", "toy-llama"}) {
        const auto m = toy(id);
        const auto& s = m->spec();
        const auto toks = prompt(*m);
        const int layer = 1;
        const std::size_t pos = toks.size() - 2;
        std::vector<HookSite> sites = {HookSite::attn_out(layer, pos)};
        for (int h = 0; h < static_cast<int>(s.heads); ++h) sites.push_back(HookSite::attn_head(layer, pos, h));
        const auto store = m->capture(toks, sites);
        const auto& lw = m->weights().layers[layer];
        std::vector<double> sum(s.hidden, 0.0);
        for (std::size_t r = 0; r < s.hidden; ++r) {
            if (!lw.bo.empty()) sum[r] = lw.bo[r];
            for (int h = 0; h < static_cast<int>(s.heads); ++h) {
                const auto& z = store.at(HookSite::attn_head(layer, pos, h));
                for (std::size_t d = 0; d < s.head_dim; ++d) {
                    sum[r] += static_cast<double>(lw.wo[r * s.attention_width + h * s.head_dim + d]) * z[d];
                }
            }
        }
        const auto& out = store.at(HookSite::attn_out(layer, pos));
        for (std::size_t r = 0; r < s.hidden; ++r) CHECK(out[r] == doctest::Approx(sum[r]).epsilon(1e-4).scale(1e-3));
    }
}

TEST_CASE("patching every head slice equals patching the attention output") {
    const auto m = toy("toy-llama");
    const auto clean = prompt(*m);
    auto donor = clean;
    donor[donor.size() - 4] = donor[3];
    const int layer = 2;
    const std::size_t pos = clean.size() - 1;
    std::vector<HookSite> sites = {HookSite::attn_out(layer, pos)};
    for (int h = 0; h < static_cast<int>(m->spec().heads); ++h) sites.push_back(HookSite::attn_head(layer, pos, h));
    const auto d = m->capture(donor, sites);
    PatchPlan heads;
    for (std::size_t i = 1; i < sites.size(); ++i) heads.replace(sites[i], d.at(sites[i]));
    PatchPlan whole;
    whole.replace(sites[0], d.at(sites[0]));
    CHECK(max_rel(m->logits(clean, &heads), m->logits(clean, &whole)) < 1e-4);
}

TEST_CASE("full forward matches incremental decoding") {
    const auto m = toy("toy-rhymer");
    const auto toks = prompt(*m);
    DecodeParams p;
    p.temperature = 0.0;
    p.max_new_tokens = 8;
    p.stop_at_newline = false;
    const auto g = m->generate(toks, p);
    REQUIRE(g.continuation.size() == 8);
    auto full = toks;
    full.insert(full.end(), g.continuation.begin(), g.continuation.end() - 1);
    ForwardOptions fo;
    fo.all_logits = true;
    const auto r = m->forward(full, fo);
    for (std::size_t i = 0; i < g.continuation.size(); ++i) {
        const auto& row = r.all[toks.size() - 1 + i];
        const auto lp = log_softmax(row);
        const auto arg = std::max_element(row.begin(), row.end()) - row.begin();
        CHECK(arg == g.continuation[i]);
        CHECK(lp[static_cast<std::size_t>(g.continuation[i])] == doctest::Approx(g.logprobs[i]).epsilon(1e-5));
    }
}

TEST_CASE("generation is reproducible for a seed") {
    const auto m = toy("toy-rhymer");
    const auto toks = prompt(*m);
    DecodeParams p;
    p.seed = 42;
    const auto a = m->generate(toks, p);
    const auto b = m->generate(toks, p);
    CHECK(a.continuation == b.continuation);
    const auto many = m->generate_many(toks, {p, p});
    CHECK(many[0].continuation == a.continuation);
    CHECK(many[1].continuation == a.continuation);
}

TEST_CASE("sample_token") {
    Rng rng(1);
    std::vector<float> ties = {1.0f, 3.0f, 3.0f, 0.0f};
    CHECK(sample_token(ties, 0.0, 1.0, rng) == 1);
    std::vector<float> peaked = {0.0f, 20.0f, 0.0f};
    for (int i = 0; i < 20; ++i) CHECK(sample_token(peaked, 1.0, 0.95, rng) == 1);
    std::vector<float> bad = {0.0f, NAN};
    CHECK(sample_token(bad, 1.0, 0.95, rng) == -1);
    // top_p small enough keeps only the best token
    std::vector<float> flat = {0.1f, 0.0f, 0.2f};
    for (int i = 0; i < 20; ++i) CHECK(sample_token(flat, 1.0, 1e-6, rng) == 2);
    std::vector<float> two = {0.0f, 0.0f};
    int zeros = 0;
    for (int i = 0; i < 2000; ++i) zeros += sample_token(two, 1.0, 1.0, rng) == 0;
    CHECK(zeros > 900);
    CHECK(zeros < 1100);
}

TEST_CASE("log_softmax normalizes") {
    std::vector<float> x = {1.0f, 2.0f, -3.0f, 0.5f};
    const auto lp = log_softmax(x);
    double s = 0.0;
    for (double v : lp) s += std::exp(v);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("patch plan validation") {
    const auto m = toy("toy-rhymer");
    const auto& s = m->spec();
    PatchPlan wrong_width;
    wrong_width.replace(HookSite::residual(0, 1), std::vector<float>(s.hidden + 1, 0.0f));
    CHECK_THROWS_AS(wrong_width.validate(s), ValidationError);
    PatchPlan dup;
    dup.zero(HookSite::mlp(0, 1)).zero(HookSite::mlp(0, 1));
    CHECK_THROWS_AS(dup.validate(s), ValidationError);
    PatchPlan nonfinite;
    std::vector<float> v(s.hidden, 0.0f);
    v[3] = INFINITY;
    nonfinite.add(HookSite::residual(1, 1), v, 1.0f);
    CHECK_THROWS_AS(nonfinite.validate(s), ValidationError);
    PatchPlan bad_layer;
    bad_layer.zero(HookSite::residual(static_cast<int>(s.layers), 1));
    CHECK_THROWS_AS(bad_layer.validate(s), RangeError);
    PatchPlan bad_head;
    bad_head.replace(HookSite::attn_head(0, 1, static_cast<int>(s.heads)), std::vector<float>(s.head_dim, 0.0f));
    CHECK_THROWS_AS(bad_head.validate(s), RangeError);
}

TEST_CASE("zero and add_scaled patches act on the residual") {
    const auto m = toy("toy-rhymer");
    const auto toks = prompt(*m);
    const auto site = HookSite::residual(2, toks.size() - 1);
    const auto before = m->capture(toks, std::vector<HookSite>{site}).at(site);
    std::vector<float> dir(before.size(), 0.0f);
    dir[0] = 1.0f;
    PatchPlan add;
    add.add(site, dir, 0.0f);
    CHECK(m->logits(toks, &add) == m->logits(toks));
    PatchPlan zero;
    zero.zero(site);
    CHECK(m->logits(toks, &zero) != m->logits(toks));
}

TEST_CASE("attention weights are causal distributions") {
    const auto m = toy("toy-gpt2");
    const auto toks = prompt(*m);
    const auto a = m->attention_weights(toks, 0, 1);
    CHECK(a.layers() == 2);
    for (int l = 0; l < 2; ++l) {
        for (std::size_t q = 0; q < toks.size(); ++q) {
            double s = 0.0;
            for (std::size_t k = 0; k < toks.size(); ++k) {
                if (k > q) CHECK(a.at(l, 0, q, k) == 0.0f);
                s += a.at(l, 0, q, k);
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
        }
    }
}

TEST_CASE("llm.c checkpoint round trip") {
    const auto m = toy("toy-gpt2");
    const auto p = std::filesystem::temp_directory_path() / "plansite_ckpt.bin";
    save_llmc_checkpoint(p, m->arch(), m->weights());
    const auto ck = load_llmc_checkpoint(p);
    CHECK(ck.arch.layers == m->arch().layers);
    CHECK(ck.weights.layers[0].wq == m->weights().layers[0].wq);
    CHECK(ck.weights.token_embedding.size() >= m->weights().token_embedding.size());
}
