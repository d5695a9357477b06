#include <cmath>
#include <map>

#include <doctest.h>

#include "plansite/common.hpp"
#include "plansite/probing.hpp"
#include "plansite/random.hpp"

using namespace plansite;
using namespace plansite::probing;

namespace {

// Three well separated Gaussian blobs labelled with token ids 2, 5, 7.
ProbeDataset blobs(std::size_t per_class, std::uint64_t seed) {
    ProbeDataset ds;
    ds.axis = "synthetic";
    ds.width = 6;
    Rng rng(seed);
    const TokenId labels[] = {2, 5, 7};
    for (std::size_t i = 0; i < per_class * 3; ++i) {
        ProbeExample e;
        e.label = labels[i % 3];
        e.h.assign(ds.width, 0.0f);
        for (auto& x : e.h) x = static_cast<float>(0.3 * rng.normal());
        e.h[i % 3] += 3.0f;
        e.record_id = "r" + std::to_string(i);
        e.split = (i / 3) % 5 == 0 ? "validation" : "train";
        ds.examples.push_back(std::move(e));
    }
    return ds;
}

ProbeHyperparams fast() {
    ProbeHyperparams h;
    h.lr = 1e-2;
    h.epochs = 5;
    h.seed = 3;
    return h;
}

}  // namespace

TEST_CASE("probe learns separable data") {
    const auto ds = blobs(60, 1);
    const auto p = train_probe(ds, fast(), 10);
    CHECK(p.labels == std::vector<TokenId>{2, 5, 7});
    CHECK(p.epochs_completed == 5);
    CHECK(p.loss_history.size() == 5);
    CHECK(p.loss_history.back() < p.loss_history.front());
    const auto ev = evaluate_probe(p, ds, nullptr, nullptr);
    CHECK(ev.n == ds.count("validation"));
    CHECK(ev.top1.point > 0.95);
    CHECK(ev.top5.point >= ev.top1.point);
}

TEST_CASE("training is deterministic for a seed") {
    const auto ds = blobs(20, 2);
    const auto a = train_probe(ds, fast(), 10);
    const auto b = train_probe(ds, fast(), 10);
    CHECK(a.W == b.W);
    CHECK(a.b == b.b);
    auto h = fast();
    h.seed = 4;
    CHECK(train_probe(ds, h, 10).W != a.W);
}

TEST_CASE("zero epochs leaves the initialization") {
    const auto ds = blobs(10, 3);
    auto h = fast();
    h.epochs = 0;
    const auto p = train_probe(ds, h, 10);
    CHECK(p.epochs_completed == 0);
    CHECK(p.loss_history.empty());
    CHECK(p.W.size() == 3 * ds.width);
}

TEST_CASE("label space options") {
    const auto ds = blobs(10, 4);
    auto h = fast();
    h.epochs = 1;
    h.label_space = LabelSpace::full;
    CHECK(train_probe(ds, h, 10).labels.size() == 10);
    h.label_space = LabelSpace::observed;
    h.max_labels = 2;
    CHECK(train_probe(ds, h, 10).labels.size() == 2);
    CHECK_THROWS_AS(train_probe(ds, h, 6), RangeError);
    h.batch_size = 0;
    CHECK_THROWS_AS(train_probe(ds, h, 10), ValidationError);
}

TEST_CASE("apply is a distribution and ranking breaks ties by token id") {
    LinearProbe p;
    p.width = 2;
    p.labels = {1, 4, 9};
    p.W.assign(6, 0.0f);
    p.b = {0.0f, 0.0f, 0.0f};
    const std::vector<float> h = {0.5f, -1.0f};
    const auto probs = p.apply(h);
    double s = 0.0;
    for (double x : probs) s += x;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p.ranked(h, 5) == std::vector<TokenId>{1, 4, 9});
    p.b = {0.0f, 1.0f, 1.0f};
    CHECK(p.ranked(h, 2) == std::vector<TokenId>{4, 9});
    const auto ds = blobs(30, 5);
    const auto t = train_probe(ds, fast(), 10);
    for (const auto& e : ds.examples) {
        double z = 0.0;
        for (double x : t.apply(e.h)) z += x;
        CHECK(z == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("probe checkpoints round trip") {
    const auto p = train_probe(blobs(10, 6), fast(), 10);
    const auto path = std::filesystem::temp_directory_path() / "plansite_probe.json";
    save_probe(path, p);
    const auto q = load_probe(path);
    CHECK(q.W == p.W);
    CHECK(q.b == p.b);
    CHECK(q.labels == p.labels);
    CHECK(q.hyper.lr == p.hyper.lr);
}

TEST_CASE("evaluation refuses the training split by default") {
    const auto ds = blobs(10, 7);
    const auto p = train_probe(ds, fast(), 10);
    CHECK_THROWS_AS(evaluate_probe(p, ds, nullptr, nullptr, {}, "train"), ValidationError);
    EvalOptions o;
    o.allow_train_split = true;
    CHECK(evaluate_probe(p, ds, nullptr, nullptr, o, "train").n == ds.count("train"));
}

TEST_CASE("unigram baseline top-1 is the modal frequency") {
    std::vector<std::vector<TokenId>> comps = {{3, 3, 8, 1}, {8, 3, 2}, {9, 3, 8, 8, 3}};
    const auto u = build_unigram(comps);
    CHECK(u.total == 12);
    CHECK(u.top(2) == std::vector<TokenId>{3, 8});
    CHECK(u.frequency(3) == doctest::Approx(5.0 / 12.0).epsilon(1e-15));
    ProbeDataset ds;
    ds.width = 1;
    for (const auto& c : comps) {
        for (TokenId t : c) ds.examples.push_back({{0.0f}, t, "x", "validation", ""});
    }
    const auto ev = unigram_eval(u, ds, nullptr, nullptr);
    CHECK(std::abs(ev.top1.point - 5.0 / 12.0) < 1e-9);
    CHECK(ev.top5.point == doctest::Approx(1.0));
    // ties resolve to the lower token id
    const auto tie = build_unigram({{4, 2, 4, 2}});
    CHECK(tie.top(1) == std::vector<TokenId>{2});
    CHECK_THROWS_AS(build_unigram({{}}), ValidationError);
}

TEST_CASE("rhyme accuracy is at least top-1 under count_identical") {
    WordTokenizer tok({"night", "light", "fear", "joy", "bed"}, false);
    const auto lex = phonology::load_pronouncing_lexicon(data_dir() + "/cmudict-0.7b");
    ProbeDataset ds;
    ds.width = 1;
    auto id = [&](const char* w) { return tok.lookup(std::string(" ") + w); };
    // r1 "fright" but the model wrote "joy": a correct prediction still counts.
    ds.examples.push_back({{0.0f}, id("joy"), "a", "validation", "fright"});
    ds.examples.push_back({{0.0f}, id("night"), "b", "validation", "fright"});
    ds.examples.push_back({{0.0f}, id("fear"), "c", "validation", "fright"});
    std::map<std::string, std::vector<TokenId>> preds = {{"a", {id("joy"), id("bed")}},
                                                         {"b", {id("light"), id("night")}},
                                                         {"c", {id("bed"), id("fear")}}};
    const auto ev = evaluate_predictions(ds, "validation", [&](const ProbeExample& e) { return preds.at(e.record_id); },
                                         &tok, &lex, {});
    CHECK(ev.top1.point == doctest::Approx(1.0 / 3.0));
    CHECK(ev.top5.point == doctest::Approx(1.0));
    CHECK(ev.rhyme.point == doctest::Approx(2.0 / 3.0));
    CHECK(ev.rhyme5.point == doctest::Approx(1.0));
    CHECK(ev.rhyme.point >= ev.top1.point);
    EvalOptions ex;
    ex.policy = phonology::IdenticalWordPolicy::exclude_identical;
    const auto strict = evaluate_predictions(ds, "validation", [&](const ProbeExample& e) { return preds.at(e.record_id); },
                                             &tok, &lex, ex);
    CHECK(strict.rhyme.point == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("Wilson interval on a 200-example eval") {
    ProbeDataset ds;
    ds.width = 1;
    for (int i = 0; i < 200; ++i) ds.examples.push_back({{0.0f}, i % 2, "r" + std::to_string(i), "validation", ""});
    const auto ev = evaluate_predictions(ds, "validation", [](const ProbeExample&) { return std::vector<TokenId>{0}; },
                                         nullptr, nullptr, {});
    CHECK(ev.top1.point == doctest::Approx(0.5));
    CHECK(ev.top1.half_width() == doctest::Approx(0.069).epsilon(0.01));
}

TEST_CASE("newline gap") {
    auto cell = [](int layer, const char* lab, double p) {
        GridCell c;
        c.layer = layer;
        c.axis_label = lab;
        c.eval.top1 = stats::wilson(static_cast<std::size_t>(p * 100), 100);
        c.eval.n = 100;
        return c;
    };
    ProbeGrid g;
    g.axis = "couplet";
    g.cells = {cell(0, "i=0", 0.5), cell(0, "i=1", 0.5), cell(1, "i=0", 0.9), cell(1, "i=1", 0.3)};
    const auto gap = newline_gap(g, {0, 1});
    CHECK(gap.peak_layer == 1);
    CHECK(gap.gap == doctest::Approx(0.6));
    CHECK(gap.interval.contains(0.6));
    ProbeGrid same;
    same.cells = {cell(0, "i=0", 0.4), cell(0, "i=1", 0.4)};
    CHECK(newline_gap(same, {0}).gap == doctest::Approx(0.0));
    CHECK_THROWS_AS(newline_gap(g, {2}), ValidationError);
}

TEST_CASE("final word token") {
    WordTokenizer tok({"we", "saw", "the", "night"}, false);
    const auto ids = tok.encode("we saw the night.\n");
    const auto i = final_word_token(ids, 0, ids.size(), tok);
    REQUIRE(i.has_value());
    CHECK(tok.token_text(ids[*i]) == " night");
    const auto odd = tok.encode("we saw zorp.");
    const auto j = final_word_token(odd, 0, odd.size(), tok);
    REQUIRE(j.has_value());
    CHECK(tok.token_text(odd[*j]) == " z");
    const auto none = tok.encode("...");
    CHECK_FALSE(final_word_token(none, 0, none.size(), tok).has_value());
}
