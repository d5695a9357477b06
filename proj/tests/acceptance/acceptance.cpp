// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
// Runs against the in-process toy models and the bundled fixture data.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "plansite/backend.hpp"
#include "plansite/circuits.hpp"
#include "plansite/common.hpp"
#include "plansite/corpus.hpp"
#include "plansite/interventions.hpp"
#include "plansite/phonology.hpp"
#include "plansite/probing.hpp"
#include "plansite/random.hpp"
#include "plansite/runner.hpp"
#include "plansite/stats.hpp"

namespace fs = std::filesystem;
using namespace plansite;
using nlohmann::json;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Shared {
    fs::path work;
    std::string cli;
    std::shared_ptr<backend::Model> model;
    phonology::PronunciationLexicon lex;
    std::vector<corpus::PromptPair> pairs;
    std::vector<corpus::Couplet> couplets;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double x, int prec = 4) {
    std::ostringstream os;
    os << std::setprecision(prec) << x;
    return os.str();
}

// max |a - b| / max |b|
double rel_err(const std::vector<float>& a, const std::vector<float>& b) {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num = std::max(num, std::abs(static_cast<double>(a[i]) - b[i]));
        den = std::max(den, std::abs(static_cast<double>(b[i])));
    }
    return num / std::max(den, 1e-30);
}

std::vector<float> softmax(const std::vector<float>& x) {
    const auto lp = backend::log_softmax(x);
    std::vector<float> p(lp.size());
    for (std::size_t i = 0; i < lp.size(); ++i) p[i] = static_cast<float>(std::exp(lp[i]));
    return p;
}

long pct(double x) { return std::lround(100.0 * x); }

// ---------------------------------------------------------------------------

Outcome wilson_goldens(Shared&) {
    const auto t0 = std::chrono::steady_clock::now();
    struct Golden {
        std::size_t s, n;
        long lo, hi;
    };
    const std::array<Golden, 3> goldens = {{{67, 100, 57, 75}, {0, 100, 0, 4}, {1, 100, 0, 5}}};
    bool ok = true;
    std::string detail;
    for (const auto& g : goldens) {
        const auto iv = stats::wilson(g.s, g.n);
        const bool hit = pct(iv.lower) == g.lo && pct(iv.upper) == g.hi;
        ok = ok && hit;
        detail += std::to_string(pct(iv.point)) + " [" + std::to_string(pct(iv.lower)) + ", " +
                  std::to_string(pct(iv.upper)) + "] ";
    }
    const double t = seconds_since(t0);
    return {ok && t < 1.0, detail + "in " + fmt(t, 3) + "s"};
}

// Independent resampler: std::mt19937 + uniform_int_distribution, type-7 quantiles.
std::pair<double, double> oracle_bootstrap(const std::vector<double>& rates, int B, unsigned seed) {
    std::mt19937 gen(seed);
    std::uniform_int_distribution<std::size_t> pick(0, rates.size() - 1);
    std::vector<double> stat(static_cast<std::size_t>(B));
    for (auto& s : stat) {
        double sum = 0.0;
        for (std::size_t i = 0; i < rates.size(); ++i) sum += rates[pick(gen)];
        s = sum / static_cast<double>(rates.size());
    }
    std::sort(stat.begin(), stat.end());
    auto q = [&](double p) {
        const double h = (static_cast<double>(stat.size()) - 1.0) * p;
        const auto lo = static_cast<std::size_t>(h);
        const auto hi = std::min(lo + 1, stat.size() - 1);
        return stat[lo] + (h - static_cast<double>(lo)) * (stat[hi] - stat[lo]);
    };
    return {q(0.025), q(0.975)};
}

Outcome bootstrap_oracle(Shared&) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<stats::ClusterCount> same = {{7, 10}, {14, 20}, {35, 50}};
    const auto z = stats::cluster_bootstrap(same);
    const bool zero_width = z.lower == z.upper && std::abs(z.point - 0.7) < 1e-12;

    std::vector<stats::ClusterCount> five = {{8, 20}, {10, 20}, {13, 20}, {14, 20}, {18, 20}};
    std::vector<double> rates;
    for (const auto& c : five) rates.push_back(c.rate());
    stats::BootstrapOptions o;
    o.seed = 2024;
    const auto a = stats::cluster_bootstrap(five, o);
    const auto [lo, hi] = oracle_bootstrap(rates, 10000, 99u);
    const bool close = std::abs(a.lower - lo) < 0.01 && std::abs(a.upper - hi) < 0.01;
    const auto b = stats::cluster_bootstrap(five, o);
    o.threads = 3;
    const auto c = stats::cluster_bootstrap(five, o);
    const bool det = a == b && a.lower == c.lower && a.upper == c.upper;
    const double t = seconds_since(t0);
    return {zero_width && close && det && t < 5.0,
            "zero-width=" + std::to_string(zero_width) + " ours [" + fmt(a.lower) + ", " + fmt(a.upper) + "] oracle [" +
                fmt(lo) + ", " + fmt(hi) + "] deterministic=" + std::to_string(det) + " in " + fmt(t, 3) + "s"};
}

Outcome phonology_goldens(Shared& s) {
    const auto t0 = std::chrono::steady_clock::now();
    using phonology::RhymeVerdict;
    const auto& lex = s.lex;
    int fails = 0;
    auto expect = [&](RhymeVerdict got, RhymeVerdict want) { fails += got != want; };
    expect(phonology::rhymes("fright", "night", lex), RhymeVerdict::rhyme);
    expect(phonology::rhymes("fright", "fear", lex), RhymeVerdict::no_rhyme);
    expect(phonology::rhymes("fright", "joy", lex), RhymeVerdict::no_rhyme);
    expect(phonology::rhymes("fright", "qwxzzyv", lex), RhymeVerdict::unknown);
    // Patched completions scored against the corrupt word of their pair.
    const std::vector<std::pair<std::string, std::string>> completions = {
        {"and hoped that someone would appear.", "fear"},
        {"until they all became a toy.", "joy"},
        {"and then she saw a strange and eerie light.", "night"},
        {"as though the sky had lost its rain.", "pain"},
        {"when suddenly they heard a creaking bed.", "dread"},
    };
    std::vector<std::string> lines;
    for (const auto& [line, corrupt] : completions) {
        const auto r = interventions::corrupt_rhyme_rate({line}, corrupt, "", lex);
        fails += r.successes != 1;
    }
    const double t = seconds_since(t0);
    return {fails == 0 && t < 1.0, std::to_string(9 - fails) + "/9 goldens in " + fmt(t, 3) + "s"};
}

backend::HookSite random_site(const backend::ModelSpec& spec, std::size_t len, Rng& rng) {
    const int layer = static_cast<int>(rng.index(spec.layers));
    const std::size_t pos = rng.index(len);
    switch (rng.index(4)) {
        case 0: return backend::HookSite::residual(layer, pos);
        case 1: return backend::HookSite::attn_head(layer, pos, static_cast<int>(rng.index(spec.heads)));
        case 2: return backend::HookSite::attn_out(layer, pos);
        default: return backend::HookSite::mlp(layer, pos);
    }
}

Outcome identity_patch(Shared& s) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(41);
    double worst = 0.0;
    std::size_t exact = 0;
    const std::size_t sets = 100;
    for (std::size_t i = 0; i < sets; ++i) {
        const auto& pair = s.pairs[rng.index(s.pairs.size())];
        const auto& toks = rng.index(2) ? pair.clean_tokens : pair.corrupt_tokens;
        std::vector<backend::HookSite> sites;
        const std::size_t n = 1 + rng.index(6);
        while (sites.size() < n) {
            const auto site = random_site(s.model->spec(), toks.size(), rng);
            if (std::find(sites.begin(), sites.end(), site) == sites.end()) sites.push_back(site);
        }
        const auto store = s.model->capture(toks, sites);
        backend::PatchPlan plan;
        for (const auto& site : sites) plan.replace(site, store.at(site));
        const auto patched = s.model->logits(toks, &plan);
        const auto clean = s.model->logits(toks);
        worst = std::max(worst, rel_err(patched, clean));
        exact += patched == clean;
    }
    return {worst < 1e-4, std::to_string(sets) + " site sets, max rel err " + fmt(worst) + ", bit-exact " +
                              std::to_string(exact) + "/" + std::to_string(sets) + " in " + fmt(seconds_since(t0), 3) + "s"};
}

// Pairs of distinct couplet truncation prompts with equal token length.
std::vector<std::pair<std::vector<TokenId>, std::vector<TokenId>>> same_length_pairs(const Shared& s, std::size_t want) {
    std::map<std::size_t, std::vector<std::vector<TokenId>>> by_len;
    std::vector<std::pair<std::vector<TokenId>, std::vector<TokenId>>> out;
    for (const auto& c : s.couplets) {
        auto toks = s.model->tokenizer().encode(corpus::truncation_prompt(c));
        auto& bucket = by_len[toks.size()];
        if (!bucket.empty() && bucket.back() != toks) {
            out.emplace_back(bucket.back(), toks);
            bucket.clear();
            if (out.size() == want) break;
        } else {
            bucket.push_back(std::move(toks));
        }
    }
    return out;
}

Outcome final_layer_substitution(Shared& s) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto pairs = same_length_pairs(s, 20);
    if (pairs.size() < 20) return {false, "only " + std::to_string(pairs.size()) + " same-length pairs"};
    const int last = static_cast<int>(s.model->spec().layers) - 1;
    Rng rng(17);
    double worst = 0.0;
    double min_gap = 1e300;
    backend::ForwardOptions all;
    all.all_logits = true;
    for (const auto& [clean, corrupt] : pairs) {
        // positions before the first differing token carry identical states; skip them
        std::size_t first_diff = 0;
        while (clean[first_diff] == corrupt[first_diff]) ++first_diff;
        const std::size_t p = first_diff + rng.index(clean.size() - first_diff);
        const auto site = backend::HookSite::residual(last, p);
        backend::PatchPlan plan;
        plan.replace(site, s.model->capture(corrupt, std::vector<backend::HookSite>{site}).at(site));
        backend::ForwardOptions fo = all;
        fo.plan = &plan;
        const auto patched = softmax(s.model->forward(clean, fo).all[p]);
        const auto target = softmax(s.model->forward(corrupt, all).all[p]);
        const auto original = softmax(s.model->forward(clean, all).all[p]);
        worst = std::max(worst, rel_err(patched, target));
        min_gap = std::min(min_gap, rel_err(original, target));
    }
    return {worst < 1e-4, "20 pairs, max rel err " + fmt(worst) + " (unpatched distance >= " + fmt(min_gap) + ") in " +
                              fmt(seconds_since(t0), 3) + "s"};
}

Outcome head_linearity(Shared& s) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(23);
    double worst = 0.0;
    const auto& spec = s.model->spec();
    for (int i = 0; i < 10; ++i) {
        const auto& pair = s.pairs[static_cast<std::size_t>(i) % s.pairs.size()];
        const int layer = static_cast<int>(rng.index(spec.layers));
        const std::size_t pos = rng.index(pair.clean_tokens.size());
        std::vector<backend::HookSite> sites = {backend::HookSite::attn_out(layer, pos)};
        for (int h = 0; h < static_cast<int>(spec.heads); ++h) sites.push_back(backend::HookSite::attn_head(layer, pos, h));
        const auto donor = s.model->capture(pair.corrupt_tokens, sites);
        backend::PatchPlan heads;
        for (std::size_t k = 1; k < sites.size(); ++k) heads.replace(sites[k], donor.at(sites[k]));
        backend::PatchPlan whole;
        whole.replace(sites[0], donor.at(sites[0]));
        worst = std::max(worst, rel_err(s.model->logits(pair.clean_tokens, &heads), s.model->logits(pair.clean_tokens, &whole)));
    }
    return {worst < 1e-4, "10 sites, max rel err " + fmt(worst) + " in " + fmt(seconds_since(t0), 3) + "s"};
}

// Labels from a fixed random linear map of mean-centred hidden vectors, two classes.
Outcome probe_convergence(Shared& s) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto samples =
        corpus::sample_general_text(data_dir() + "/general_corpus.jsonl", s.model->tokenizer(), 1500, {8, 32}, 1);
    probing::LookaheadOptions lo;
    lo.max_new_tokens = 64;
    auto ds = probing::build_lookahead_dataset(*s.model, samples, {3}, {0}, lo).cells.at(0);
    ds.axis = "synthetic";
    const std::size_t d = ds.width;
    const int classes = 2;
    std::vector<double> mu(d, 0.0);
    for (const auto& e : ds.examples) {
        for (std::size_t i = 0; i < d; ++i) mu[i] += e.h[i];
    }
    for (auto& m : mu) m /= static_cast<double>(ds.examples.size());
    Rng rng(1);
    std::vector<double> A(static_cast<std::size_t>(classes) * d);
    for (auto& a : A) a = rng.normal();
    std::array<std::size_t, 2> balance{};
    for (auto& e : ds.examples) {
        int best = 0;
        double best_v = -INFINITY;
        for (int c = 0; c < classes; ++c) {
            double v = 0.0;
            for (std::size_t i = 0; i < d; ++i) v += A[static_cast<std::size_t>(c) * d + i] * (e.h[i] - mu[i]);
            if (v > best_v) {
                best_v = v;
                best = c;
            }
        }
        e.label = best;
        ++balance[static_cast<std::size_t>(best)];
    }
    probing::ProbeHyperparams hp;  // lr 1e-4, wd 1e-3, batch 32, 10 epochs
    hp.seed = 1;
    const auto probe = probing::train_probe(ds, hp, classes);
    const auto ev = probing::evaluate_probe(probe, ds, nullptr, nullptr);
    const double t = seconds_since(t0);
    return {ev.top1.point >= 0.99 && probe.epochs_completed <= 10 && t < 600.0,
            "held-out top-1 " + fmt(ev.top1.point) + " on n=" + std::to_string(ev.n) + " (train " +
                std::to_string(ds.count("train")) + ", classes " + std::to_string(balance[0]) + "/" +
                std::to_string(balance[1]) + ", " + std::to_string(probe.epochs_completed) + " epochs) in " + fmt(t, 3) + "s"};
}

Outcome metric_orderings(Shared& s) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto build = probing::build_couplet_dataset(*s.model, s.couplets, {3}, {corpus::RelPosition::at(0)});
    const auto& ds = build.cells.at(0);
    probing::ProbeHyperparams hp;
    hp.seed = 2;
    const auto probe = probing::train_probe(ds, hp, s.model->spec().vocab);
    const auto ev = probing::evaluate_probe(probe, ds, &s.model->tokenizer(), &s.lex);
    const bool ok = ev.n == 200 && ev.top5.point >= ev.top1.point && ev.rhyme.point >= ev.top1.point &&
                    ev.rhyme5.point >= ev.rhyme.point;
    return {ok, "n=" + std::to_string(ev.n) + " top1 " + fmt(ev.top1.point) + " top5 " + fmt(ev.top5.point) + " rhyme " +
                    fmt(ev.rhyme.point) + " rhyme@5 " + fmt(ev.rhyme5.point) + " in " + fmt(seconds_since(t0), 3) + "s"};
}

Outcome unigram_exactness(Shared& s) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto samples =
        corpus::sample_general_text(data_dir() + "/general_corpus.jsonl", s.model->tokenizer(), 60, {8, 32}, 3);
    std::vector<std::vector<TokenId>> completions;
    backend::DecodeParams greedy;
    greedy.temperature = 0.0;
    greedy.stop_at_newline = false;
    for (const auto& smp : samples) completions.push_back(s.model->generate(smp.tokens, greedy).continuation);
    const auto baseline = probing::build_unigram(completions);
    // Oracle: plain frequency count over the same fixture.
    std::map<TokenId, std::size_t> freq;
    std::size_t total = 0;
    probing::ProbeDataset ds;
    ds.width = 1;
    for (const auto& c : completions) {
        for (TokenId t : c) {
            ++freq[t];
            ++total;
            ds.examples.push_back({{0.0f}, t, "", "validation", ""});
        }
    }
    std::size_t modal = 0;
    for (const auto& [t, n] : freq) modal = std::max(modal, n);
    const double expected = static_cast<double>(modal) / static_cast<double>(total);
    const auto ev = probing::unigram_eval(baseline, ds, nullptr, nullptr);
    const double err = std::abs(ev.top1.point - expected);
    return {err <= 1e-9, "top-1 " + fmt(ev.top1.point, 12) + " vs modal frequency " + fmt(expected, 12) + " over " +
                             std::to_string(total) + " tokens in " + fmt(seconds_since(t0), 3) + "s"};
}

bool same_pairs(const interventions::CellResult& a, const interventions::CellResult& b) {
    return a.pairs == b.pairs && a.transcripts == b.transcripts;
}

Outcome noop_contracts(Shared& s) {
    const auto t0 = std::chrono::steady_clock::now();
    interventions::RunOptions opts;
    opts.samples = 5;
    opts.seed = 13;
    opts.seed_policy = interventions::SeedPolicy::shared;
    opts.bootstrap.resamples = 1000;
    const auto clean = interventions::clean_cell(*s.model, s.pairs, opts, s.lex);
    const auto empty = interventions::run_patch_cell(*s.model, s.pairs, {}, opts, s.lex);
    const auto ranking = circuits::rank_heads(*s.model, s.pairs, 0, static_cast<int>(s.model->spec().layers) - 1);
    const auto k0 = circuits::topk_head_patch(*s.model, s.pairs, ranking, {0}, corpus::RelPosition::at(0), opts, s.lex);
    const auto path0 = circuits::path_patch_cell(*s.model, s.pairs, circuits::topk_set(ranking, 0), circuits::PathOptions{},
                                                 opts, s.lex, "path/k=0", {});
    const bool heads_ok = same_pairs(clean, k0.cells.at(0)) && same_pairs(clean, path0);
    const bool plan_ok = same_pairs(clean, empty);

    const auto schemes = interventions::build_schemes(s.couplets, s.model->tokenizer(), s.lex, 3, 6, 3);
    const auto means = interventions::fit_scheme_means(*s.model, schemes, {corpus::RelPosition::at(0)}, {3});
    // Unsteered generations of every held-out prompt under the same shared seeds.
    auto unsteered = [&](const interventions::Scheme& src, const std::string& target) {
        std::size_t hits = 0;
        for (const auto& p : src.heldout) {
            std::vector<backend::DecodeParams> params(opts.samples, opts.decode);
            for (std::size_t i = 0; i < opts.samples; ++i) params[i].seed = opts.seed + i;
            std::vector<std::string> lines;
            for (const auto& g : s.model->generate_many(p.tokens, params)) lines.push_back(interventions::completed_line("", g.text));
            hits += interventions::corrupt_rhyme_rate(lines, target, src.word, s.lex).successes;
        }
        return hits;
    };
    const auto a0 = interventions::steer_cell(*s.model, schemes, means, 0, 0, 0.0, opts, s.lex, 0, "steer/alpha0", {});
    bool alpha_ok = a0.pairs.size() == schemes.size() * (schemes.size() - 1);
    std::size_t k = 0;
    for (std::size_t si = 0; si < schemes.size() && alpha_ok; ++si) {
        for (std::size_t ti = 0; ti < schemes.size(); ++ti) {
            if (si == ti) continue;
            alpha_ok = alpha_ok && a0.pairs[k++].n_success == unsteered(schemes[si], schemes[ti].word);
        }
    }
    bool self_ok = true;
    for (std::size_t si = 0; si < schemes.size(); ++si) {
        std::vector<interventions::Scheme> twins = {schemes[si], schemes[si]};
        twins[1].name += "'";
        interventions::SchemeMeans tm = means;
        tm.schemes = {twins[0].name, twins[1].name};
        tm.means = {means.means[si], means.means[si]};
        tm.counts = {means.counts[si], means.counts[si]};
        const auto self = interventions::steer_cell(*s.model, twins, tm, 0, 0, 1.0, opts, s.lex, 1, "steer/self", {});
        self_ok = self_ok && self.pairs.size() == 1 && self.pairs[0].n_success == unsteered(schemes[si], schemes[si].word);
    }
    const bool ok = heads_ok && plan_ok && alpha_ok && self_ok;
    return {ok, "k=0 heads " + std::string(heads_ok ? "ok" : "DIFF") + ", empty plan " + (plan_ok ? "ok" : "DIFF") +
                    ", alpha=0 " + (alpha_ok ? "ok" : "DIFF") + ", v(s->s) " + (self_ok ? "ok" : "DIFF") +
                    " (clean rate " + fmt(clean.rate, 3) + ") in " + fmt(seconds_since(t0), 3) + "s"};
}

int sh(const std::string& cmd, std::string* output = nullptr) {
    std::string full = cmd + " 2>&1";
    FILE* p = popen(full.c_str(), "r");
    if (!p) return -1;
    std::array<char, 4096> buf{};
    std::string out;
    while (fgets(buf.data(), static_cast<int>(buf.size()), p)) out += buf.data();
    const int status = pclose(p);
    if (output) *output = out;
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome end_to_end(Shared& s) {
    const auto t0 = std::chrono::steady_clock::now();
    if (s.cli.empty() || !fs::exists(s.cli)) return {false, "CLI binary not found (set PLANSITE_CLI)"};
    const fs::path dir = s.work / "e2e";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const json sweep = {{"kind", "patch_sweep"}, {"model", "toy-rhymer"}, {"seed", 1},
                        {"positions", {"last_word", 0}}, {"run", {{"samples", 5}}}};
    const json table = {{"kind", "all_layers"}, {"model", "toy-rhymer"}, {"seed", 1},
                        {"positions", {"last_word", 0}}, {"run", {{"samples", 5}}}};
    std::ofstream(dir / "sweep.json") << sweep.dump(2);
    std::ofstream(dir / "table.json") << table.dump(2);
    const std::string cli = "'" + s.cli + "'";
    const std::string d = dir.string();
    std::string log;
    if (sh(cli + " --config " + d + "/sweep.json --out " + d + "/sweep --deterministic -q patch-sweep", &log) != 0) {
        return {false, "patch-sweep failed: " + log};
    }
    const auto rec = runner::load_record(dir / "sweep" / "record.jsonl");
    const auto cells = rec.latest();
    const std::size_t expected = 2 * s.model->spec().layers;
    bool valid = cells.size() == expected && !rec.any_failed() && rec.config_hash().size() == 16;
    for (const auto& c : cells) {
        const auto& iv = c.payload.at("interval");
        const double r = c.payload.at("rate").get<double>();
        valid = valid && iv.at("lower").get<double>() <= r && r <= iv.at("upper").get<double>();
    }
    if (!valid) return {false, "run record invalid (" + std::to_string(cells.size()) + " cells)"};
    std::string replay_out;
    const int rc = sh(cli + " replay " + d + "/sweep --all", &replay_out);
    std::size_t identical = 0;
    for (std::size_t pos = 0; (pos = replay_out.find(": identical", pos)) != std::string::npos; ++pos) ++identical;
    if (rc != 0 || identical != expected) return {false, "replay: " + std::to_string(identical) + " identical, exit " + std::to_string(rc)};
    if (sh(cli + " --config " + d + "/table.json --out " + d + "/table --deterministic -q all-layers", &log) != 0) {
        return {false, "all-layers failed: " + log};
    }
    if (sh(cli + " --out " + d + "/report -q report " + d + "/sweep " + d + "/table", &log) != 0) {
        return {false, "report failed: " + log};
    }
    const bool plot = fs::exists(dir / "report" / "patch_sweep_toy-rhymer.svg");
    std::ifstream tin(dir / "report" / "all_layers_table.md");
    std::string md((std::istreambuf_iterator<char>(tin)), std::istreambuf_iterator<char>());
    const bool tab = md.find("| toy-rhymer |") != std::string::npos;
    const double t = seconds_since(t0);
    return {plot && tab && t < 1800.0, std::to_string(cells.size()) + " cells, replay " + std::to_string(identical) +
                                           "/" + std::to_string(expected) + " identical, plot " + (plot ? "ok" : "missing") +
                                           ", table " + (tab ? "ok" : "missing") + " in " + fmt(t, 4) + "s"};
}

Outcome wilson_coverage(Shared&) {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 gen(20240601);
    std::binomial_distribution<int> draw(100, 0.3);
    int covered = 0;
    const int trials = 2000;
    for (int i = 0; i < trials; ++i) covered += stats::wilson(static_cast<std::size_t>(draw(gen)), 100).contains(0.3);
    const double cov = static_cast<double>(covered) / trials;
    const double t = seconds_since(t0);
    return {cov >= 0.92 && cov <= 0.98 && t < 10.0, "coverage " + fmt(cov) + " over 2000 draws in " + fmt(t, 3) + "s"};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"plansite acceptance suite"};
    std::string work = (fs::temp_directory_path() / "plansite_acceptance").string();
    std::vector<int> only;
    app.add_option("--work-dir", work, "scratch directory for CLI runs");
    app.add_option("--only", only, "run only these criteria (1-12)")->delimiter(',');
    CLI11_PARSE(app, argc, argv);

    Shared s;
    s.work = work;
    fs::create_directories(s.work);
    if (const char* c = std::getenv("PLANSITE_CLI")) s.cli = c;
    s.model = backend::load_model("toy-rhymer");
    s.lex = phonology::load_pronouncing_lexicon(data_dir() + "/cmudict-0.7b");
    s.pairs = corpus::build_prompt_pairs(corpus::load_prompt_pair_specs(data_dir() + "/prompt_pairs.jsonl"),
                                         s.model->tokenizer(), s.lex)
                  .pairs;
    s.couplets = corpus::load_couplets(data_dir() + "/couplets.jsonl", s.lex).couplets;

    const std::vector<std::pair<std::string, std::function<Outcome(Shared&)>>> criteria = {
        {"wilson-goldens", wilson_goldens},
        {"cluster-bootstrap", bootstrap_oracle},
        {"phonology-goldens", phonology_goldens},
        {"identity-patch", identity_patch},
        {"final-layer-substitution", final_layer_substitution},
        {"head-linearity", head_linearity},
        {"probe-convergence", probe_convergence},
        {"metric-orderings", metric_orderings},
        {"unigram-exactness", unigram_exactness},
        {"noop-contracts", noop_contracts},
        {"end-to-end-cli", end_to_end},
        {"wilson-coverage", wilson_coverage},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int num = static_cast<int>(i) + 1;
        if (!only.empty() && std::find(only.begin(), only.end(), num) == only.end()) continue;
        Outcome o;
        try {
            o = criteria[i].second(s);
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  " << std::setw(2) << num << " " << criteria[i].first << ": "
                  << o.detail << std::endl;
    }
    std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << std::endl;
    return failed ? 1 : 0;
}
