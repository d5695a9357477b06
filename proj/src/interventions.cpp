#include <algorithm>
#include <cmath>
#include <map>

#include "plansite/common.hpp"
#include "plansite/interventions.hpp"
#include "plansite/random.hpp"

namespace plansite::interventions {

using backend::HookSite;
using backend::PatchPlan;
using corpus::PromptPair;
using corpus::RelPosition;

std::string completed_line(const std::string& prefix, const std::string& continuation) {
    const auto nl = continuation.find('\n');
    return prefix + (nl == std::string::npos ? continuation : continuation.substr(0, nl));
}

RateResult corrupt_rhyme_rate(const std::vector<std::string>& lines, const std::string& corrupt_word,
                              const std::string& clean_word, const phonology::PronunciationLexicon& lexicon,
                              phonology::IdenticalWordPolicy policy) {
    RateResult r;
    for (const auto& line : lines) {
        SampleVerdict v;
        try {
            v.final_word = phonology::final_word(line);
        } catch (const ValidationError&) {
            v.reason = "no final word";
        }
        if (!v.final_word.empty()) {
            const auto verdict = phonology::rhymes(v.final_word, corrupt_word, lexicon, policy);
            v.success = verdict == phonology::RhymeVerdict::rhyme;
            v.unknown = verdict == phonology::RhymeVerdict::unknown;
            v.clean_rhyme = phonology::rhymes(v.final_word, clean_word, lexicon, policy) == phonology::RhymeVerdict::rhyme;
        }
        r.successes += v.success;
        r.clean_rhymes += v.clean_rhyme;
        r.unknowns += v.unknown;
        ++r.total;
        r.verdicts.push_back(std::move(v));
    }
    return r;
}

std::string to_string(SeedPolicy p) { return p == SeedPolicy::per_cell ? "per_cell" : "shared"; }

SeedPolicy seed_policy_from_string(const std::string& s) {
    if (s == "per_cell") return SeedPolicy::per_cell;
    if (s == "shared") return SeedPolicy::shared;
    throw ValidationError("unknown seed policy: " + s);
}

std::uint64_t sample_seed(SeedPolicy policy, std::uint64_t base, const std::string& pair_id, const std::string& cell_key,
                          std::size_t sample) {
    if (policy == SeedPolicy::shared) return base + sample;
    return mix_seed(mix_seed(mix_seed(base, fnv1a64(pair_id)), fnv1a64(cell_key)), sample);
}

namespace {

std::string statistic_name(stats::BootstrapStatistic s) {
    return s == stats::BootstrapStatistic::cluster_mean ? "cluster_mean" : "pooled";
}

}  // namespace

void to_json(nlohmann::json& j, const RunOptions& o) {
    j = {{"samples", o.samples},
         {"decode", o.decode},
         {"seed", o.seed},
         {"seed_policy", to_string(o.seed_policy)},
         {"identical_policy", phonology::to_string(o.policy)},
         {"bootstrap",
          {{"resamples", o.bootstrap.resamples},
           {"confidence", o.bootstrap.confidence},
           {"seed", o.bootstrap.seed},
           {"statistic", statistic_name(o.bootstrap.statistic)},
           {"interval", o.bootstrap.interval == stats::BootstrapInterval::bca ? "bca" : "percentile"}}},
         {"transcripts_per_pair", o.transcripts_per_pair}};
}

void from_json(const nlohmann::json& j, RunOptions& o) {
    RunOptions d;
    o.samples = j.value("samples", d.samples);
    if (j.contains("decode")) o.decode = j.at("decode").get<backend::DecodeParams>();
    o.seed = j.value("seed", d.seed);
    o.seed_policy = seed_policy_from_string(j.value("seed_policy", to_string(d.seed_policy)));
    o.policy = phonology::identical_policy_from_string(j.value("identical_policy", phonology::to_string(d.policy)));
    if (j.contains("bootstrap")) {
        const auto& b = j.at("bootstrap");
        o.bootstrap.resamples = b.value("resamples", d.bootstrap.resamples);
        o.bootstrap.confidence = b.value("confidence", d.bootstrap.confidence);
        o.bootstrap.seed = b.value("seed", d.bootstrap.seed);
        const auto stat = b.value("statistic", std::string("cluster_mean"));
        if (stat != "cluster_mean" && stat != "pooled") throw ValidationError("unknown bootstrap statistic: " + stat);
        o.bootstrap.statistic = stat == "pooled" ? stats::BootstrapStatistic::pooled : stats::BootstrapStatistic::cluster_mean;
        const auto iv = b.value("interval", std::string("percentile"));
        if (iv != "percentile" && iv != "bca") throw ValidationError("unknown bootstrap interval: " + iv);
        o.bootstrap.interval = iv == "bca" ? stats::BootstrapInterval::bca : stats::BootstrapInterval::percentile;
    }
    o.transcripts_per_pair = j.value("transcripts_per_pair", d.transcripts_per_pair);
}

std::size_t CellResult::successes() const {
    std::size_t s = 0;
    for (const auto& p : pairs) s += p.n_success;
    return s;
}

std::size_t CellResult::total() const {
    std::size_t s = 0;
    for (const auto& p : pairs) s += p.n_total;
    return s;
}

void to_json(nlohmann::json& j, const CellResult& c) {
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& p : c.pairs) {
        pairs.push_back({{"pair_id", p.pair_id},
                         {"n_success", p.n_success},
                         {"n_total", p.n_total},
                         {"n_unknown", p.n_unknown},
                         {"n_clean_rhyme", p.n_clean_rhyme},
                         {"n_nonfinite", p.n_nonfinite}});
    }
    nlohmann::json tr = nlohmann::json::array();
    for (const auto& t : c.transcripts) {
        tr.push_back({{"pair_id", t.pair_id}, {"sample", t.sample}, {"seed", t.seed}, {"line", t.line}, {"success", t.success}});
    }
    j = {{"cell_id", c.cell_id}, {"condition", c.condition}, {"pairs", pairs},   {"rate", c.rate},
         {"interval", c.interval}, {"transcripts", tr},     {"failed", c.failed}, {"error", c.error}};
}

void from_json(const nlohmann::json& j, CellResult& c) {
    c.cell_id = j.at("cell_id").get<std::string>();
    c.condition = j.at("condition");
    c.pairs.clear();
    for (const auto& p : j.at("pairs")) {
        c.pairs.push_back({p.at("pair_id").get<std::string>(), p.at("n_success").get<std::size_t>(),
                           p.at("n_total").get<std::size_t>(), p.at("n_unknown").get<std::size_t>(),
                           p.at("n_clean_rhyme").get<std::size_t>(), p.at("n_nonfinite").get<std::size_t>()});
    }
    c.rate = j.at("rate").get<double>();
    c.interval = j.at("interval").get<stats::Interval>();
    c.transcripts.clear();
    for (const auto& t : j.at("transcripts")) {
        c.transcripts.push_back({t.at("pair_id").get<std::string>(), t.at("sample").get<std::size_t>(),
                                 t.at("seed").get<std::uint64_t>(), t.at("line").get<std::string>(),
                                 t.at("success").get<bool>()});
    }
    c.failed = j.value("failed", false);
    c.error = j.value("error", std::string());
}

// ---------------------------------------------------------------------------
// Cell execution

namespace {

struct Job {
    std::string cluster;
    std::string unit_id;
    const std::vector<TokenId>* tokens = nullptr;
    std::string prefix;
    std::string target;
    std::string reference;
    PatchPlan plan;
};

CellResult execute(const backend::Model& model, const std::vector<Job>& jobs, const std::string& cell_id,
                   const std::string& cell_key, nlohmann::json condition, const RunOptions& opts,
                   const phonology::PronunciationLexicon& lexicon, CellInterval interval) {
    if (opts.samples == 0) throw ValidationError("cell " + cell_id + ": samples must be positive");
    if (jobs.empty()) throw ValidationError("cell " + cell_id + ": no prompts");
    CellResult cell;
    cell.cell_id = cell_id;
    condition["options"] = opts;
    condition["cell_key"] = cell_key;
    condition["interval_kind"] = interval == CellInterval::wilson ? "wilson" : "cluster_bootstrap";
    cell.condition = std::move(condition);

    std::map<std::string, std::size_t> cluster_index;
    std::map<std::string, std::size_t> transcripts_kept;
    for (const auto& job : jobs) {
        std::vector<backend::DecodeParams> params(opts.samples, opts.decode);
        for (std::size_t s = 0; s < opts.samples; ++s) {
            params[s].seed = sample_seed(opts.seed_policy, opts.seed, job.unit_id, cell_key, s);
        }
        const auto gens = model.generate_many(*job.tokens, params, job.plan.empty() ? nullptr : &job.plan);
        std::vector<std::string> lines;
        std::size_t nonfinite = 0;
        for (const auto& g : gens) {
            lines.push_back(completed_line(job.prefix, g.text));
            nonfinite += g.nonfinite_logits;
        }
        const auto rr = corrupt_rhyme_rate(lines, job.target, job.reference, lexicon, opts.policy);
        auto [it, fresh] = cluster_index.emplace(job.cluster, cell.pairs.size());
        if (fresh) cell.pairs.push_back(PairOutcome{job.cluster});
        auto& po = cell.pairs[it->second];
        po.n_success += rr.successes;
        po.n_total += rr.total;
        po.n_unknown += rr.unknowns;
        po.n_clean_rhyme += rr.clean_rhymes;
        po.n_nonfinite += nonfinite;
        auto& kept = transcripts_kept[job.cluster];
        for (std::size_t s = 0; s < gens.size() && kept < opts.transcripts_per_pair; ++s, ++kept) {
            cell.transcripts.push_back({job.unit_id, s, params[s].seed, lines[s], rr.verdicts[s].success});
        }
    }
    double sum = 0;
    for (const auto& p : cell.pairs) sum += p.rate();
    cell.rate = sum / static_cast<double>(cell.pairs.size());
    if (interval == CellInterval::wilson) {
        cell.interval = stats::wilson(cell.successes(), cell.total(), opts.bootstrap.confidence);
    } else {
        std::vector<stats::ClusterCount> clusters;
        for (const auto& p : cell.pairs) clusters.push_back({p.n_success, p.n_total});
        auto bo = opts.bootstrap;
        bo.seed = mix_seed(opts.bootstrap.seed, fnv1a64(cell_id));
        cell.interval = stats::cluster_bootstrap(clusters, bo);
    }
    return cell;
}

Job pair_job(const PromptPair& p, PatchPlan plan, const Scoring& scoring) {
    Job j;
    j.cluster = p.pair_id;
    j.unit_id = p.pair_id;
    j.tokens = &p.clean_tokens;
    j.prefix = p.line2_prefix();
    j.target = scoring.target ? scoring.target(p) : p.corrupt_word;
    j.reference = scoring.reference ? scoring.reference(p) : p.clean_word;
    j.plan = std::move(plan);
    return j;
}

nlohmann::json sites_json(const std::vector<SiteSpec>& sites) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& s : sites) a.push_back(s);
    return a;
}

/// Corrupt activations for every pair at the given sites, one forward each.
std::vector<backend::ActivationStore> capture_corrupt(const backend::Model& model, const std::vector<PromptPair>& pairs,
                                                      const std::vector<SiteSpec>& sites) {
    std::vector<backend::ActivationStore> out;
    for (const auto& p : pairs) {
        check_aligned(p, sites);
        std::vector<HookSite> hs;
        for (const auto& s : sites) hs.push_back(s.resolve(p.corrupt_map));
        out.push_back(model.capture(p.corrupt_tokens, hs));
    }
    return out;
}

CellResult patch_cell_from(const backend::Model& model, const std::vector<PromptPair>& pairs,
                           const std::vector<SiteSpec>& sites, const std::vector<backend::ActivationStore>& corrupt,
                           const std::string& cell_id, nlohmann::json condition, const RunOptions& opts,
                           const phonology::PronunciationLexicon& lexicon, CellInterval interval) {
    std::vector<Job> jobs;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        PatchPlan plan;
        for (const auto& s : sites) {
            const auto hs = s.resolve(pairs[i].clean_map);
            plan.replace(hs, corrupt[i].at(s.resolve(pairs[i].corrupt_map)));
        }
        jobs.push_back(pair_job(pairs[i], std::move(plan), {}));
    }
    condition["sites"] = sites_json(sites);
    return execute(model, jobs, cell_id, sites_key(sites), std::move(condition), opts, lexicon, interval);
}

}  // namespace

CellResult run_cell(const backend::Model& model, const std::vector<PromptPair>& pairs, const PlanBuilder& plan_for,
                    const std::string& cell_id, const std::string& cell_key, nlohmann::json condition,
                    const RunOptions& opts, const phonology::PronunciationLexicon& lexicon, CellInterval interval,
                    const Scoring& scoring) {
    std::vector<Job> jobs;
    for (const auto& p : pairs) jobs.push_back(pair_job(p, plan_for ? plan_for(p) : PatchPlan{}, scoring));
    return execute(model, jobs, cell_id, cell_key, std::move(condition), opts, lexicon, interval);
}

HookSite SiteSpec::resolve(const corpus::PositionMap& m) const {
    return HookSite{layer, m.absolute(position.resolve(m)), component, head};
}

std::string SiteSpec::key() const {
    std::string k = "L" + std::to_string(layer) + "@" + position.label() + ":" + backend::to_string(component);
    if (component == backend::Component::attention_head) k += "(" + std::to_string(head) + ")";
    return k;
}

void to_json(nlohmann::json& j, const SiteSpec& s) {
    j = {{"layer", s.layer}, {"position", s.position.to_json()}, {"component", backend::to_string(s.component)}};
    if (s.component == backend::Component::attention_head) j["head"] = s.head;
}

void from_json(const nlohmann::json& j, SiteSpec& s) {
    s.layer = j.at("layer").get<int>();
    s.position = RelPosition::parse(j.at("position"));
    s.component = backend::component_from_string(j.value("component", std::string("residual_post_block")));
    s.head = j.value("head", -1);
}

std::string sites_key(const std::vector<SiteSpec>& sites) {
    std::string k;
    for (const auto& s : sites) k += (k.empty() ? "" : "+") + s.key();
    return k.empty() ? "clean" : k;
}

void check_aligned(const PromptPair& pair, const std::vector<SiteSpec>& sites) {
    for (const auto& s : sites) {
        const auto a = pair.clean_map.absolute(s.position.resolve(pair.clean_map));
        const auto b = pair.corrupt_map.absolute(s.position.resolve(pair.corrupt_map));
        if (a != b) throw ValidationError("pair " + pair.pair_id + ": clean/corrupt positions differ at " + s.key());
        if (a >= pair.corrupt_tokens.size() || a >= pair.clean_tokens.size()) {
            throw RangeError("pair " + pair.pair_id + ": site " + s.key() + " lies beyond the prompt");
        }
    }
}

CellResult run_patch_cell(const backend::Model& model, const std::vector<PromptPair>& pairs,
                          const std::vector<SiteSpec>& sites, const RunOptions& opts,
                          const phonology::PronunciationLexicon& lexicon, CellInterval interval) {
    const auto corrupt = capture_corrupt(model, pairs, sites);
    return patch_cell_from(model, pairs, sites, corrupt, "patch/" + sites_key(sites), {{"kind", "patch"}}, opts, lexicon,
                           interval);
}

std::string to_string(PatchSource s) {
    switch (s) {
        case PatchSource::corrupt: return "corrupt";
        case PatchSource::zero: return "zero";
        case PatchSource::donor: return "donor";
    }
    return "corrupt";
}

PatchSource patch_source_from_string(const std::string& s) {
    if (s == "corrupt") return PatchSource::corrupt;
    if (s == "zero") return PatchSource::zero;
    if (s == "donor") return PatchSource::donor;
    throw ValidationError("unknown patch source: " + s);
}

std::string patch_cell_key(const std::vector<SiteSpec>& sites, PatchSource source) {
    return source == PatchSource::corrupt ? sites_key(sites) : "baseline_" + to_string(source) + ":" + sites_key(sites);
}

CellResult patch_cell(const backend::Model& model, const std::vector<PromptPair>& pairs, const std::vector<SiteSpec>& sites,
                      PatchSource source, const RunOptions& opts, const phonology::PronunciationLexicon& lexicon,
                      CellInterval interval, const std::string& cell_id, nlohmann::json condition,
                      std::string_view donor_text) {
    std::vector<TokenId> donor;
    if (source == PatchSource::donor) {
        if (donor_text.empty()) throw ValidationError("donor patch needs donor text");
        donor = model.tokenizer().encode(donor_text);
    }
    std::vector<Job> jobs;
    for (const auto& p : pairs) {
        PatchPlan plan;
        if (source == PatchSource::corrupt) {
            check_aligned(p, sites);
            std::vector<HookSite> hs;
            for (const auto& s : sites) hs.push_back(s.resolve(p.corrupt_map));
            const auto st = model.capture(p.corrupt_tokens, hs);
            for (std::size_t i = 0; i < sites.size(); ++i) plan.replace(sites[i].resolve(p.clean_map), st.at(hs[i]));
        } else if (source == PatchSource::zero) {
            for (const auto& s : sites) plan.zero(s.resolve(p.clean_map));
        } else {
            std::vector<HookSite> hs;
            for (const auto& s : sites) {
                hs.push_back(s.resolve(p.clean_map));
                if (hs.back().position >= donor.size()) {
                    throw ValidationError("donor text too short: " + std::to_string(donor.size()) + " tokens, position " +
                                          std::to_string(hs.back().position) + " required");
                }
            }
            const auto st = model.capture(donor, hs);
            for (const auto& h : hs) plan.replace(h, st.at(h));
        }
        jobs.push_back(pair_job(p, std::move(plan), {}));
    }
    condition["sites"] = sites_json(sites);
    condition["source"] = to_string(source);
    if (source == PatchSource::donor) condition["donor_text"] = std::string(donor_text);
    return execute(model, jobs, cell_id, patch_cell_key(sites, source), std::move(condition), opts, lexicon, interval);
}

CellResult clean_cell(const backend::Model& model, const std::vector<PromptPair>& pairs, const RunOptions& opts,
                      const phonology::PronunciationLexicon& lexicon, const std::string& cell_key) {
    return run_cell(model, pairs, nullptr, "clean/" + cell_key, cell_key, {{"kind", "clean"}}, opts, lexicon);
}

std::string sweep_cell_id(const std::string& kind, const RelPosition& pos, int layer) {
    return kind + "/" + pos.label() + "/L" + std::to_string(layer);
}

void to_json(nlohmann::json& j, const SweepResult& s) {
    nlohmann::json pos = nlohmann::json::array();
    for (const auto& p : s.positions) pos.push_back(p.to_json());
    j = {{"kind", s.kind}, {"layers", s.layers}, {"positions", pos}, {"cells", s.cells}, {"failures", s.failures}};
    j["reference"] = s.reference ? nlohmann::json(*s.reference) : nlohmann::json();
    j["reference_layer"] = s.reference_layer ? nlohmann::json(*s.reference_layer) : nlohmann::json();
}

namespace {

void fill_reference(SweepResult& r) {
    for (std::size_t p = 0; p < r.positions.size(); ++p) {
        if (r.positions[p].last_word || r.positions[p].offset != 0) continue;
        for (std::size_t l = 0; l < r.layers.size(); ++l) {
            const auto& c = r.cell(p, l);
            if (c.failed) continue;
            if (!r.reference || c.rate > *r.reference) {
                r.reference = c.rate;
                r.reference_layer = r.layers[l];
            }
        }
    }
}

CellResult failed_cell(const std::string& id, nlohmann::json condition, const std::string& error) {
    CellResult c;
    c.cell_id = id;
    c.condition = std::move(condition);
    c.failed = true;
    c.error = error;
    return c;
}

}  // namespace

SweepResult layer_position_sweep(const backend::Model& model, const std::vector<PromptPair>& pairs,
                                 const std::vector<RelPosition>& positions, const std::vector<int>& layers,
                                 const RunOptions& opts, const phonology::PronunciationLexicon& lexicon) {
    SweepResult r;
    r.kind = "patch_sweep";
    r.layers = layers;
    r.positions = positions;
    std::vector<SiteSpec> all;
    for (const auto& p : positions) {
        for (int l : layers) all.push_back({l, p});
    }
    const auto corrupt = capture_corrupt(model, pairs, all);
    for (const auto& p : positions) {
        for (int l : layers) {
            const auto id = sweep_cell_id(r.kind, p, l);
            try {
                r.cells.push_back(patch_cell_from(model, pairs, {SiteSpec{l, p}}, corrupt, id, {{"kind", "patch"}}, opts,
                                                  lexicon, CellInterval::cluster_bootstrap));
            } catch (const Error& e) {
                r.cells.push_back(failed_cell(id, {{"kind", "patch"}, {"sites", sites_json({SiteSpec{l, p}})}}, e.what()));
                r.failures.push_back(id + ": " + e.what());
            }
        }
    }
    fill_reference(r);
    return r;
}

CellResult all_layers_patch(const backend::Model& model, const std::vector<PromptPair>& pairs, const RelPosition& position,
                            const RunOptions& opts, const phonology::PronunciationLexicon& lexicon) {
    std::vector<SiteSpec> sites;
    for (std::size_t l = 0; l < model.spec().layers; ++l) sites.push_back({static_cast<int>(l), position});
    const auto corrupt = capture_corrupt(model, pairs, sites);
    return patch_cell_from(model, pairs, sites, corrupt, "all_layers/" + position.label(), {{"kind", "all_layers"}}, opts,
                           lexicon, CellInterval::wilson);
}

std::string to_string(BaselineKind k) { return k == BaselineKind::zero ? "zero" : "donor"; }

BaselineKind baseline_kind_from_string(const std::string& s) {
    if (s == "zero") return BaselineKind::zero;
    if (s == "donor") return BaselineKind::donor;
    throw ValidationError("unknown baseline kind: " + s);
}

SweepResult baseline_patch(const backend::Model& model, const std::vector<PromptPair>& pairs, BaselineKind kind,
                           const RelPosition& position, const std::vector<int>& layers, const RunOptions& opts,
                           const phonology::PronunciationLexicon& lexicon, std::string_view donor_text) {
    SweepResult r;
    r.kind = "baseline_" + to_string(kind);
    r.layers = layers;
    r.positions = {position};
    const auto donor = model.tokenizer().encode(donor_text);
    std::vector<backend::ActivationStore> donor_acts;
    if (kind == BaselineKind::donor) {
        for (const auto& p : pairs) {
            const auto abs = p.clean_map.absolute(position.resolve(p.clean_map));
            if (abs >= donor.size()) {
                throw ValidationError("donor text too short: " + std::to_string(donor.size()) + " tokens, position " +
                                      std::to_string(abs) + " required");
            }
            std::vector<HookSite> hs;
            for (int l : layers) hs.push_back(HookSite::residual(l, abs));
            donor_acts.push_back(model.capture(donor, hs));
        }
    }
    for (int l : layers) {
        const auto id = sweep_cell_id(r.kind, position, l);
        const SiteSpec site{l, position};
        nlohmann::json cond = {{"kind", r.kind}, {"sites", sites_json({site})}};
        if (kind == BaselineKind::donor) cond["donor_text"] = std::string(donor_text);
        try {
            std::vector<Job> jobs;
            for (std::size_t i = 0; i < pairs.size(); ++i) {
                PatchPlan plan;
                const auto hs = site.resolve(pairs[i].clean_map);
                if (kind == BaselineKind::zero) {
                    plan.zero(hs);
                } else {
                    plan.replace(hs, donor_acts[i].at(HookSite::residual(l, hs.position)));
                }
                jobs.push_back(pair_job(pairs[i], std::move(plan), {}));
            }
            r.cells.push_back(execute(model, jobs, id, r.kind + ":" + site.key(), cond, opts, lexicon, CellInterval::wilson));
        } catch (const Error& e) {
            r.cells.push_back(failed_cell(id, cond, e.what()));
            r.failures.push_back(id + ": " + e.what());
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Steering

std::vector<Scheme> build_schemes(const std::vector<corpus::Couplet>& couplets, const Tokenizer& tokenizer,
                                  const phonology::PronunciationLexicon& lexicon, std::size_t count, std::size_t fit,
                                  std::size_t heldout) {
    std::map<std::string, Scheme> groups;
    std::map<std::string, std::map<std::string, std::size_t>> word_counts;
    for (const auto& c : couplets) {
        const auto keys = phonology::rhyme_key(c.r1, lexicon);
        if (!keys || keys->empty()) continue;
        const auto name = phonology::key_to_string(keys->front());
        SchemePrompt sp;
        sp.id = c.id;
        sp.tokens = tokenizer.encode(corpus::truncation_prompt(c));
        try {
            sp.map = corpus::resolve_positions(sp.tokens, tokenizer);
        } catch (const Error&) {
            continue;
        }
        sp.rhyme_word = c.r1;
        auto& g = groups[name];
        g.name = name;
        ++word_counts[name][phonology::normalize_word(c.r1)];
        (c.split == "validation" ? g.heldout : g.fit).push_back(std::move(sp));
    }
    std::vector<Scheme> eligible;
    for (auto& [name, g] : groups) {
        if (g.fit.size() < fit || g.heldout.size() < heldout) continue;
        g.fit.resize(fit);
        g.heldout.resize(heldout);
        std::size_t best = 0;
        for (const auto& [w, n] : word_counts[name]) {
            if (n > best) {
                best = n;
                g.word = w;
            }
        }
        eligible.push_back(std::move(g));
    }
    std::stable_sort(eligible.begin(), eligible.end(), [](const Scheme& a, const Scheme& b) {
        return a.fit.size() + a.heldout.size() > b.fit.size() + b.heldout.size();
    });
    if (eligible.size() < count) {
        throw ValidationError("only " + std::to_string(eligible.size()) + " rhyme schemes have " + std::to_string(fit) +
                              " fit and " + std::to_string(heldout) + " held-out prompts; " + std::to_string(count) +
                              " requested");
    }
    eligible.resize(count);
    return eligible;
}

void to_json(nlohmann::json& j, const SteeringVector& v) {
    j = {{"source", v.source},         {"target", v.target},         {"layer", v.layer},
         {"position", v.position.to_json()}, {"vector", v.vector},   {"source_count", v.source_count},
         {"target_count", v.target_count}};
}

void from_json(const nlohmann::json& j, SteeringVector& v) {
    v.source = j.at("source").get<std::string>();
    v.target = j.at("target").get<std::string>();
    v.layer = j.at("layer").get<int>();
    v.position = RelPosition::parse(j.at("position"));
    v.vector = j.at("vector").get<std::vector<float>>();
    v.source_count = j.value("source_count", std::size_t{0});
    v.target_count = j.value("target_count", std::size_t{0});
}

namespace {

std::vector<double> mean_activation(const backend::Model& model, const std::vector<SchemePrompt>& prompts, int layer,
                                    const RelPosition& position) {
    if (prompts.empty()) throw ValidationError("steering: empty prompt set");
    std::vector<double> acc(model.spec().hidden, 0.0);
    for (const auto& p : prompts) {
        const auto site = HookSite::residual(layer, p.map.absolute(position.resolve(p.map)));
        const auto st = model.capture(p.tokens, std::vector<HookSite>{site});
        const auto& v = st.at(site);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
    }
    for (auto& x : acc) x /= static_cast<double>(prompts.size());
    return acc;
}

}  // namespace

SteeringVector fit_steering_vector(const backend::Model& model, const std::vector<SchemePrompt>& source,
                                   const std::vector<SchemePrompt>& target, int layer, const RelPosition& position,
                                   const std::string& source_name, const std::string& target_name) {
    const auto ms = mean_activation(model, source, layer, position);
    const auto mt = mean_activation(model, target, layer, position);
    SteeringVector v{source_name, target_name, layer, position, {}, source.size(), target.size()};
    v.vector.resize(ms.size());
    for (std::size_t i = 0; i < ms.size(); ++i) v.vector[i] = static_cast<float>(mt[i] - ms[i]);
    return v;
}

SteeringVector SchemeMeans::vector(std::size_t s, std::size_t t, std::size_t position_index, std::size_t layer_index) const {
    const auto& a = means.at(s).at(position_index).at(layer_index);
    const auto& b = means.at(t).at(position_index).at(layer_index);
    SteeringVector v{schemes.at(s), schemes.at(t), layers.at(layer_index), positions.at(position_index), {}, counts.at(s),
                     counts.at(t)};
    v.vector.resize(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) v.vector[i] = b[i] - a[i];
    return v;
}

SchemeMeans fit_scheme_means(const backend::Model& model, const std::vector<Scheme>& schemes,
                             const std::vector<RelPosition>& positions, const std::vector<int>& layers) {
    SchemeMeans m;
    m.layers = layers;
    m.positions = positions;
    const std::size_t d = model.spec().hidden;
    for (const auto& s : schemes) {
        if (s.fit.empty()) throw ValidationError("scheme " + s.name + " has no fit prompts");
        m.schemes.push_back(s.name);
        m.counts.push_back(s.fit.size());
        std::vector<std::vector<std::vector<double>>> acc(positions.size(),
                                                          std::vector<std::vector<double>>(layers.size(), std::vector<double>(d)));
        for (const auto& p : s.fit) {
            std::vector<HookSite> hs;
            for (const auto& pos : positions) {
                for (int l : layers) hs.push_back(HookSite::residual(l, p.map.absolute(pos.resolve(p.map))));
            }
            const auto st = model.capture(p.tokens, hs);
            std::size_t k = 0;
            for (std::size_t pi = 0; pi < positions.size(); ++pi) {
                for (std::size_t li = 0; li < layers.size(); ++li, ++k) {
                    const auto& v = st.at(hs[k]);
                    for (std::size_t i = 0; i < d; ++i) acc[pi][li][i] += v[i];
                }
            }
        }
        auto& out = m.means.emplace_back(positions.size(), std::vector<std::vector<float>>(layers.size()));
        for (std::size_t pi = 0; pi < positions.size(); ++pi) {
            for (std::size_t li = 0; li < layers.size(); ++li) {
                out[pi][li].resize(d);
                for (std::size_t i = 0; i < d; ++i) {
                    out[pi][li][i] = static_cast<float>(acc[pi][li][i] / static_cast<double>(s.fit.size()));
                }
            }
        }
    }
    return m;
}

namespace {

std::vector<std::pair<std::size_t, std::size_t>> scheme_pairs_for(std::size_t n, std::size_t max_pairs) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t t = 0; t < n; ++t) {
            if (s != t) out.emplace_back(s, t);
        }
    }
    if (max_pairs && out.size() > max_pairs) out.resize(max_pairs);
    return out;
}

}  // namespace

CellResult steer_cell(const backend::Model& model, const std::vector<Scheme>& schemes, const SchemeMeans& means,
                      std::size_t position_index, std::size_t layer_index, double alpha, const RunOptions& opts,
                      const phonology::PronunciationLexicon& lexicon, std::size_t max_scheme_pairs,
                      const std::string& cell_id, nlohmann::json condition) {
    if (!std::isfinite(alpha)) throw ValidationError("steering alpha must be finite");
    if (schemes.size() != means.schemes.size()) throw ValidationError("steering: scheme means do not match schemes");
    const SiteSpec site{means.layers.at(layer_index), means.positions.at(position_index)};
    std::vector<Job> jobs;
    for (auto [s, t] : scheme_pairs_for(schemes.size(), max_scheme_pairs)) {
        const auto v = means.vector(s, t, position_index, layer_index);
        for (const auto& p : schemes[s].heldout) {
            Job j;
            j.cluster = schemes[s].name + "->" + schemes[t].name;
            j.unit_id = p.id + ">" + schemes[t].name;
            j.tokens = &p.tokens;
            j.target = schemes[t].word;
            j.reference = schemes[s].word;
            j.plan.add(site.resolve(p.map), v.vector, static_cast<float>(alpha));
            jobs.push_back(std::move(j));
        }
    }
    condition["sites"] = sites_json({site});
    condition["alpha"] = alpha;
    condition["max_scheme_pairs"] = max_scheme_pairs;
    return execute(model, jobs, cell_id, site.key(), std::move(condition), opts, lexicon, CellInterval::cluster_bootstrap);
}

SweepResult steered_sweep(const backend::Model& model, const std::vector<Scheme>& schemes, const SchemeMeans& means,
                          double alpha, const RunOptions& opts, const phonology::PronunciationLexicon& lexicon,
                          std::size_t max_scheme_pairs) {
    if (!std::isfinite(alpha)) throw ValidationError("steering alpha must be finite");
    SweepResult r;
    r.kind = "steer_sweep";
    r.layers = means.layers;
    r.positions = means.positions;
    for (std::size_t pi = 0; pi < means.positions.size(); ++pi) {
        for (std::size_t li = 0; li < means.layers.size(); ++li) {
            const auto id = sweep_cell_id(r.kind, means.positions[pi], means.layers[li]);
            nlohmann::json cond = {{"kind", "steer"}};
            try {
                r.cells.push_back(steer_cell(model, schemes, means, pi, li, alpha, opts, lexicon, max_scheme_pairs, id, cond));
            } catch (const Error& e) {
                r.cells.push_back(failed_cell(id, cond, e.what()));
                r.failures.push_back(id + ": " + e.what());
            }
        }
    }
    return r;
}

}  // namespace plansite::interventions
