#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "plansite/circuits.hpp"
#include "plansite/common.hpp"
#include "plansite/random.hpp"

namespace plansite::circuits {

using backend::HookSite;
using backend::PatchPlan;
using corpus::PromptPair;
using corpus::RelPosition;
using interventions::CellResult;
using interventions::SiteSpec;

double HeadRanking::score(int layer, int head) const {
    if (layer < first_layer || layer > last_layer || head < 0 || static_cast<std::size_t>(head) >= heads) {
        throw RangeError("head (" + std::to_string(layer) + ", " + std::to_string(head) + ") outside ranking");
    }
    return grid[static_cast<std::size_t>(layer - first_layer) * heads + static_cast<std::size_t>(head)];
}

std::vector<HeadRef> HeadRanking::top(std::size_t k) const {
    if (k > order.size()) {
        throw ValidationError("k=" + std::to_string(k) + " exceeds the " + std::to_string(order.size()) +
                              " heads in layers " + std::to_string(first_layer) + "-" + std::to_string(last_layer));
    }
    std::vector<HeadRef> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back({order[i].layer, order[i].head});
    return out;
}

void to_json(nlohmann::json& j, const HeadRanking& r) {
    nlohmann::json order = nlohmann::json::array();
    for (const auto& s : r.order) order.push_back({{"layer", s.layer}, {"head", s.head}, {"score", s.score}});
    j = {{"first_layer", r.first_layer}, {"last_layer", r.last_layer}, {"heads", r.heads}, {"query", r.query.to_json()},
         {"key", r.key.to_json()},       {"order", order},             {"grid", r.grid}};
}

void from_json(const nlohmann::json& j, HeadRanking& r) {
    r.first_layer = j.at("first_layer").get<int>();
    r.last_layer = j.at("last_layer").get<int>();
    r.heads = j.at("heads").get<std::size_t>();
    r.query = RelPosition::parse(j.at("query"));
    r.key = RelPosition::parse(j.at("key"));
    r.grid = j.at("grid").get<std::vector<double>>();
    r.order.clear();
    for (const auto& s : j.at("order")) r.order.push_back({s.at("layer").get<int>(), s.at("head").get<int>(), s.at("score").get<double>()});
}

namespace {

using KeyFn = std::function<std::size_t(const PromptPair&, const corpus::PositionMap&, const std::vector<TokenId>&)>;

HeadRanking rank_by(const backend::Model& model, const std::vector<PromptPair>& pairs, int first_layer, int last_layer,
                    const RelPosition& query, const RelPosition& key, const KeyFn& key_index) {
    if (pairs.empty()) throw ValidationError("rank_heads: no pairs");
    const auto L = static_cast<int>(model.spec().layers);
    if (first_layer < 0 || last_layer >= L || first_layer > last_layer) {
        throw RangeError("layer range " + std::to_string(first_layer) + "-" + std::to_string(last_layer) +
                         " outside the model's " + std::to_string(L) + " layers");
    }
    HeadRanking r;
    r.first_layer = first_layer;
    r.last_layer = last_layer;
    r.heads = model.spec().heads;
    r.query = query;
    r.key = key;
    const std::size_t nl = static_cast<std::size_t>(last_layer - first_layer + 1);
    r.grid.assign(nl * r.heads, 0.0);
    for (const auto& p : pairs) {
        for (int side = 0; side < 2; ++side) {
            const auto& tokens = side ? p.corrupt_tokens : p.clean_tokens;
            const auto& map = side ? p.corrupt_map : p.clean_map;
            const auto q = map.absolute(query.resolve(map));
            const auto k = key_index(p, map, tokens);
            if (q >= tokens.size() || k > q) {
                throw RangeError("pair " + p.pair_id + ": query/key positions not inside the prompt");
            }
            const auto am = model.attention_weights(tokens, first_layer, last_layer);
            for (int l = first_layer; l <= last_layer; ++l) {
                for (std::size_t h = 0; h < r.heads; ++h) {
                    r.grid[static_cast<std::size_t>(l - first_layer) * r.heads + h] += am.at(l, static_cast<int>(h), q, k);
                }
            }
        }
    }
    for (auto& g : r.grid) g /= static_cast<double>(2 * pairs.size());
    for (int l = first_layer; l <= last_layer; ++l) {
        for (std::size_t h = 0; h < r.heads; ++h) {
            r.order.push_back({l, static_cast<int>(h), r.grid[static_cast<std::size_t>(l - first_layer) * r.heads + h]});
        }
    }
    std::sort(r.order.begin(), r.order.end(), [](const HeadScore& a, const HeadScore& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.layer != b.layer) return a.layer < b.layer;
        return a.head < b.head;
    });
    return r;
}

}  // namespace

HeadRanking rank_heads(const backend::Model& model, const std::vector<PromptPair>& pairs, int first_layer, int last_layer,
                       const RelPosition& query, const RelPosition& key) {
    return rank_by(model, pairs, first_layer, last_layer, query, key,
                   [&](const PromptPair&, const corpus::PositionMap& m, const std::vector<TokenId>&) {
                       return m.absolute(key.resolve(m));
                   });
}

HeadRanking rank_heads_to_comma(const backend::Model& model, const std::vector<PromptPair>& pairs, int first_layer,
                                int last_layer) {
    const auto& tok = model.tokenizer();
    return rank_by(model, pairs, first_layer, last_layer, RelPosition::at(0), RelPosition::at(-1),
                   [&](const PromptPair& p, const corpus::PositionMap& m, const std::vector<TokenId>& tokens) {
                       if (m.comma_newline_fused || m.newline_index == 0 ||
                           tok.token_text(tokens[m.newline_index - 1]).find(',') == std::string::npos) {
                           throw UnsupportedError("no comma position in pair " + p.pair_id);
                       }
                       return m.newline_index - 1;
                   });
}

std::string to_string(HeadSetKind k) {
    switch (k) {
        case HeadSetKind::topk: return "topk";
        case HeadSetKind::random: return "random";
        case HeadSetKind::comma: return "comma";
    }
    return "topk";
}

HeadSetKind head_set_kind_from_string(const std::string& s) {
    if (s == "topk") return HeadSetKind::topk;
    if (s == "random") return HeadSetKind::random;
    if (s == "comma") return HeadSetKind::comma;
    throw ValidationError("unknown head set kind: " + s);
}

void to_json(nlohmann::json& j, const HeadSet& s) {
    nlohmann::json heads = nlohmann::json::array();
    for (const auto& h : s.heads) heads.push_back({h.layer, h.head});
    j = {{"heads", heads}, {"provenance", to_string(s.provenance)}};
    if (s.provenance == HeadSetKind::random) j["seed"] = s.seed;
}

HeadSet topk_set(const HeadRanking& ranking, std::size_t k) { return HeadSet{ranking.top(k), HeadSetKind::topk, 0}; }

HeadSet control_head_set(const HeadRanking& ranking, std::size_t k, HeadSetKind kind, std::uint64_t seed,
                         const backend::ModelSpec& spec, const HeadRanking* comma_ranking) {
    if (ranking.last_layer >= static_cast<int>(spec.layers) || ranking.heads != spec.heads) {
        throw ValidationError("ranking does not match model " + spec.model_id);
    }
    switch (kind) {
        case HeadSetKind::topk: return topk_set(ranking, k);
        case HeadSetKind::comma:
            if (!comma_ranking) throw UnsupportedError("no comma position: comma ranking unavailable");
            return HeadSet{comma_ranking->top(k), HeadSetKind::comma, 0};
        case HeadSetKind::random: {
            const auto excluded = ranking.top(k);
            const std::set<HeadRef> ex(excluded.begin(), excluded.end());
            std::vector<HeadRef> pool;
            for (int l = ranking.first_layer; l <= ranking.last_layer; ++l) {
                for (std::size_t h = 0; h < ranking.heads; ++h) {
                    const HeadRef r{l, static_cast<int>(h)};
                    if (!ex.count(r)) pool.push_back(r);
                }
            }
            if (pool.size() < k) {
                throw ValidationError("only " + std::to_string(pool.size()) + " heads remain after excluding the top-" +
                                      std::to_string(k));
            }
            Rng rng(seed);
            for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.index(pool.size() - i)]);
            pool.resize(k);
            std::sort(pool.begin(), pool.end());
            return HeadSet{pool, HeadSetKind::random, seed};
        }
    }
    throw ValidationError("unknown head set kind");
}

Reference full_residual_reference(const backend::Model& model, const std::vector<PromptPair>& pairs,
                                  const interventions::RunOptions& opts, const phonology::PronunciationLexicon& lexicon,
                                  const RelPosition& position) {
    std::vector<int> layers(model.spec().layers);
    for (std::size_t l = 0; l < layers.size(); ++l) layers[l] = static_cast<int>(l);
    const auto sweep = interventions::layer_position_sweep(model, pairs, {position}, layers, opts, lexicon);
    std::optional<Reference> best;
    for (const auto& c : sweep.cells) {
        if (!c.failed && (!best || c.rate > best->rate)) best = Reference{c.rate, c.cell_id};
    }
    if (!best) throw ValidationError("full-residual reference: every layer failed");
    return *best;
}

void to_json(nlohmann::json& j, const PathPatchResult& r) {
    nlohmann::json rec = nlohmann::json::array();
    for (const auto& x : r.recovered) rec.push_back(x ? nlohmann::json(*x) : nlohmann::json());
    j = {{"strategy", r.strategy}, {"ks", r.ks}, {"cells", r.cells}, {"recovered", rec}, {"failures", r.failures}};
    j["reference"] = r.reference ? nlohmann::json{{"rate", r.reference->rate}, {"cell_id", r.reference->cell_id}}
                                 : nlohmann::json();
}

std::vector<SiteSpec> head_sites(const HeadSet& s, const RelPosition& pos) {
    std::vector<SiteSpec> out;
    for (const auto& h : s.heads) out.push_back({h.layer, pos, backend::Component::attention_head, h.head});
    return out;
}

namespace {

void check_unique(const HeadSet& s, const backend::ModelSpec& spec) {
    const std::set<HeadRef> u(s.heads.begin(), s.heads.end());
    if (u.size() != s.heads.size()) throw ValidationError("head set contains duplicates");
    for (const auto& h : s.heads) {
        if (h.layer < 0 || static_cast<std::size_t>(h.layer) >= spec.layers || h.head < 0 ||
            static_cast<std::size_t>(h.head) >= spec.heads) {
            throw RangeError("head (" + std::to_string(h.layer) + ", " + std::to_string(h.head) + ") invalid for model");
        }
    }
}

std::size_t pair_index(const std::vector<PromptPair>& pairs, const PromptPair& p) {
    return static_cast<std::size_t>(&p - pairs.data());
}

/// Runs one cell per site set; `value` supplies the replacement vector for (pair index, site).
PathPatchResult run_site_sets(const backend::Model& model, const std::vector<PromptPair>& pairs,
                              const std::vector<std::vector<SiteSpec>>& sets, const std::vector<std::size_t>& ks,
                              const std::vector<nlohmann::json>& descriptors,
                              const std::function<std::vector<float>(std::size_t, const SiteSpec&)>& value,
                              const std::string& strategy, const interventions::RunOptions& opts,
                              const phonology::PronunciationLexicon& lexicon, interventions::CellInterval interval,
                              const std::optional<Reference>& reference) {
    PathPatchResult r;
    r.strategy = strategy;
    r.ks = ks;
    r.reference = reference;
    for (std::size_t i = 0; i < sets.size(); ++i) {
        const auto& sites = sets[i];
        const std::string id = strategy + "/k=" + std::to_string(ks[i]);
        nlohmann::json cond = {{"kind", strategy}, {"k", ks[i]}, {"set", descriptors[i]}};
        nlohmann::json sj = nlohmann::json::array();
        for (const auto& s : sites) sj.push_back(s);
        cond["sites"] = sj;
        try {
            auto cell = interventions::run_cell(
                model, pairs,
                [&](const PromptPair& p) {
                    PatchPlan plan;
                    for (const auto& s : sites) plan.replace(s.resolve(p.clean_map), value(pair_index(pairs, p), s));
                    return plan;
                },
                id, interventions::sites_key(sites), cond, opts, lexicon, interval);
            r.cells.push_back(std::move(cell));
        } catch (const Error& e) {
            CellResult failed;
            failed.cell_id = id;
            failed.condition = cond;
            failed.failed = true;
            failed.error = e.what();
            r.cells.push_back(std::move(failed));
            r.failures.push_back(id + ": " + e.what());
        }
        const auto& c = r.cells.back();
        r.recovered.push_back(!c.failed && reference && reference->rate > 0 ? std::optional<double>(c.rate / reference->rate)
                                                                             : std::nullopt);
    }
    return r;
}

/// Corrupt activations at the union of the given sites, per pair.
std::vector<backend::ActivationStore> corrupt_union(const backend::Model& model, const std::vector<PromptPair>& pairs,
                                                    const std::vector<std::vector<SiteSpec>>& sets) {
    std::vector<SiteSpec> all;
    for (const auto& s : sets) {
        for (const auto& site : s) {
            if (std::find(all.begin(), all.end(), site) == all.end()) all.push_back(site);
        }
    }
    std::vector<backend::ActivationStore> out;
    for (const auto& p : pairs) {
        interventions::check_aligned(p, all);
        std::vector<HookSite> hs;
        for (const auto& s : all) hs.push_back(s.resolve(p.corrupt_map));
        out.push_back(model.capture(p.corrupt_tokens, hs));
    }
    return out;
}

}  // namespace

PathPatchResult head_set_patch(const backend::Model& model, const std::vector<PromptPair>& pairs,
                               const std::vector<HeadSet>& sets, const RelPosition& position,
                               const interventions::RunOptions& opts, const phonology::PronunciationLexicon& lexicon,
                               const std::optional<Reference>& reference, const std::string& strategy) {
    std::vector<std::vector<SiteSpec>> site_sets;
    std::vector<std::size_t> ks;
    std::vector<nlohmann::json> desc;
    for (const auto& s : sets) {
        check_unique(s, model.spec());
        site_sets.push_back(head_sites(s, position));
        ks.push_back(s.heads.size());
        desc.push_back(s);
    }
    const auto corrupt = corrupt_union(model, pairs, site_sets);
    return run_site_sets(
        model, pairs, site_sets, ks, desc,
        [&](std::size_t i, const SiteSpec& s) { return corrupt[i].at(s.resolve(pairs[i].corrupt_map)); }, strategy, opts,
        lexicon, interventions::CellInterval::cluster_bootstrap, reference);
}

PathPatchResult topk_head_patch(const backend::Model& model, const std::vector<PromptPair>& pairs,
                                const HeadRanking& ranking, const std::vector<std::size_t>& ks,
                                const RelPosition& position, const interventions::RunOptions& opts,
                                const phonology::PronunciationLexicon& lexicon, const std::optional<Reference>& reference) {
    std::vector<HeadSet> sets;
    for (auto k : ks) sets.push_back(topk_set(ranking, k));
    return head_set_patch(model, pairs, sets, position, opts, lexicon, reference, "topk_heads");
}

std::string to_string(Stage1Mode m) { return m == Stage1Mode::full_column ? "full_column" : "single_layer"; }

Stage1Mode stage1_mode_from_string(const std::string& s) {
    if (s == "full_column") return Stage1Mode::full_column;
    if (s == "single_layer") return Stage1Mode::single_layer;
    throw ValidationError("unknown stage-1 mode: " + s);
}

void to_json(nlohmann::json& j, const PathOptions& o) {
    j = {{"source", o.source.to_json()}, {"dest", o.dest.to_json()}, {"mode", to_string(o.mode)}, {"stage1_layer", o.stage1_layer}};
}

void from_json(const nlohmann::json& j, PathOptions& o) {
    PathOptions d;
    o.source = j.contains("source") ? RelPosition::parse(j.at("source")) : d.source;
    o.dest = j.contains("dest") ? RelPosition::parse(j.at("dest")) : d.dest;
    o.mode = stage1_mode_from_string(j.value("mode", to_string(d.mode)));
    o.stage1_layer = j.value("stage1_layer", d.stage1_layer);
}

interventions::CellResult path_patch_cell(const backend::Model& model, const std::vector<PromptPair>& pairs,
                                          const HeadSet& set, const PathOptions& path,
                                          const interventions::RunOptions& opts,
                                          const phonology::PronunciationLexicon& lexicon, const std::string& cell_id,
                                          nlohmann::json condition) {
    const auto& spec = model.spec();
    check_unique(set, spec);
    const auto sites = head_sites(set, path.dest);
    int lowest = static_cast<int>(spec.layers);
    for (const auto& s : sites) lowest = std::min(lowest, s.layer);
    std::vector<int> source_layers;
    if (path.mode == Stage1Mode::full_column) {
        for (std::size_t l = 0; l < spec.layers; ++l) source_layers.push_back(static_cast<int>(l));
    } else if (!sites.empty()) {
        const int sl = path.stage1_layer >= 0 ? path.stage1_layer : lowest - 1;
        if (sl < 0 || sl >= static_cast<int>(spec.layers)) {
            throw RangeError("single-layer stage 1 needs a source layer below every candidate head");
        }
        source_layers.push_back(sl);
    }

    // Stage 1: clean run with only the source residual corrupted; cache head outputs at dest.
    std::vector<backend::ActivationStore> cached;
    for (const auto& p : pairs) {
        if (sites.empty()) {
            cached.emplace_back();
            continue;
        }
        std::vector<SiteSpec> src;
        for (int l : source_layers) src.push_back({l, path.source});
        interventions::check_aligned(p, src);
        std::vector<HookSite> src_hs;
        for (const auto& s : src) src_hs.push_back(s.resolve(p.corrupt_map));
        const auto corrupt = model.capture(p.corrupt_tokens, src_hs);
        PatchPlan stage1;
        for (const auto& s : src) stage1.replace(s.resolve(p.clean_map), corrupt.at(s.resolve(p.corrupt_map)));
        std::vector<HookSite> dest;
        for (const auto& s : sites) {
            dest.push_back(s.resolve(p.clean_map));
            if (dest.back().position >= p.clean_tokens.size()) {
                throw RangeError("pair " + p.pair_id + ": destination beyond the prompt");
            }
        }
        if (src_hs.front().position >= dest.front().position) {
            throw ValidationError("pair " + p.pair_id + ": source must precede destination");
        }
        backend::ForwardOptions fo;
        fo.plan = &stage1;
        fo.capture = dest;
        cached.push_back(model.forward(p.clean_tokens, fo).captures);
    }

    // Stage 2: unmodified clean prompt with the cached outputs substituted.
    condition["set"] = set;
    condition["path"] = path;
    nlohmann::json sj = nlohmann::json::array();
    for (const auto& s : sites) sj.push_back(s);
    condition["sites"] = sj;
    return interventions::run_cell(
        model, pairs,
        [&](const PromptPair& p) {
            PatchPlan plan;
            const auto i = pair_index(pairs, p);
            for (const auto& s : sites) plan.replace(s.resolve(p.clean_map), cached[i].at(s.resolve(p.clean_map)));
            return plan;
        },
        cell_id, interventions::sites_key(sites), std::move(condition), opts, lexicon);
}

PathPatchResult two_stage_path_patch(const backend::Model& model, const std::vector<PromptPair>& pairs,
                                     const std::vector<HeadSet>& sets, const PathOptions& path,
                                     const interventions::RunOptions& opts,
                                     const phonology::PronunciationLexicon& lexicon,
                                     const std::optional<Reference>& reference) {
    PathPatchResult r;
    r.strategy = "path_patch";
    r.reference = reference;
    for (const auto& set : sets) {
        const std::string id = "path_patch/k=" + std::to_string(set.heads.size());
        r.ks.push_back(set.heads.size());
        nlohmann::json cond = {{"kind", "path_patch"}, {"k", set.heads.size()}};
        try {
            r.cells.push_back(path_patch_cell(model, pairs, set, path, opts, lexicon, id, cond));
        } catch (const Error& e) {
            CellResult failed;
            failed.cell_id = id;
            failed.condition = cond;
            failed.failed = true;
            failed.error = e.what();
            r.cells.push_back(std::move(failed));
            r.failures.push_back(id + ": " + e.what());
        }
        const auto& c = r.cells.back();
        r.recovered.push_back(!c.failed && reference && reference->rate > 0 ? std::optional<double>(c.rate / reference->rate)
                                                                             : std::nullopt);
    }
    return r;
}

std::vector<LayerScore> rank_mlp_layers(const backend::Model& model, const std::vector<PromptPair>& pairs,
                                        const RelPosition& position) {
    if (pairs.empty()) throw ValidationError("rank_mlp_layers: no pairs");
    const auto L = model.spec().layers;
    std::vector<SiteSpec> sites;
    for (std::size_t l = 0; l < L; ++l) sites.push_back({static_cast<int>(l), position, backend::Component::mlp_output});
    std::vector<double> score(L, 0.0);
    for (const auto& p : pairs) {
        interventions::check_aligned(p, sites);
        std::vector<HookSite> ch, xh;
        for (const auto& s : sites) {
            ch.push_back(s.resolve(p.clean_map));
            xh.push_back(s.resolve(p.corrupt_map));
        }
        const auto clean = model.capture(p.clean_tokens, ch);
        const auto corrupt = model.capture(p.corrupt_tokens, xh);
        for (std::size_t l = 0; l < L; ++l) {
            const auto& a = clean.at(ch[l]);
            const auto& b = corrupt.at(xh[l]);
            double ss = 0;
            for (std::size_t i = 0; i < a.size(); ++i) ss += (static_cast<double>(a[i]) - b[i]) * (static_cast<double>(a[i]) - b[i]);
            score[l] += std::sqrt(ss);
        }
    }
    std::vector<LayerScore> out;
    for (std::size_t l = 0; l < L; ++l) out.push_back({static_cast<int>(l), score[l] / static_cast<double>(pairs.size())});
    std::stable_sort(out.begin(), out.end(), [](const LayerScore& a, const LayerScore& b) { return a.score > b.score; });
    return out;
}

PathPatchResult topk_mlp_patch(const backend::Model& model, const std::vector<PromptPair>& pairs,
                               const std::vector<LayerScore>& ranking, const std::vector<std::size_t>& ks,
                               const RelPosition& position, const interventions::RunOptions& opts,
                               const phonology::PronunciationLexicon& lexicon, const std::optional<Reference>& reference) {
    std::vector<std::vector<SiteSpec>> site_sets;
    std::vector<nlohmann::json> desc;
    for (auto k : ks) {
        if (k > ranking.size()) {
            throw ValidationError("k=" + std::to_string(k) + " exceeds the " + std::to_string(ranking.size()) + " ranked layers");
        }
        std::vector<SiteSpec> s;
        nlohmann::json layers = nlohmann::json::array();
        for (std::size_t i = 0; i < k; ++i) {
            s.push_back({ranking[i].layer, position, backend::Component::mlp_output});
            layers.push_back(ranking[i].layer);
        }
        site_sets.push_back(std::move(s));
        desc.push_back({{"mlp_layers", layers}});
    }
    const auto corrupt = corrupt_union(model, pairs, site_sets);
    return run_site_sets(
        model, pairs, site_sets, ks, desc,
        [&](std::size_t i, const SiteSpec& s) { return corrupt[i].at(s.resolve(pairs[i].corrupt_map)); }, "mlp_control",
        opts, lexicon, interventions::CellInterval::wilson, reference);
}

void to_json(nlohmann::json& j, const HeadGrid& g) {
    j = {{"first_layer", g.first_layer}, {"heads", g.heads}, {"cells", g.cells}, {"failures", g.failures}};
}

HeadGrid single_head_sweep(const backend::Model& model, const std::vector<PromptPair>& pairs, int first_layer,
                           int last_layer, const RelPosition& position, const interventions::RunOptions& opts,
                           const phonology::PronunciationLexicon& lexicon) {
    const auto& spec = model.spec();
    if (first_layer < 0 || last_layer >= static_cast<int>(spec.layers) || first_layer > last_layer) {
        throw RangeError("layer range outside the model");
    }
    std::vector<std::vector<SiteSpec>> site_sets;
    std::vector<std::size_t> ks;
    std::vector<nlohmann::json> desc;
    for (int l = first_layer; l <= last_layer; ++l) {
        for (std::size_t h = 0; h < spec.heads; ++h) {
            site_sets.push_back({SiteSpec{l, position, backend::Component::attention_head, static_cast<int>(h)}});
            ks.push_back(1);
            desc.push_back(HeadSet{{HeadRef{l, static_cast<int>(h)}}, HeadSetKind::topk, 0});
        }
    }
    const auto corrupt = corrupt_union(model, pairs, site_sets);
    auto r = run_site_sets(
        model, pairs, site_sets, ks, desc,
        [&](std::size_t i, const SiteSpec& s) { return corrupt[i].at(s.resolve(pairs[i].corrupt_map)); }, "single_head",
        opts, lexicon, interventions::CellInterval::cluster_bootstrap, std::nullopt);
    HeadGrid g;
    g.first_layer = first_layer;
    g.heads = spec.heads;
    for (std::size_t i = 0; i < r.cells.size(); ++i) {
        const auto& s = site_sets[i].front();
        r.cells[i].cell_id = "single_head/L" + std::to_string(s.layer) + "H" + std::to_string(s.head);
    }
    g.cells = std::move(r.cells);
    g.failures = std::move(r.failures);
    return g;
}

}  // namespace plansite::circuits
