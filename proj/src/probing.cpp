#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>

#include "plansite/probing.hpp"
#include "plansite/random.hpp"

namespace plansite::probing {

using backend::HookSite;
using corpus::RelPosition;

std::string ProbeDataset::cell_label() const { return axis == "lookahead" ? "k=" + std::to_string(k) : position.label(); }

std::size_t ProbeDataset::count(const std::string& split) const {
    return static_cast<std::size_t>(
        std::count_if(examples.begin(), examples.end(), [&](const ProbeExample& e) { return e.split == split; }));
}

namespace {

backend::DecodeParams greedy(std::size_t max_new, bool stop_at_newline) {
    backend::DecodeParams p;
    p.temperature = 0.0;
    p.top_p = 1.0;
    p.max_new_tokens = max_new;
    p.stop_at_newline = stop_at_newline;
    return p;
}

bool has_alnum(const std::string& s) {
    return std::any_of(s.begin(), s.end(), [](unsigned char c) { return std::isalnum(c); });
}

}  // namespace

DatasetBuild build_lookahead_dataset(const backend::Model& model, const std::vector<corpus::GeneralTextSample>& samples,
                                     const std::vector<int>& layers, const std::vector<int>& ks,
                                     const LookaheadOptions& opts, std::vector<std::vector<TokenId>>* completions) {
    if (samples.empty()) throw ValidationError("look-ahead dataset: no samples");
    for (int k : ks) {
        if (k < 0) throw ValidationError("look-ahead k must be non-negative");
    }
    DatasetBuild out;
    const std::size_t d = model.spec().hidden;
    for (int k : ks) {
        for (int l : layers) {
            ProbeDataset ds;
            ds.axis = "lookahead";
            ds.layer = l;
            ds.k = k;
            ds.width = d;
            out.cells.push_back(std::move(ds));
        }
    }
    for (const auto& s : samples) {
        if (s.tokens.empty()) {
            ++out.excluded["empty sample"];
            continue;
        }
        const std::size_t p = s.tokens.size();
        const std::size_t ctx = model.spec().context;
        const std::size_t max_new = ctx > p ? std::min(opts.max_new_tokens, ctx - p) : 0;
        std::vector<HookSite> sites;
        for (std::size_t i = p - 1; i < p + max_new; ++i) {
            for (int l : layers) sites.push_back(HookSite::residual(l, i));
        }
        // Captures ride along with generation; a short continuation falls back to a second pass.
        const auto gen = model.generate(s.tokens, greedy(max_new, false), nullptr, sites);
        std::vector<TokenId> seq = s.tokens;
        seq.insert(seq.end(), gen.continuation.begin(), gen.continuation.end());
        if (completions) completions->push_back(gen.continuation);
        ++out.sequences;
        const std::size_t T = seq.size();
        const auto st = gen.continuation.size() == max_new && gen.captures
                            ? *gen.captures
                            : model.capture(seq, std::vector<HookSite>(sites.begin(), sites.begin() + static_cast<std::ptrdiff_t>((T - p + 1) * layers.size())));
        for (std::size_t ki = 0; ki < ks.size(); ++ki) {
            const auto k = static_cast<std::size_t>(ks[ki]);
            if (T < k + p) {
                ++out.excluded["completion shorter than k=" + std::to_string(k)];
                continue;
            }
            for (std::size_t li = 0; li < layers.size(); ++li) {
                auto& cell = out.cells[ki * layers.size() + li];
                for (std::size_t i = p - 1; i + k < T; ++i) {
                    cell.examples.push_back({st.at(HookSite::residual(layers[li], i)), seq[i + k],
                                             s.doc_id + "@" + std::to_string(i), s.split, ""});
                }
            }
        }
    }
    for (std::size_t ki = 0; ki < ks.size(); ++ki) {
        if (!layers.empty() && out.cells[ki * layers.size()].examples.empty()) {
            throw ValidationError("look-ahead k=" + std::to_string(ks[ki]) + " exceeds every completion length");
        }
    }
    return out;
}

std::optional<std::size_t> final_word_token(std::span<const TokenId> tokens, std::size_t begin, std::size_t end,
                                            const Tokenizer& tokenizer) {
    end = std::min(end, tokens.size());
    std::optional<std::size_t> last;
    for (std::size_t j = end; j > begin; --j) {
        if (has_alnum(tokenizer.token_text(tokens[j - 1]))) {
            last = j - 1;
            break;
        }
    }
    if (!last) return std::nullopt;
    std::size_t j = *last;
    while (j > begin) {
        const auto cur = tokenizer.token_text(tokens[j]);
        if (cur.empty() || std::isspace(static_cast<unsigned char>(cur.front()))) break;
        const auto prev = tokenizer.token_text(tokens[j - 1]);
        const unsigned char tail = prev.empty() ? ' ' : static_cast<unsigned char>(prev.back());
        if (!(std::isalnum(tail) || tail == '\'' || tail == '-')) break;
        --j;
    }
    return j;
}

DatasetBuild build_couplet_dataset(const backend::Model& model, const std::vector<corpus::Couplet>& couplets,
                                   const std::vector<int>& layers, const std::vector<RelPosition>& positions,
                                   const CoupletDatasetOptions& opts, std::vector<std::vector<TokenId>>* completions) {
    if (couplets.empty()) throw ValidationError("couplet dataset: no couplets");
    DatasetBuild out;
    const auto& tok = model.tokenizer();
    const std::size_t d = model.spec().hidden;
    for (const auto& pos : positions) {
        for (int l : layers) {
            ProbeDataset ds;
            ds.axis = "couplet";
            ds.layer = l;
            ds.position = pos;
            ds.width = d;
            out.cells.push_back(std::move(ds));
        }
    }
    for (const auto& c : couplets) {
        const auto prompt = tok.encode(corpus::truncation_prompt(c));
        corpus::PositionMap map;
        try {
            map = corpus::resolve_positions(prompt, tok);
        } catch (const Error&) {
            ++out.excluded["positions unresolved"];
            continue;
        }
        const auto gen = model.generate(prompt, greedy(opts.max_new_tokens, true));
        if (completions) completions->push_back(gen.continuation);
        ++out.sequences;
        if (!gen.stopped) {
            ++out.excluded["no line end"];
            continue;
        }
        std::vector<TokenId> seq = prompt;
        seq.insert(seq.end(), gen.continuation.begin(), gen.continuation.end());
        const auto idx = final_word_token(seq, prompt.size(), seq.size(), tok);
        if (!idx) {
            ++out.excluded["no final word"];
            continue;
        }
        const TokenId label = seq[*idx];
        std::vector<HookSite> sites;
        std::vector<std::size_t> abs(positions.size());
        for (std::size_t pi = 0; pi < positions.size(); ++pi) {
            abs[pi] = map.absolute(positions[pi].resolve(map));
            if (abs[pi] >= seq.size()) continue;
            for (int l : layers) sites.push_back(HookSite::residual(l, abs[pi]));
        }
        const auto st = model.capture(seq, sites);
        for (std::size_t pi = 0; pi < positions.size(); ++pi) {
            if (abs[pi] >= seq.size()) {
                ++out.excluded["completion ends before " + positions[pi].label()];
                continue;
            }
            for (std::size_t li = 0; li < layers.size(); ++li) {
                out.cells[pi * layers.size() + li].examples.push_back(
                    {st.at(HookSite::residual(layers[li], abs[pi])), label, c.id, c.split, c.r1});
            }
        }
    }
    return out;
}

std::string to_string(LabelSpace s) { return s == LabelSpace::observed ? "observed" : "full"; }

LabelSpace label_space_from_string(const std::string& s) {
    if (s == "observed") return LabelSpace::observed;
    if (s == "full") return LabelSpace::full;
    throw ValidationError("unknown label space: " + s);
}

void to_json(nlohmann::json& j, const ProbeHyperparams& h) {
    j = {{"lr", h.lr},
         {"weight_decay", h.weight_decay},
         {"batch_size", h.batch_size},
         {"epochs", h.epochs},
         {"beta1", h.beta1},
         {"beta2", h.beta2},
         {"eps", h.eps},
         {"init_std", h.init_std},
         {"seed", h.seed},
         {"standardize", h.standardize},
         {"label_space", to_string(h.label_space)},
         {"max_labels", h.max_labels}};
}

void from_json(const nlohmann::json& j, ProbeHyperparams& h) {
    ProbeHyperparams d;
    h.lr = j.value("lr", d.lr);
    h.weight_decay = j.value("weight_decay", d.weight_decay);
    h.batch_size = j.value("batch_size", d.batch_size);
    h.epochs = j.value("epochs", d.epochs);
    h.beta1 = j.value("beta1", d.beta1);
    h.beta2 = j.value("beta2", d.beta2);
    h.eps = j.value("eps", d.eps);
    h.init_std = j.value("init_std", d.init_std);
    h.seed = j.value("seed", d.seed);
    h.standardize = j.value("standardize", d.standardize);
    h.label_space = label_space_from_string(j.value("label_space", to_string(d.label_space)));
    h.max_labels = j.value("max_labels", d.max_labels);
}

std::vector<float> LinearProbe::scores(std::span<const float> h) const {
    if (h.size() != width) throw ValidationError("probe input width " + std::to_string(h.size()) + " != " + std::to_string(width));
    std::vector<float> s(labels.size());
    for (std::size_t c = 0; c < labels.size(); ++c) {
        const float* w = W.data() + c * width;
        double acc = b[c];
        for (std::size_t i = 0; i < width; ++i) acc += static_cast<double>(w[i]) * h[i];
        s[c] = static_cast<float>(acc);
    }
    return s;
}

std::vector<double> LinearProbe::apply(std::span<const float> h) const {
    const auto s = scores(h);
    std::vector<double> p(s.size());
    if (s.empty()) return p;
    const double mx = *std::max_element(s.begin(), s.end());
    double z = 0;
    for (std::size_t i = 0; i < s.size(); ++i) z += p[i] = std::exp(s[i] - mx);
    for (auto& x : p) x /= z;
    return p;
}

std::vector<TokenId> LinearProbe::ranked(std::span<const float> h, std::size_t k) const {
    const auto s = scores(h);
    std::vector<std::size_t> idx(s.size());
    std::iota(idx.begin(), idx.end(), 0);
    k = std::min(k, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), [&](std::size_t a, std::size_t b) {
        if (s[a] != s[b]) return s[a] > s[b];
        return labels[a] < labels[b];
    });
    std::vector<TokenId> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back(labels[idx[i]]);
    return out;
}

LinearProbe train_probe(const ProbeDataset& dataset, const ProbeHyperparams& hyper, std::size_t vocab_size) {
    if (hyper.batch_size == 0) throw ValidationError("batch size must be positive");
    if (!(hyper.lr > 0) || !std::isfinite(hyper.lr)) throw ValidationError("learning rate must be positive");
    const std::size_t d = dataset.width;
    std::vector<const ProbeExample*> train;
    for (const auto& e : dataset.examples) {
        if (e.split != "train") continue;
        if (e.h.size() != d) throw ValidationError("probe dataset: vector width mismatch");
        if (e.label < 0 || static_cast<std::size_t>(e.label) >= vocab_size) throw RangeError("probe label outside vocabulary");
        train.push_back(&e);
    }
    if (train.empty()) throw ValidationError("probe dataset " + dataset.cell_label() + ": empty training split");

    LinearProbe probe;
    probe.width = d;
    probe.hyper = hyper;
    if (hyper.label_space == LabelSpace::full) {
        probe.labels.resize(vocab_size);
        std::iota(probe.labels.begin(), probe.labels.end(), 0);
    } else {
        std::map<TokenId, std::size_t> freq;
        for (const auto* e : train) ++freq[e->label];
        std::vector<std::pair<TokenId, std::size_t>> ranked(freq.begin(), freq.end());
        std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
        if (ranked.size() > hyper.max_labels) ranked.resize(hyper.max_labels);
        for (const auto& [t, n] : ranked) probe.labels.push_back(t);
        std::sort(probe.labels.begin(), probe.labels.end());
    }
    const std::size_t C = probe.labels.size();
    std::vector<int> slot(vocab_size, -1);
    for (std::size_t c = 0; c < C; ++c) slot[static_cast<std::size_t>(probe.labels[c])] = static_cast<int>(c);
    std::size_t dropped = 0;
    std::vector<std::pair<const ProbeExample*, int>> rows;
    for (const auto* e : train) {
        const int s = slot[static_cast<std::size_t>(e->label)];
        if (s < 0) {
            ++dropped;
            continue;
        }
        rows.emplace_back(e, s);
    }

    Rng rng(hyper.seed);
    probe.W.resize(C * d);
    for (auto& w : probe.W) w = static_cast<float>(rng.normal() * hyper.init_std);
    probe.b.assign(C, 0.0f);
    std::vector<double> mW(C * d, 0.0), vW(C * d, 0.0), mb(C, 0.0), vb(C, 0.0);
    std::vector<double> gW(C * d), gb(C), p(C);
    // Optimization runs on per-feature standardized inputs; the affine map is folded back into W and b.
    std::vector<double> mu(d, 0.0), sigma(d, 1.0);
    if (hyper.standardize) {
        for (const auto& [ex, y] : rows) {
            for (std::size_t i = 0; i < d; ++i) mu[i] += ex->h[i];
        }
        for (auto& m : mu) m /= static_cast<double>(rows.size());
        std::vector<double> var(d, 0.0);
        for (const auto& [ex, y] : rows) {
            for (std::size_t i = 0; i < d; ++i) var[i] += (ex->h[i] - mu[i]) * (ex->h[i] - mu[i]);
        }
        for (std::size_t i = 0; i < d; ++i) {
            const double sd = std::sqrt(var[i] / static_cast<double>(rows.size()));
            sigma[i] = sd > 1e-12 ? sd : 0.0;
        }
    }
    std::vector<float> zbuf(d);
    auto standardized = [&](const std::vector<float>& h) -> const std::vector<float>& {
        for (std::size_t i = 0; i < d; ++i) zbuf[i] = sigma[i] > 0 ? static_cast<float>((h[i] - mu[i]) / sigma[i]) : 0.0f;
        return zbuf;
    };
    std::size_t step = 0;
    std::vector<std::size_t> order(rows.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
        double epoch_loss = 0;
        for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
            const std::size_t stop = std::min(order.size(), start + hyper.batch_size);
            const double inv = 1.0 / static_cast<double>(stop - start);
            std::fill(gW.begin(), gW.end(), 0.0);
            std::fill(gb.begin(), gb.end(), 0.0);
            for (std::size_t r = start; r < stop; ++r) {
                const auto& [ex, y] = rows[order[r]];
                const auto& x = standardized(ex->h);
                const auto s = probe.scores(x);
                const double mx = *std::max_element(s.begin(), s.end());
                double z = 0;
                for (std::size_t c = 0; c < C; ++c) z += p[c] = std::exp(s[c] - mx);
                epoch_loss += -(s[static_cast<std::size_t>(y)] - mx - std::log(z));
                for (std::size_t c = 0; c < C; ++c) {
                    const double g = (p[c] / z - (static_cast<int>(c) == y ? 1.0 : 0.0)) * inv;
                    gb[c] += g;
                    if (g == 0.0) continue;
                    double* gw = gW.data() + c * d;
                    for (std::size_t i = 0; i < d; ++i) gw[i] += g * x[i];
                }
            }
            ++step;
            const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step));
            auto adamw = [&](float& w, double g, double& m, double& v, bool decay) {
                m = hyper.beta1 * m + (1 - hyper.beta1) * g;
                v = hyper.beta2 * v + (1 - hyper.beta2) * g * g;
                double x = w;
                if (decay) x -= hyper.lr * hyper.weight_decay * x;
                x -= hyper.lr * (m / bc1) / (std::sqrt(v / bc2) + hyper.eps);
                w = static_cast<float>(x);
            };
            for (std::size_t i = 0; i < C * d; ++i) adamw(probe.W[i], gW[i], mW[i], vW[i], true);
            for (std::size_t c = 0; c < C; ++c) adamw(probe.b[c], gb[c], mb[c], vb[c], false);
        }
        const double mean = epoch_loss / static_cast<double>(std::max<std::size_t>(rows.size(), 1));
        probe.loss_history.push_back(mean);
        if (!std::isfinite(mean)) {
            throw TrainingDiverged("probe training diverged at epoch " + std::to_string(epoch + 1), probe.loss_history);
        }
        probe.epochs_completed = epoch + 1;
    }
    for (std::size_t c = 0; c < C; ++c) {
        float* w = probe.W.data() + c * d;
        double shift = 0;
        for (std::size_t i = 0; i < d; ++i) {
            const double wi = sigma[i] > 0 ? w[i] / sigma[i] : 0.0;
            shift += wi * mu[i];
            w[i] = static_cast<float>(wi);
        }
        probe.b[c] = static_cast<float>(probe.b[c] - shift);
    }
    probe.meta = {{"axis", dataset.axis},
                  {"layer", dataset.layer},
                  {"cell", dataset.cell_label()},
                  {"n_train", rows.size()},
                  {"dropped_train", dropped}};
    return probe;
}

void save_probe(const std::filesystem::path& path, const LinearProbe& probe) {
    nlohmann::json j = {{"width", probe.width},
                        {"labels", probe.labels},
                        {"W", probe.W},
                        {"b", probe.b},
                        {"hyperparams", probe.hyper},
                        {"epochs_completed", probe.epochs_completed},
                        {"loss_history", probe.loss_history},
                        {"meta", probe.meta}};
    std::ofstream f(path);
    if (!f) throw IoError("cannot write probe checkpoint " + path.string());
    f << j.dump();
}

LinearProbe load_probe(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read probe checkpoint " + path.string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("probe checkpoint: ") + e.what(), 0);
    }
    LinearProbe p;
    p.width = j.at("width").get<std::size_t>();
    p.labels = j.at("labels").get<std::vector<TokenId>>();
    p.W = j.at("W").get<std::vector<float>>();
    p.b = j.at("b").get<std::vector<float>>();
    p.hyper = j.at("hyperparams").get<ProbeHyperparams>();
    p.epochs_completed = j.at("epochs_completed").get<std::size_t>();
    p.loss_history = j.at("loss_history").get<std::vector<double>>();
    p.meta = j.value("meta", nlohmann::json::object());
    if (p.W.size() != p.labels.size() * p.width || p.b.size() != p.labels.size()) {
        throw ValidationError("probe checkpoint " + path.string() + ": parameter shapes inconsistent");
    }
    return p;
}

void to_json(nlohmann::json& j, const ProbeEval& e) {
    auto bits = [](const std::vector<bool>& v) {
        std::string s;
        for (bool b : v) s += b ? '1' : '0';
        return s;
    };
    j = {{"top1", e.top1},
         {"top5", e.top5},
         {"rhyme", e.rhyme},
         {"rhyme5", e.rhyme5},
         {"n", e.n},
         {"top1_hits", bits(e.top1_hits)},
         {"top5_hits", bits(e.top5_hits)},
         {"rhyme_hits", bits(e.rhyme_hits)},
         {"rhyme5_hits", bits(e.rhyme5_hits)},
         {"record_ids", e.record_ids}};
}

void from_json(const nlohmann::json& j, ProbeEval& e) {
    auto bits = [](const std::string& s) {
        std::vector<bool> v;
        for (char c : s) v.push_back(c == '1');
        return v;
    };
    e.top1 = j.at("top1").get<stats::Interval>();
    e.top5 = j.at("top5").get<stats::Interval>();
    e.rhyme = j.at("rhyme").get<stats::Interval>();
    if (j.contains("rhyme5")) e.rhyme5 = j.at("rhyme5").get<stats::Interval>();
    e.n = j.at("n").get<std::size_t>();
    e.top1_hits = bits(j.value("top1_hits", std::string()));
    e.top5_hits = bits(j.value("top5_hits", std::string()));
    e.rhyme_hits = bits(j.value("rhyme_hits", std::string()));
    e.rhyme5_hits = bits(j.value("rhyme5_hits", std::string()));
    e.record_ids = j.value("record_ids", std::vector<std::string>{});
}

ProbeEval evaluate_predictions(const ProbeDataset& dataset, const std::string& split,
                               const std::function<std::vector<TokenId>(const ProbeExample&)>& top5,
                               const Tokenizer* tokenizer, const phonology::PronunciationLexicon* lexicon,
                               const EvalOptions& opts) {
    if (split == "train" && !opts.allow_train_split) {
        throw ValidationError("refusing to evaluate on the training split without an explicit override");
    }
    ProbeEval ev;
    bool rhyme_ok = tokenizer && lexicon;
    std::size_t t1 = 0, t5 = 0, rh = 0, rh5 = 0;
    const bool identical_counts = opts.policy == phonology::IdenticalWordPolicy::count_identical;
    for (const auto& e : dataset.examples) {
        if (e.split != split) continue;
        const auto pred = top5(e);
        const auto top = std::min<std::size_t>(5, pred.size());
        const bool h1 = !pred.empty() && pred.front() == e.label;
        const bool h5 = std::find(pred.begin(), pred.begin() + static_cast<std::ptrdiff_t>(top), e.label) !=
                        pred.begin() + static_cast<std::ptrdiff_t>(top);
        ev.top1_hits.push_back(h1);
        ev.top5_hits.push_back(h5);
        ev.record_ids.push_back(e.record_id);
        t1 += h1;
        t5 += h5;
        if (e.r1.empty()) rhyme_ok = false;
        if (rhyme_ok) {
            // A prediction equal to the generated word counts under count_identical,
            // even when the generation itself missed r1's rhyme.
            auto hit = [&](TokenId t) {
                if (identical_counts && t == e.label) return true;
                const auto word = phonology::normalize_word(tokenizer->token_text(t));
                return !word.empty() && phonology::rhymes(word, e.r1, *lexicon, opts.policy) == phonology::RhymeVerdict::rhyme;
            };
            const bool hr = !pred.empty() && hit(pred.front());
            bool hr5 = false;
            for (std::size_t i = 0; i < top && !hr5; ++i) hr5 = hit(pred[i]);
            ev.rhyme_hits.push_back(hr);
            ev.rhyme5_hits.push_back(hr5);
            rh += hr;
            rh5 += hr5;
        }
    }
    ev.n = ev.top1_hits.size();
    if (ev.n == 0) throw ValidationError("no " + split + " examples in " + dataset.cell_label());
    ev.top1 = stats::wilson(t1, ev.n, opts.confidence);
    ev.top5 = stats::wilson(t5, ev.n, opts.confidence);
    if (rhyme_ok) {
        ev.rhyme = stats::wilson(rh, ev.n, opts.confidence);
        ev.rhyme5 = stats::wilson(rh5, ev.n, opts.confidence);
    } else {
        ev.rhyme_hits.clear();
        ev.rhyme5_hits.clear();
        ev.rhyme = stats::Interval{};
        ev.rhyme5 = stats::Interval{};
    }
    return ev;
}

ProbeEval evaluate_probe(const LinearProbe& probe, const ProbeDataset& dataset, const Tokenizer* tokenizer,
                         const phonology::PronunciationLexicon* lexicon, const EvalOptions& opts, const std::string& split) {
    return evaluate_predictions(
        dataset, split, [&](const ProbeExample& e) { return probe.ranked(e.h, 5); }, tokenizer, lexicon, opts);
}

double UnigramBaseline::frequency(TokenId t) const {
    auto it = std::lower_bound(counts.begin(), counts.end(), t, [](const auto& a, TokenId v) { return a.first < v; });
    return it != counts.end() && it->first == t ? static_cast<double>(it->second) / static_cast<double>(total) : 0.0;
}

std::vector<TokenId> UnigramBaseline::top(std::size_t k) const {
    auto sorted = counts;
    std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<TokenId> out;
    for (std::size_t i = 0; i < std::min(k, sorted.size()); ++i) out.push_back(sorted[i].first);
    return out;
}

UnigramBaseline build_unigram(const std::vector<std::vector<TokenId>>& completions) {
    std::map<TokenId, std::size_t> freq;
    UnigramBaseline u;
    for (const auto& c : completions) {
        for (TokenId t : c) {
            ++freq[t];
            ++u.total;
        }
    }
    if (u.total == 0) throw ValidationError("unigram baseline: empty completion corpus");
    u.counts.assign(freq.begin(), freq.end());
    return u;
}

ProbeEval unigram_eval(const UnigramBaseline& baseline, const ProbeDataset& dataset, const Tokenizer* tokenizer,
                       const phonology::PronunciationLexicon* lexicon, const EvalOptions& opts, const std::string& split) {
    const auto top5 = baseline.top(5);
    return evaluate_predictions(dataset, split, [&](const ProbeExample&) { return top5; }, tokenizer, lexicon, opts);
}

void to_json(nlohmann::json& j, const GridCell& c) {
    j = {{"layer", c.layer}, {"axis_label", c.axis_label}, {"n_train", c.n_train}, {"final_loss", c.final_loss}, {"eval", c.eval}};
    j["baseline"] = c.baseline ? nlohmann::json(*c.baseline) : nlohmann::json();
}

void from_json(const nlohmann::json& j, GridCell& c) {
    c.layer = j.at("layer").get<int>();
    c.axis_label = j.at("axis_label").get<std::string>();
    c.n_train = j.at("n_train").get<std::size_t>();
    c.final_loss = j.at("final_loss").get<double>();
    c.eval = j.at("eval").get<ProbeEval>();
    if (j.contains("baseline") && !j.at("baseline").is_null()) c.baseline = j.at("baseline").get<ProbeEval>();
}

const GridCell* ProbeGrid::find(int layer, const std::string& axis_label) const {
    for (const auto& c : cells) {
        if (c.layer == layer && c.axis_label == axis_label) return &c;
    }
    return nullptr;
}

void to_json(nlohmann::json& j, const ProbeGrid& g) { j = {{"axis", g.axis}, {"cells", g.cells}}; }

void from_json(const nlohmann::json& j, ProbeGrid& g) {
    g.axis = j.at("axis").get<std::string>();
    g.cells = j.at("cells").get<std::vector<GridCell>>();
}

ProbeGrid train_grid(const DatasetBuild& build, const ProbeHyperparams& hyper, std::size_t vocab_size,
                     const Tokenizer* tokenizer, const phonology::PronunciationLexicon* lexicon,
                     const std::optional<UnigramBaseline>& baseline, const std::filesystem::path& checkpoint_dir,
                     const nlohmann::json& meta) {
    ProbeGrid g;
    for (const auto& ds : build.cells) {
        g.axis = ds.axis;
        auto probe = train_probe(ds, hyper, vocab_size);
        GridCell c;
        c.layer = ds.layer;
        c.axis_label = ds.cell_label();
        c.n_train = probe.meta.value("n_train", std::size_t{0});
        c.final_loss = probe.loss_history.empty() ? 0.0 : probe.loss_history.back();
        c.eval = evaluate_probe(probe, ds, tokenizer, lexicon);
        if (baseline) c.baseline = unigram_eval(*baseline, ds, tokenizer, lexicon);
        if (!checkpoint_dir.empty()) {
            std::filesystem::create_directories(checkpoint_dir);
            for (auto it = meta.begin(); it != meta.end(); ++it) probe.meta[it.key()] = it.value();
            std::string label = c.axis_label;
            std::replace(label.begin(), label.end(), '=', '_');
            save_probe(checkpoint_dir / ("probe_" + ds.axis + "_L" + std::to_string(ds.layer) + "_" + label + ".json"), probe);
        }
        g.cells.push_back(std::move(c));
    }
    return g;
}

void to_json(nlohmann::json& j, const NewlineGap& g) {
    j = {{"gap", g.gap}, {"peak_layer", g.peak_layer}, {"interval", g.interval}};
}

NewlineGap newline_gap(const ProbeGrid& grid, const std::vector<int>& layers) {
    if (layers.empty()) throw ValidationError("newline gap: no layers");
    std::string missing;
    for (int l : layers) {
        for (const char* lab : {"i=0", "i=1"}) {
            if (!grid.find(l, lab)) missing += (missing.empty() ? "" : ", ") + std::string("L") + std::to_string(l) + " " + lab;
        }
    }
    if (!missing.empty()) throw ValidationError("newline gap: grid missing " + missing);
    std::optional<NewlineGap> best;
    for (int l : layers) {
        const double g = grid.find(l, "i=0")->eval.top1.point - grid.find(l, "i=1")->eval.top1.point;
        if (!best || g > best->gap) best = NewlineGap{g, l, {}};
    }
    const auto& a = grid.find(best->peak_layer, "i=0")->eval;
    const auto& b = grid.find(best->peak_layer, "i=1")->eval;
    if (a.record_ids == b.record_ids && !a.record_ids.empty()) {
        best->interval = stats::paired_outcome_diff(a.top1_hits, b.top1_hits);
    } else {
        best->interval = stats::paired_wald_diff(a.top1.point, a.n, b.top1.point, b.n);
    }
    return *best;
}

}  // namespace plansite::probing
