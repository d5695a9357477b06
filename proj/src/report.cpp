#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "plansite/runner.hpp"

namespace plansite::runner {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Point {
    double x = 0.0;
    double y = 0.0;
    double lo = 0.0;
    double hi = 0.0;
    std::string model;
};

struct Series {
    std::string name;
    std::vector<Point> points;
    bool dashed = false;
};

struct Band {
    double y = 0.0;
    double lo = 0.0;
    double hi = 0.0;
    std::string label;
};

struct Figure {
    std::string kind;
    std::string title;
    std::string x_label;
    std::string y_label;
    std::vector<Series> series;
    std::optional<Band> reference;
};

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os << std::setprecision(prec) << v;
    return os.str();
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string sanitize(const std::string& s) {
    std::string out;
    for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.' ? c : '_';
    return out;
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
}

constexpr double kW = 640, kH = 400, kL = 60, kR = 150, kT = 40, kB = 50;

struct Axes {
    double x0, x1, y0, y1;
    double px(double x) const { return kL + (x1 == x0 ? 0.5 : (x - x0) / (x1 - x0)) * (kW - kL - kR); }
    double py(double y) const { return kH - kB - (y1 == y0 ? 0.5 : (y - y0) / (y1 - y0)) * (kH - kT - kB); }
};

void axes_svg(std::ostringstream& os, const Axes& a, const Figure& f, bool integer_x) {
    os << "<line x1=\"" << kL << "\" y1=\"" << kH - kB << "\" x2=\"" << kW - kR << "\" y2=\"" << kH - kB
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << kL << "\" y1=\"" << kT << "\" x2=\"" << kL << "\" y2=\"" << kH - kB << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 5; ++i) {
        const double y = a.y0 + (a.y1 - a.y0) * i / 5.0;
        os << "<line x1=\"" << kL - 4 << "\" y1=\"" << a.py(y) << "\" x2=\"" << kL << "\" y2=\"" << a.py(y)
           << "\" stroke=\"black\"/><text x=\"" << kL - 6 << "\" y=\"" << a.py(y) + 4
           << "\" font-size=\"11\" text-anchor=\"end\">" << fmt(y, 3) << "</text>\n";
    }
    const int steps = integer_x ? static_cast<int>(std::min(10.0, std::max(1.0, a.x1 - a.x0))) : 5;
    for (int i = 0; i <= steps; ++i) {
        double x = a.x0 + (a.x1 - a.x0) * i / steps;
        if (integer_x) x = std::round(x);
        os << "<line x1=\"" << a.px(x) << "\" y1=\"" << kH - kB << "\" x2=\"" << a.px(x) << "\" y2=\"" << kH - kB + 4
           << "\" stroke=\"black\"/><text x=\"" << a.px(x) << "\" y=\"" << kH - kB + 16
           << "\" font-size=\"11\" text-anchor=\"middle\">" << fmt(x, 3) << "</text>\n";
    }
    os << "<text x=\"" << (kL + kW - kR) / 2 << "\" y=\"" << kH - 12 << "\" font-size=\"12\" text-anchor=\"middle\">"
       << escape(f.x_label) << "</text>\n";
    os << "<text x=\"16\" y=\"" << (kT + kH - kB) / 2 << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
       << (kT + kH - kB) / 2 << ")\">" << escape(f.y_label) << "</text>\n";
    os << "<text x=\"" << kW / 2 << "\" y=\"22\" font-size=\"14\" text-anchor=\"middle\">" << escape(f.title) << "</text>\n";
}

std::string svg_open(double w = kW, double h = kH) {
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w
       << " " << h << "\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    return os.str();
}

std::string line_svg(const Figure& f) {
    double x0 = 1e300, x1 = -1e300, y1 = 1.0;
    for (const auto& s : f.series) {
        for (const auto& p : s.points) {
            x0 = std::min(x0, p.x);
            x1 = std::max(x1, p.x);
            y1 = std::max(y1, p.hi);
        }
    }
    if (x0 > x1) x0 = x1 = 0;
    const Axes a{x0, x1, 0.0, y1};
    std::ostringstream os;
    os << svg_open();
    if (f.reference) {
        const auto& r = *f.reference;
        os << "<rect x=\"" << kL << "\" y=\"" << a.py(r.hi) << "\" width=\"" << kW - kL - kR << "\" height=\""
           << std::max(0.0, a.py(r.lo) - a.py(r.hi)) << "\" fill=\"#888888\" fill-opacity=\"0.2\"/>\n";
        os << "<line x1=\"" << kL << "\" y1=\"" << a.py(r.y) << "\" x2=\"" << kW - kR << "\" y2=\"" << a.py(r.y)
           << "\" stroke=\"#555555\" stroke-dasharray=\"6,3\"/>\n";
    }
    for (std::size_t i = 0; i < f.series.size(); ++i) {
        const auto& s = f.series[i];
        const char* col = kPalette[i % std::size(kPalette)];
        auto pts = s.points;
        std::sort(pts.begin(), pts.end(), [](const Point& p, const Point& q) { return p.x < q.x; });
        if (pts.empty()) continue;
        std::ostringstream band;
        for (const auto& p : pts) band << a.px(p.x) << "," << a.py(p.hi) << " ";
        for (auto it = pts.rbegin(); it != pts.rend(); ++it) band << a.px(it->x) << "," << a.py(it->lo) << " ";
        os << "<polygon points=\"" << band.str() << "\" fill=\"" << col << "\" fill-opacity=\"0.18\" stroke=\"none\"/>\n";
        os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\""
           << (s.dashed ? " stroke-dasharray=\"5,3\"" : "") << " points=\"";
        for (const auto& p : pts) os << a.px(p.x) << "," << a.py(p.y) << " ";
        os << "\"/>\n";
        for (const auto& p : pts) os << "<circle cx=\"" << a.px(p.x) << "\" cy=\"" << a.py(p.y) << "\" r=\"3\" fill=\"" << col << "\"/>\n";
        const double ly = kT + 16.0 * static_cast<double>(i);
        os << "<line x1=\"" << kW - kR + 10 << "\" y1=\"" << ly << "\" x2=\"" << kW - kR + 30 << "\" y2=\"" << ly
           << "\" stroke=\"" << col << "\" stroke-width=\"2\"/><text x=\"" << kW - kR + 34 << "\" y=\"" << ly + 4
           << "\" font-size=\"11\">" << escape(s.name) << "</text>\n";
    }
    if (f.reference) {
        const double ly = kT + 16.0 * static_cast<double>(f.series.size());
        os << "<line x1=\"" << kW - kR + 10 << "\" y1=\"" << ly << "\" x2=\"" << kW - kR + 30 << "\" y2=\"" << ly
           << "\" stroke=\"#555555\" stroke-dasharray=\"6,3\"/><text x=\"" << kW - kR + 34 << "\" y=\"" << ly + 4
           << "\" font-size=\"11\">" << escape(f.reference->label) << "</text>\n";
    }
    axes_svg(os, a, f, true);
    os << "</svg>\n";
    return os.str();
}

std::string series_csv(const Figure& f) {
    std::ostringstream os;
    os << std::setprecision(17) << "model,series,x,value,lower,upper\n";
    for (const auto& s : f.series) {
        for (const auto& p : s.points) os << p.model << "," << s.name << "," << p.x << "," << p.y << "," << p.lo << "," << p.hi << "\n";
    }
    if (f.reference) os << ",reference,," << f.reference->y << "," << f.reference->lo << "," << f.reference->hi << "\n";
    return os.str();
}

json series_json(const Figure& f) {
    json j = {{"kind", f.kind}, {"title", f.title}, {"x_label", f.x_label}, {"y_label", f.y_label}};
    json ss = json::array();
    for (const auto& s : f.series) {
        json pts = json::array();
        for (const auto& p : s.points) pts.push_back({{"model", p.model}, {"x", p.x}, {"value", p.y}, {"lower", p.lo}, {"upper", p.hi}});
        ss.push_back({{"name", s.name}, {"points", pts}});
    }
    j["series"] = ss;
    if (f.reference) {
        j["reference"] = {{"value", f.reference->y}, {"lower", f.reference->lo}, {"upper", f.reference->hi},
                          {"label", f.reference->label}};
    }
    return j;
}

void emit(const fs::path& dir, const std::string& stem, const std::string& svg, const std::string& csv, const json& j,
          std::vector<std::string>& files) {
    write_file(dir / (stem + ".svg"), svg);
    write_file(dir / (stem + ".csv"), csv);
    write_file(dir / (stem + ".json"), j.dump(2) + "\n");
    for (const char* ext : {".svg", ".csv", ".json"}) files.push_back((dir / (stem + ext)).string());
}

Series& series_named(Figure& f, const std::string& name, bool dashed = false) {
    for (auto& s : f.series) {
        if (s.name == name) return s;
    }
    f.series.push_back({name, {}, dashed});
    return f.series.back();
}

Point interval_point(double x, const json& iv, const std::string& model) {
    return {x, iv.at("point").get<double>(), iv.at("lower").get<double>(), iv.at("upper").get<double>(), model};
}

std::string family_of(const RunRecord& r) {
    if (r.header.contains("model_spec") && r.header["model_spec"].is_object()) {
        return r.header["model_spec"].value("family", std::string());
    }
    return {};
}

void check_single_model(const std::vector<const RunRecord*>& group, const std::string& figure) {
    std::set<std::string> ids;
    for (const auto* r : group) ids.insert(r->model_id());
    if (ids.size() > 1) {
        std::vector<std::string> v(ids.begin(), ids.end());
        std::string joined;
        for (const auto& s : v) joined += (joined.empty() ? "" : ", ") + s;
        throw ValidationError("mixed model ids in single-model figure " + figure + ": " + joined);
    }
}

Figure line_figure(const std::string& kind, const std::vector<const RunRecord*>& group) {
    Figure f;
    f.kind = kind;
    const std::string model = group.front()->model_id();
    const bool probe = kind == "probe_pile" || kind == "probe_couplets";
    f.title = kind + " (" + model + ")";
    f.x_label = "layer";
    f.y_label = probe ? "top-1 accuracy" : (kind == "steer_sweep" ? "target rhyme rate" : "corrupt rhyme rate");
    for (const auto* r : group) {
        for (const auto& c : r->latest()) {
            if (!c.ok() || !c.condition.contains("meta")) continue;
            const auto& meta = c.condition["meta"];
            if (!meta.contains("series") || !meta.contains("x")) continue;
            const double x = meta["x"].get<double>();
            const auto name = meta["series"].get<std::string>();
            if (probe) {
                series_named(f, name).points.push_back(interval_point(x, c.payload.at("eval").at("top1"), r->model_id()));
                if (c.payload.contains("baseline") && !c.payload["baseline"].is_null()) {
                    series_named(f, name + " unigram", true)
                        .points.push_back(interval_point(x, c.payload["baseline"].at("top1"), r->model_id()));
                }
            } else {
                series_named(f, name).points.push_back(interval_point(x, c.payload.at("interval"), r->model_id()));
            }
        }
    }
    return f;
}

Figure ksweep_figure(const std::string& kind, const std::vector<const RunRecord*>& group) {
    Figure f;
    f.kind = kind;
    f.title = kind + " (" + group.front()->model_id() + ")";
    f.x_label = "k";
    f.y_label = "corrupt rhyme rate";
    for (const auto* r : group) {
        for (const auto& c : r->latest()) {
            if (!c.ok() || !c.condition.contains("meta")) continue;
            const auto& meta = c.condition["meta"];
            if (!meta.contains("series") || !meta.contains("x")) continue;
            const auto name = meta["series"].get<std::string>();
            const auto iv = c.payload.at("interval");
            if (name == "reference") {
                if (!f.reference || iv.at("point").get<double>() > f.reference->y) {
                    f.reference = Band{iv.at("point").get<double>(), iv.at("lower").get<double>(), iv.at("upper").get<double>(),
                                       "full residual (L" + std::to_string(meta["x"].get<int>()) + ")"};
                }
                continue;
            }
            series_named(f, name).points.push_back(interval_point(meta["x"].get<double>(), iv, r->model_id()));
        }
    }
    return f;
}

std::string heatmap_svg(const json& ranking, const std::string& title) {
    const int first = ranking.at("first_layer").get<int>();
    const int last = ranking.at("last_layer").get<int>();
    const auto heads = ranking.at("heads").get<std::size_t>();
    const auto grid = ranking.at("grid").get<std::vector<double>>();
    const std::size_t layers = static_cast<std::size_t>(last - first + 1);
    const double cell = std::clamp(480.0 / static_cast<double>(std::max(layers, heads)), 6.0, 40.0);
    const double w = kL + cell * static_cast<double>(heads) + 40, h = kT + cell * static_cast<double>(layers) + kB;
    double mx = 0.0;
    for (double g : grid) mx = std::max(mx, g);
    std::set<std::pair<int, int>> top;
    const auto& order = ranking.at("order");
    for (std::size_t i = 0; i < std::min<std::size_t>(5, order.size()); ++i) {
        top.insert({order[i].at("layer").get<int>(), order[i].at("head").get<int>()});
    }
    std::ostringstream os;
    os << svg_open(w, h);
    os << "<text x=\"" << w / 2 << "\" y=\"22\" font-size=\"14\" text-anchor=\"middle\">" << escape(title) << "</text>\n";
    for (std::size_t l = 0; l < layers; ++l) {
        for (std::size_t hd = 0; hd < heads; ++hd) {
            const double v = mx > 0 ? grid[l * heads + hd] / mx : 0.0;
            const int shade = static_cast<int>(std::lround(255 * (1.0 - v)));
            const double x = kL + cell * static_cast<double>(hd), y = kT + cell * static_cast<double>(l);
            os << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\"rgb(255,"
               << shade << "," << shade << ")\"><title>L" << first + static_cast<int>(l) << "H" << hd << " "
               << fmt(grid[l * heads + hd]) << "</title></rect>\n";
            if (top.count({first + static_cast<int>(l), static_cast<int>(hd)})) {
                const double cx = x + cell / 2, cy = y + cell / 2, R = cell * 0.42, r = R * 0.45;
                os << "<polygon fill=\"#d62728\" stroke=\"black\" stroke-width=\"0.5\" class=\"top-star\" points=\"";
                for (int k = 0; k < 10; ++k) {
                    const double ang = -M_PI / 2 + k * M_PI / 5;
                    const double rr = k % 2 ? r : R;
                    os << cx + rr * std::cos(ang) << "," << cy + rr * std::sin(ang) << " ";
                }
                os << "\"/>\n";
            }
        }
        os << "<text x=\"" << kL - 6 << "\" y=\"" << kT + cell * (static_cast<double>(l) + 0.5) + 4
           << "\" font-size=\"10\" text-anchor=\"end\">" << first + static_cast<int>(l) << "</text>\n";
    }
    os << "<text x=\"" << kL + cell * static_cast<double>(heads) / 2 << "\" y=\"" << h - 16
       << "\" font-size=\"12\" text-anchor=\"middle\">head</text>\n";
    os << "<text x=\"16\" y=\"" << kT + cell * static_cast<double>(layers) / 2
       << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << kT + cell * static_cast<double>(layers) / 2
       << ")\">layer</text>\n</svg>\n";
    return os.str();
}

std::string heatmap_csv(const json& ranking) {
    std::ostringstream os;
    os << std::setprecision(17) << "layer,head,score,rank\n";
    const auto& order = ranking.at("order");
    for (std::size_t i = 0; i < order.size(); ++i) {
        os << order[i].at("layer").get<int>() << "," << order[i].at("head").get<int>() << ","
           << order[i].at("score").get<double>() << "," << i + 1 << "\n";
    }
    return os.str();
}

std::string bars_svg(const std::vector<std::tuple<std::string, std::string, Point>>& bars, const std::string& title) {
    std::vector<std::string> models, series;
    for (const auto& [m, s, p] : bars) {
        if (std::find(models.begin(), models.end(), m) == models.end()) models.push_back(m);
        if (std::find(series.begin(), series.end(), s) == series.end()) series.push_back(s);
    }
    double y1 = 1.0;
    for (const auto& b : bars) y1 = std::max(y1, std::get<2>(b).hi);
    const Axes a{0, 1, 0, y1};
    const double plot_w = kW - kL - kR;
    const double group_w = plot_w / static_cast<double>(std::max<std::size_t>(1, models.size()));
    const double bar_w = group_w * 0.8 / static_cast<double>(std::max<std::size_t>(1, series.size()));
    std::ostringstream os;
    os << svg_open();
    for (const auto& [m, s, p] : bars) {
        const auto mi = static_cast<double>(std::find(models.begin(), models.end(), m) - models.begin());
        const auto si = static_cast<std::size_t>(std::find(series.begin(), series.end(), s) - series.begin());
        const double x = kL + group_w * mi + group_w * 0.1 + bar_w * static_cast<double>(si);
        os << "<rect x=\"" << x << "\" y=\"" << a.py(p.y) << "\" width=\"" << bar_w * 0.9 << "\" height=\""
           << a.py(0) - a.py(p.y) << "\" fill=\"" << kPalette[si % std::size(kPalette)] << "\"/>\n";
        const double cx = x + bar_w * 0.45;
        os << "<line x1=\"" << cx << "\" y1=\"" << a.py(p.lo) << "\" x2=\"" << cx << "\" y2=\"" << a.py(p.hi)
           << "\" stroke=\"black\"/><line x1=\"" << cx - 4 << "\" y1=\"" << a.py(p.hi) << "\" x2=\"" << cx + 4 << "\" y2=\""
           << a.py(p.hi) << "\" stroke=\"black\"/><line x1=\"" << cx - 4 << "\" y1=\"" << a.py(p.lo) << "\" x2=\"" << cx + 4
           << "\" y2=\"" << a.py(p.lo) << "\" stroke=\"black\"/>\n";
    }
    for (std::size_t i = 0; i < models.size(); ++i) {
        os << "<text x=\"" << kL + group_w * (static_cast<double>(i) + 0.5) << "\" y=\"" << kH - kB + 16
           << "\" font-size=\"11\" text-anchor=\"middle\">" << escape(models[i]) << "</text>\n";
    }
    for (std::size_t i = 0; i < series.size(); ++i) {
        const double ly = kT + 16.0 * static_cast<double>(i);
        os << "<rect x=\"" << kW - kR + 10 << "\" y=\"" << ly - 6 << "\" width=\"12\" height=\"12\" fill=\""
           << kPalette[i % std::size(kPalette)] << "\"/><text x=\"" << kW - kR + 28 << "\" y=\"" << ly + 4
           << "\" font-size=\"11\">" << escape(series[i]) << "</text>\n";
    }
    Figure f;
    f.title = title;
    f.x_label = "model";
    f.y_label = "peak corrupt rhyme rate";
    os << "<line x1=\"" << kL << "\" y1=\"" << kH - kB << "\" x2=\"" << kW - kR << "\" y2=\"" << kH - kB << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << kL << "\" y1=\"" << kT << "\" x2=\"" << kL << "\" y2=\"" << kH - kB << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 5; ++i) {
        const double y = y1 * i / 5.0;
        os << "<text x=\"" << kL - 6 << "\" y=\"" << a.py(y) + 4 << "\" font-size=\"11\" text-anchor=\"end\">" << fmt(y, 3)
           << "</text>\n";
    }
    os << "<text x=\"" << kW / 2 << "\" y=\"22\" font-size=\"14\" text-anchor=\"middle\">" << escape(title) << "</text>\n";
    os << "<text x=\"16\" y=\"" << (kT + kH - kB) / 2 << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
       << (kT + kH - kB) / 2 << ")\">" << escape(f.y_label) << "</text>\n</svg>\n";
    return os.str();
}

std::string percent_cell(const json& iv) {
    auto pct = [](double v) { return std::to_string(static_cast<long>(std::lround(v * 100.0))); };
    return pct(iv.at("point").get<double>()) + " [" + pct(iv.at("lower").get<double>()) + ", " +
           pct(iv.at("upper").get<double>()) + "]";
}

}  // namespace

std::string all_layers_table(const std::vector<RunRecord>& records) {
    std::ostringstream os;
    os << "| Family | Model | Last Word [95% CI] | i=0 [95% CI] |\n|---|---|---|---|\n";
    std::size_t rows = 0;
    for (const auto& r : records) {
        if (r.kind() != "all_layers") continue;
        auto cell = [&](const std::string& id) -> std::string {
            const auto* c = r.find(id);
            if (!c || !c->ok()) return "n/a";
            return percent_cell(c->payload.at("interval"));
        };
        os << "| " << family_of(r) << " | " << r.model_id() << " | " << cell("all_layers/last_word") << " | "
           << cell("all_layers/i=0") << " |\n";
        ++rows;
    }
    if (!rows) throw ValidationError("all-layers table: no all_layers records");
    return os.str();
}

std::vector<std::string> report(const std::vector<RunRecord>& records, const ReportOptions& opts) {
    if (records.empty()) throw ValidationError("report: no run records");
    fs::create_directories(opts.out_dir);
    std::vector<std::string> files;

    // kind -> group key -> records
    std::map<std::string, std::map<std::string, std::vector<const RunRecord*>>> groups;
    for (const auto& r : records) {
        const auto kind = r.kind();
        if (kind.empty() || kind == "report") continue;
        groups[kind][opts.group_by_model ? r.model_id() : std::string()].push_back(&r);
    }

    for (const auto& [kind, by] : groups) {
        for (const auto& [key, group] : by) {
            check_single_model(group, kind);
            const std::string stem = kind + "_" + sanitize(group.front()->model_id());
            if (kind == "patch_sweep" || kind == "baselines" || kind == "steer_sweep" || kind == "probe_pile" ||
                kind == "probe_couplets") {
                const auto f = line_figure(kind, group);
                emit(opts.out_dir, stem, line_svg(f), series_csv(f), series_json(f), files);
            } else if (kind == "topk_heads" || kind == "path_patch" || kind == "mlp_control") {
                const auto f = ksweep_figure(kind, group);
                emit(opts.out_dir, stem, line_svg(f), series_csv(f), series_json(f), files);
            }
            if (kind == "head_rank" || kind == "topk_heads" || kind == "path_patch") {
                for (const auto* r : group) {
                    const auto* c = r->find("head_rank");
                    if (!c || !c->ok()) continue;
                    const std::string hstem = "head_rank_" + sanitize(r->model_id());
                    emit(opts.out_dir, hstem, heatmap_svg(c->payload, "head attention to last word (" + r->model_id() + ")"),
                         heatmap_csv(c->payload), c->payload, files);
                    break;
                }
            }
        }
    }

    // Summary bars: peak rate over layers per model and position.
    std::vector<std::tuple<std::string, std::string, Point>> bars;
    for (const auto& r : records) {
        if (r.kind() != "patch_sweep") continue;
        std::map<std::string, Point> peak;
        for (const auto& c : r.latest()) {
            if (!c.ok() || !c.condition.contains("meta")) continue;
            const auto series = c.condition["meta"].value("series", std::string());
            const auto p = interval_point(c.condition["meta"].value("x", 0.0), c.payload.at("interval"), r.model_id());
            if (!peak.count(series) || p.y > peak[series].y) peak[series] = p;
        }
        for (const auto& [s, p] : peak) bars.emplace_back(r.model_id(), s, p);
    }
    if (!bars.empty()) {
        std::ostringstream csv;
        csv << std::setprecision(17) << "model,series,peak_layer,value,lower,upper\n";
        json j = json::array();
        for (const auto& [m, s, p] : bars) {
            csv << m << "," << s << "," << p.x << "," << p.y << "," << p.lo << "," << p.hi << "\n";
            j.push_back({{"model", m}, {"series", s}, {"peak_layer", p.x}, {"value", p.y}, {"lower", p.lo}, {"upper", p.hi}});
        }
        emit(opts.out_dir, "summary_peak", bars_svg(bars, "peak corrupt rhyme rate across layers"), csv.str(), j, files);
    }

    if (groups.count("all_layers")) {
        const auto table = all_layers_table(records);
        write_file(opts.out_dir / "all_layers_table.md", table);
        files.push_back((opts.out_dir / "all_layers_table.md").string());
        std::ostringstream csv;
        csv << std::setprecision(17) << "family,model,position,value,lower,upper\n";
        for (const auto& r : records) {
            if (r.kind() != "all_layers") continue;
            for (const auto& c : r.latest()) {
                if (!c.ok()) continue;
                const auto& iv = c.payload.at("interval");
                csv << family_of(r) << "," << r.model_id() << "," << c.cell_id.substr(c.cell_id.find('/') + 1) << ","
                    << iv.at("point").get<double>() << "," << iv.at("lower").get<double>() << ","
                    << iv.at("upper").get<double>() << "\n";
            }
        }
        write_file(opts.out_dir / "all_layers_table.csv", csv.str());
        files.push_back((opts.out_dir / "all_layers_table.csv").string());
    }
    if (files.empty()) throw ValidationError("report: no figure could be drawn from the given records");
    return files;
}

}  // namespace plansite::runner
