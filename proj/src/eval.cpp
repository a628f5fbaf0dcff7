#include "urbanet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

namespace urbanet {

void UNetPredictor::predict(std::span<const float> inputs, std::size_t n, std::span<float> outputs) const {
    const auto out = net_.forward(inputs, n);
    if (out.size() != outputs.size()) throw ShapeError("predictor output buffer has the wrong size");
    std::copy(out.begin(), out.end(), outputs.begin());
}

const std::vector<double>& PredictionGrid::plane(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (names[i] == name) return planes[i];
    }
    throw PreconditionError("prediction grid has no plane '" + std::string(name) + "'");
}

double median_of(std::vector<double> v) {
    if (v.empty()) throw PreconditionError("median of an empty set");
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    const double upper = v[mid];
    if (v.size() % 2 == 1) return upper;
    const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lower + upper);
}

MedianAccumulator::MedianAccumulator(std::size_t height, std::size_t width, std::size_t channels,
                                     std::vector<std::uint8_t> wanted)
    : height_(height), width_(width), channels_(channels), wanted_(std::move(wanted)), values_(height * width) {
    if (wanted_.size() != height * width) throw ShapeError("accumulator selection does not match the grid");
}

void MedianAccumulator::add(std::ptrdiff_t row0, std::ptrdiff_t col0, std::size_t size, std::span<const float> values,
                            std::span<const float> valid) {
    const std::size_t plane = size * size;
    if (values.size() != channels_ * plane || valid.size() != plane) throw ShapeError("accumulator tile shape");
    const auto h = static_cast<std::ptrdiff_t>(height_);
    const auto w = static_cast<std::ptrdiff_t>(width_);
    for (std::size_t i = 0; i < size; ++i) {
        const std::ptrdiff_t r = row0 + static_cast<std::ptrdiff_t>(i);
        if (r < 0 || r >= h) continue;
        for (std::size_t j = 0; j < size; ++j) {
            const std::ptrdiff_t c = col0 + static_cast<std::ptrdiff_t>(j);
            if (c < 0 || c >= w || valid[i * size + j] == 0.0f) continue;
            const auto p = static_cast<std::size_t>(r * w + c);
            if (!wanted_[p]) continue;
            for (std::size_t k = 0; k < channels_; ++k) values_[p].push_back(values[k * plane + i * size + j]);
        }
    }
}

PredictionGrid MedianAccumulator::finish(std::vector<std::string> names) && {
    if (names.size() != channels_) throw ShapeError("one name per predicted channel expected");
    PredictionGrid out;
    out.height = height_;
    out.width = width_;
    out.names = std::move(names);
    out.planes.assign(channels_, std::vector<double>(height_ * width_, std::numeric_limits<double>::quiet_NaN()));
    out.counts.assign(height_ * width_, 0);
    out.defined.assign(height_ * width_, 0);
    std::vector<double> scratch;
    for (std::size_t p = 0; p < values_.size(); ++p) {
        const auto& v = values_[p];
        if (v.empty()) continue;
        const std::size_t count = v.size() / channels_;
        out.counts[p] = static_cast<std::uint32_t>(count);
        out.defined[p] = 1;
        for (std::size_t k = 0; k < channels_; ++k) {
            scratch.clear();
            for (std::size_t i = 0; i < count; ++i) scratch.push_back(static_cast<double>(v[i * channels_ + k]));
            out.planes[k][p] = median_of(scratch);
        }
        std::vector<float>().swap(values_[p]);
    }
    return out;
}

PredictionGrid predict_world(const TilePredictor& model, const TileSampler& sampler, SplitFilter filter,
                             const PredictOptions& options) {
    const auto& window = sampler.window();
    if (model.tile_size() != window.size) {
        throw ShapeError("model expects " + std::to_string(model.tile_size()) + "-pixel tiles, window is " +
                         std::to_string(window.size));
    }
    if (model.input_channels() != sampler.layout().inputs.size()) {
        throw ShapeError("model input channels do not match the channel layout");
    }
    const std::size_t h = sampler.world().height(), w = sampler.world().width();
    const auto& labels = sampler.split().labels;
    std::vector<std::uint8_t> wanted(h * w, 0);
    for (std::size_t i = 0; i < h * w; ++i) {
        const auto l = labels[i];
        wanted[i] = l != SplitLabel::Water &&
                    (filter == SplitFilter::All || (filter == SplitFilter::Train) == (l == SplitLabel::Train));
    }

    // Keep the land centers whose window overlaps at least one wanted pixel.
    std::vector<std::uint32_t> prefix((h + 1) * (w + 1), 0);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            prefix[(r + 1) * (w + 1) + c + 1] = wanted[r * w + c] + prefix[r * (w + 1) + c + 1] +
                                                 prefix[(r + 1) * (w + 1) + c] - prefix[r * (w + 1) + c];
        }
    }
    const auto s = static_cast<std::ptrdiff_t>(window.size);
    auto clip = [](std::ptrdiff_t v, std::size_t n) {
        return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(n)));
    };
    std::vector<Pixel> centers;
    for (const Pixel& c : sampler.centers(SplitFilter::All)) {
        const auto [r0, c0] = sampler.origin(c);
        const std::size_t ra = clip(r0, h), rb = clip(r0 + s, h), ca = clip(c0, w), cb = clip(c0 + s, w);
        if (ra >= rb || ca >= cb) continue;
        const auto hits = prefix[rb * (w + 1) + cb] - prefix[ra * (w + 1) + cb] - prefix[rb * (w + 1) + ca] +
                          prefix[ra * (w + 1) + ca];
        if (hits > 0) centers.push_back(c);
    }

    const std::size_t cin = model.input_channels(), cout = model.output_channels();
    const std::size_t plane = window.size * window.size;
    MedianAccumulator acc(h, w, cout, std::move(wanted));
    const std::size_t bs = std::max<std::size_t>(1, options.batch_size);
    const std::size_t workers = std::max<std::size_t>(1, options.threads);

    struct Chunk {
        std::vector<TileSample> tiles;
        std::vector<float> inputs, outputs;
    };
    auto run_chunk = [&](Chunk& chunk) {
        const std::size_t n = chunk.tiles.size();
        chunk.inputs.resize(n * cin * plane);
        for (std::size_t i = 0; i < n; ++i) {
            std::copy(chunk.tiles[i].input.begin(), chunk.tiles[i].input.end(), chunk.inputs.begin() + i * cin * plane);
        }
        chunk.outputs.resize(n * cout * plane);
        model.predict(chunk.inputs, n, chunk.outputs);
    };

    std::vector<Chunk> chunks(workers);
    for (std::size_t start = 0; start < centers.size(); start += bs * workers) {
        std::size_t used = 0;
        for (std::size_t k = 0; k < workers; ++k) {
            const std::size_t lo = start + k * bs;
            const std::size_t hi = std::min(centers.size(), lo + bs);
            chunks[k].tiles.clear();
            for (std::size_t i = lo; i < hi; ++i) chunks[k].tiles.push_back(sampler.tile_at(centers[i]));
            if (!chunks[k].tiles.empty()) used = k + 1;
        }
        if (used <= 1) {
            run_chunk(chunks[0]);
        } else {
            std::vector<std::thread> pool;
            for (std::size_t k = 1; k < used; ++k) pool.emplace_back(run_chunk, std::ref(chunks[k]));
            run_chunk(chunks[0]);
            for (auto& t : pool) t.join();
        }
        for (std::size_t k = 0; k < used; ++k) {
            for (std::size_t i = 0; i < chunks[k].tiles.size(); ++i) {
                const auto& tile = chunks[k].tiles[i];
                const auto [r0, c0] = sampler.origin(tile.center);
                acc.add(r0, c0, window.size,
                        std::span<const float>(chunks[k].outputs).subspan(i * cout * plane, cout * plane), tile.mask);
            }
        }
    }
    return std::move(acc).finish(sampler.layout().targets.size() == cout
                                     ? sampler.layout().targets
                                     : std::vector<std::string>(cout, "output"));
}

MetricsRow residual_metrics(std::span<const double> pred, std::span<const double> truth,
                            std::span<const std::uint8_t> stratum) {
    if (pred.size() != truth.size() || stratum.size() != truth.size()) {
        throw ShapeError("residual_metrics: prediction, truth and stratum sizes differ");
    }
    MetricsRow row;
    std::size_t n = 0;
    double sum_abs = 0.0, max_abs = 0.0, sum_e = 0.0, sum_t = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (!stratum[i]) continue;
        const double e = truth[i] - pred[i];
        if (!std::isfinite(e)) throw PreconditionError("residual_metrics: undefined prediction in the stratum");
        ++n;
        sum_abs += std::abs(e);
        max_abs = std::max(max_abs, std::abs(e));
        sum_e += e;
        sum_t += truth[i];
    }
    row.n_cells = n;
    if (n == 0) return row;
    if (n < 2) throw PreconditionError("residual_metrics needs at least two cells");
    const double dn = static_cast<double>(n);
    const double mean_e = sum_e / dn, mean_t = sum_t / dn;
    double ss_e = 0.0, ss_dev = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (!stratum[i]) continue;
        const double e = truth[i] - pred[i];
        ss_e += e * e;
        ss_dev += (e - mean_e) * (e - mean_e);
        ss_tot += (truth[i] - mean_t) * (truth[i] - mean_t);
    }
    row.mean_abs = sum_abs / dn;
    row.max_abs = max_abs;
    row.std_dev = std::sqrt(ss_dev / dn);
    if (ss_tot == 0.0) throw UndefinedMetricError("R^2 is undefined: truth has zero variance", row);
    row.r2 = 1.0 - ss_e / ss_tot;
    return row;
}

Strata stratify(const SplitAssignment& split, SplitFilter filter, std::span<const double> builtup_2010) {
    if (builtup_2010.size() != split.labels.size()) throw ShapeError("built-up plane does not match the split");
    Strata s;
    s.all_cells.assign(split.labels.size(), 0);
    s.builtup_positive.assign(split.labels.size(), 0);
    for (std::size_t i = 0; i < split.labels.size(); ++i) {
        const auto l = split.labels[i];
        if (l == SplitLabel::Water) continue;
        if (filter == SplitFilter::Train && l != SplitLabel::Train) continue;
        if (filter == SplitFilter::Test && l != SplitLabel::Test) continue;
        s.all_cells[i] = 1;
        s.builtup_positive[i] = builtup_2010[i] > 0.0;
    }
    return s;
}

void EvalReport::add(MetricsRow row) {
    for (const auto& r : rows) {
        if (std::tie(r.model, r.window, r.scope, r.stratum) == std::tie(row.model, row.window, row.scope, row.stratum)) {
            throw IntegrityError("duplicate report row for " + row.model + " / " + std::to_string(row.window) + " / " +
                                 row.scope + " / " + row.stratum);
        }
    }
    rows.push_back(std::move(row));
}

void EvalReport::merge(const EvalReport& other) {
    for (const auto& r : other.rows) add(r);
}

std::vector<MetricsRow> evaluate_strata(std::span<const double> pred, std::span<const double> truth,
                                        const Strata& strata, const std::string& model, std::size_t window,
                                        const std::string& scope) {
    std::vector<MetricsRow> out;
    for (const auto& [name, cells] : {std::pair{kStratumAll, &strata.all_cells},
                                      std::pair{kStratumBuiltup, &strata.builtup_positive}}) {
        MetricsRow row;
        try {
            row = residual_metrics(pred, truth, *cells);
        } catch (const UndefinedMetricError& e) {
            row = e.row;
        } catch (const PreconditionError&) {
            row = MetricsRow{};
            row.n_cells = static_cast<std::size_t>(std::count(cells->begin(), cells->end(), 1));
        }
        row.model = model;
        row.window = window;
        row.scope = scope;
        row.stratum = std::string(name);
        out.push_back(std::move(row));
    }
    return out;
}

namespace {

constexpr std::string_view kReportHeader = "model,window,scope,stratum,n_cells,mean_abs,max_abs,std,r2";

std::string fmt(const std::optional<double>& v) {
    if (!v) return {};
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", *v);
    return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

std::optional<double> parse_opt(const std::string& s, const std::string& where) {
    if (s.empty()) return std::nullopt;
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw FormatError("bad number '" + s + "' in " + where);
    }
}

}  // namespace

void export_report(const EvalReport& report, const std::filesystem::path& path) {
    if (report.rows.empty()) throw PreconditionError("refusing to export an empty report");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << kReportHeader << '\n';
    for (const auto& r : report.rows) {
        if (r.model.find(',') != std::string::npos) throw FormatError("model label contains a comma: " + r.model);
        out << r.model << ',' << (r.window ? std::to_string(r.window) : "") << ',' << r.scope << ',' << r.stratum
            << ',' << (r.r2_text.empty() ? std::to_string(r.n_cells) : "") << ',' << fmt(r.mean_abs) << ','
            << fmt(r.max_abs) << ',' << fmt(r.std_dev) << ',' << (r.r2_text.empty() ? fmt(r.r2) : r.r2_text)
            << '\n';
    }
    if (!out) throw IoError("write failed for " + path.string());
}

EvalReport load_report(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != kReportHeader) {
        throw FormatError(path.string() + ": expected header '" + std::string(kReportHeader) + "'");
    }
    EvalReport report;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto f = split_csv(line);
        const std::string where = path.string() + ":" + std::to_string(lineno);
        if (f.size() != 9) throw FormatError(where + ": expected 9 fields");
        MetricsRow r;
        r.model = f[0];
        r.window = f[1].empty() ? 0 : static_cast<std::size_t>(*parse_opt(f[1], where));
        r.scope = f[2];
        r.stratum = f[3];
        r.n_cells = f[4].empty() ? 0 : static_cast<std::size_t>(*parse_opt(f[4], where));
        r.mean_abs = parse_opt(f[5], where);
        r.max_abs = parse_opt(f[6], where);
        r.std_dev = parse_opt(f[7], where);
        if (!f[8].empty() && (f[8].front() == '>' || f[8].front() == '<' || f[8].back() == '%')) {
            r.r2_text = f[8];
        } else {
            r.r2 = parse_opt(f[8], where);
        }
        report.add(std::move(r));
    }
    return report;
}

EvalReport load_baseline(const std::filesystem::path& path) { return load_report(path); }

std::string stratum_title(std::string_view stratum) {
    if (stratum == kStratumAll) return "All grid cells";
    if (stratum == kStratumBuiltup) return "Grid cells with observed built-up land fraction > 0 in 2010";
    return std::string(stratum);
}

std::string format_report_table(const EvalReport& report) {
    std::vector<std::pair<std::string, std::size_t>> models;
    std::vector<std::string> strata;
    for (const auto& r : report.rows) {
        const std::pair<std::string, std::size_t> key{r.model, r.window};
        if (std::find(models.begin(), models.end(), key) == models.end()) models.push_back(key);
        if (std::find(strata.begin(), strata.end(), r.stratum) == strata.end()) strata.push_back(r.stratum);
    }
    auto find = [&](const std::pair<std::string, std::size_t>& m, const std::string& stratum) -> const MetricsRow* {
        for (const auto& r : report.rows) {
            if (r.model == m.first && r.window == m.second && r.stratum == stratum && r.scope == "global") return &r;
        }
        return nullptr;
    };
    auto cell = [](const std::optional<double>& v, bool percent) {
        char buf[32];
        if (!v) return std::string("-");
        std::snprintf(buf, sizeof buf, percent ? "%.3f%%" : "%.6f", percent ? *v * 100.0 : *v);
        return std::string(buf);
    };
    constexpr int kModel = 22, kCol = 12;
    std::ostringstream out;
    char buf[256];
    for (const auto& stratum : strata) {
        out << stratum_title(stratum) << '\n';
        std::snprintf(buf, sizeof buf, "%-*s%*s%*s%*s%*s%*s\n", kModel, "Model", kCol, "R2", kCol, "Mean|e|", kCol,
                      "Max|e|", kCol, "Std(e)", kCol, "Cells");
        out << buf;
        for (const auto& m : models) {
            const auto* r = find(m, stratum);
            if (!r) continue;
            const std::string r2 = r->r2_text.empty() ? cell(r->r2, true) : r->r2_text;
            const std::string n = r->r2_text.empty() ? std::to_string(r->n_cells) : "-";
            std::snprintf(buf, sizeof buf, "%-*s%*s%*s%*s%*s%*s\n", kModel, m.first.c_str(), kCol, r2.c_str(), kCol,
                          cell(r->mean_abs, false).c_str(), kCol, cell(r->max_abs, false).c_str(), kCol,
                          cell(r->std_dev, false).c_str(), kCol, n.c_str());
            out << buf;
        }
        out << '\n';
    }
    return out.str();
}

std::filesystem::path default_baseline_path() {
    if (const char* dir = std::getenv("URBANET_DATA_DIR")) return std::filesystem::path(dir) / "select_baseline.csv";
#ifdef URBANET_DATA_DIR
    return std::filesystem::path(URBANET_DATA_DIR) / "select_baseline.csv";
#else
    return "data/select_baseline.csv";
#endif
}

void export_scatter(std::span<const double> pred, std::span<const double> truth, std::span<const std::uint8_t> cells,
                    const std::string& variable, const std::filesystem::path& csv_path,
                    const std::filesystem::path& svg_path) {
    if (pred.size() != truth.size() || cells.size() != truth.size()) throw ShapeError("export_scatter: size mismatch");
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw IoError("cannot open " + csv_path.string() + " for writing");
    csv << "observed,predicted\n";
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    std::vector<std::pair<double, double>> points;
    char buf[64];
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (!cells[i]) continue;
        std::snprintf(buf, sizeof buf, "%.9g,%.9g\n", truth[i], pred[i]);
        csv << buf;
        points.emplace_back(truth[i], pred[i]);
        lo = std::min({lo, truth[i], pred[i]});
        hi = std::max({hi, truth[i], pred[i]});
    }
    if (!csv) throw IoError("write failed for " + csv_path.string());
    if (points.empty()) lo = 0.0, hi = 1.0;
    if (hi <= lo) hi = lo + 1.0;

    constexpr double kSize = 800.0, kMargin = 70.0, kPlot = kSize - 2 * kMargin;
    auto sx = [&](double v) { return kMargin + (v - lo) / (hi - lo) * kPlot; };
    auto sy = [&](double v) { return kSize - kMargin - (v - lo) / (hi - lo) * kPlot; };
    std::ofstream svg(svg_path, std::ios::trunc);
    if (!svg) throw IoError("cannot open " + svg_path.string() + " for writing");
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"800\" viewBox=\"0 0 800 800\">\n"
        << "<rect width=\"800\" height=\"800\" fill=\"white\"/>\n";
    std::snprintf(buf, sizeof buf, "%.2f", kPlot);
    svg << "<rect x=\"" << kMargin << "\" y=\"" << kMargin << "\" width=\"" << buf << "\" height=\"" << buf
        << "\" fill=\"none\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << sx(lo) << "\" y1=\"" << sy(lo) << "\" x2=\"" << sx(hi) << "\" y2=\"" << sy(hi)
        << "\" stroke=\"red\" stroke-width=\"1.5\"/>\n<g fill=\"steelblue\" fill-opacity=\"0.5\">\n";
    for (const auto& [o, p] : points) {
        std::snprintf(buf, sizeof buf, "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"1.5\"/>\n", sx(o), sy(p));
        svg << buf;
    }
    svg << "</g>\n";
    for (int t = 0; t <= 4; ++t) {
        const double v = lo + (hi - lo) * t / 4.0;
        std::snprintf(buf, sizeof buf, "%.3g", v);
        svg << "<text x=\"" << sx(v) << "\" y=\"" << kSize - kMargin + 18 << "\" font-size=\"12\" text-anchor=\"middle\">"
            << buf << "</text>\n";
        svg << "<text x=\"" << kMargin - 8 << "\" y=\"" << sy(v) + 4 << "\" font-size=\"12\" text-anchor=\"end\">" << buf
            << "</text>\n";
    }
    svg << "<text x=\"400\" y=\"775\" font-size=\"16\" text-anchor=\"middle\">observed " << variable << "</text>\n"
        << "<text x=\"22\" y=\"400\" font-size=\"16\" text-anchor=\"middle\" transform=\"rotate(-90 22 400)\">predicted "
        << variable << "</text>\n</svg>\n";
    if (!svg) throw IoError("write failed for " + svg_path.string());
}

}  // namespace urbanet
