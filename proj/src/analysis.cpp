// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0

#include "analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/format.h>

#include "errors.hpp"

namespace fs = std::filesystem;

namespace moeprune {

RankProfile rank_profile(const ScoreTable& table) {
    RankProfile profile;
    profile.layer_count = table.num_layers();
    profile.expert_count = table.experts_per_layer();
    profile.rows.reserve(profile.layer_count);
    profile.degenerate.reserve(profile.layer_count);
    for (const auto& scores : table.layers) {
        std::vector<double> row = scores;
        std::sort(row.begin(), row.end(), std::greater<double>());
        const double hi = row.front();
        const double lo = row.back();
        if (hi == lo) {
            std::fill(row.begin(), row.end(), 0.5);
            profile.degenerate.push_back(true);
        } else {
            for (double& v : row) v = (v - lo) / (hi - lo);
            profile.degenerate.push_back(false);
        }
        profile.rows.push_back(std::move(row));
    }
    return profile;
}

namespace {

// linear interpolation between order statistics at position q*(n-1)
double quantile_sorted(std::span<const double> sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const size_t lo = static_cast<size_t>(std::floor(pos));
    const size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

} // namespace

std::vector<std::optional<double>> separation_metric(const ScoreTable& table) {
    std::vector<std::optional<double>> out;
    out.reserve(table.num_layers());
    for (const auto& scores : table.layers) {
        if (scores.size() < 4) {
            out.push_back(std::nullopt);
            continue;
        }
        std::vector<double> rescaled = scores;
        const auto [lo_it, hi_it] = std::minmax_element(rescaled.begin(), rescaled.end());
        const double lo = *lo_it, hi = *hi_it;
        if (hi == lo) {
            out.push_back(0.0);
            continue;
        }
        for (double& v : rescaled) v = (v - lo) / (hi - lo);
        std::sort(rescaled.begin(), rescaled.end());
        out.push_back(quantile_sorted(rescaled, 0.75) - quantile_sorted(rescaled, 0.25));
    }
    return out;
}

double kendall_tau(std::span<const size_t> a, std::span<const size_t> b) {
    const size_t n = a.size();
    if (n != b.size()) {
        throw validation_error(fmt::format("rankings have different lengths: {} vs {}",
                               n, b.size()));
    }
    if (n < 2) throw validation_error("kendall tau needs at least 2 items");

    const size_t max_id = std::max(*std::max_element(a.begin(), a.end()),
                                   *std::max_element(b.begin(), b.end()));
    constexpr size_t kUnset = static_cast<size_t>(-1);
    std::vector<size_t> pos_a(max_id + 1, kUnset), pos_b(max_id + 1, kUnset);
    for (size_t i = 0; i < n; ++i) {
        if (pos_a[a[i]] != kUnset) throw validation_error("first ranking repeats an id");
        pos_a[a[i]] = i;
        if (pos_b[b[i]] != kUnset) throw validation_error("second ranking repeats an id");
        pos_b[b[i]] = i;
    }
    std::vector<size_t> ids;
    ids.reserve(n);
    for (size_t id = 0; id <= max_id; ++id) {
        if ((pos_a[id] == kUnset) != (pos_b[id] == kUnset)) {
            throw validation_error("rankings are not permutations of the same id set");
        }
        if (pos_a[id] != kUnset) ids.push_back(id);
    }

    long long concordant = 0, discordant = 0;
    for (size_t i = 0; i < ids.size(); ++i) {
        for (size_t j = i + 1; j < ids.size(); ++j) {
            const auto da = static_cast<long long>(pos_a[ids[i]]) - static_cast<long long>(pos_a[ids[j]]);
            const auto db = static_cast<long long>(pos_b[ids[i]]) - static_cast<long long>(pos_b[ids[j]]);
            if (da * db > 0) {
                concordant++;
            } else {
                discordant++;
            }
        }
    }
    const double pairs = static_cast<double>(n) * static_cast<double>(n - 1) / 2.0;
    return static_cast<double>(concordant - discordant) / pairs;
}

double StabilityMatrix::mean_tau(size_t a, size_t b) const {
    const auto& taus = tau.at(a).at(b);
    double sum = 0.0;
    for (double t : taus) sum += t;
    return taus.empty() ? 0.0 : sum / static_cast<double>(taus.size());
}

namespace {

// weight-only scores straight from the in-memory experts
std::vector<std::vector<double>> score_toy_model(const ToyMoeModel& model,
                                                 const Criterion& criterion, uint64_t seed) {
    const size_t L = model.num_layers();
    const size_t n = model.experts_per_layer();
    std::vector<std::vector<double>> scores(L, std::vector<double>(n, 0.0));
    for (size_t l = 0; l < L; ++l) {
        if (criterion.id == Criterion::Id::random) {
            scores[l] = random_scores(n, l, seed);
            continue;
        }
        for (size_t e = 0; e < n; ++e) {
            const ExpertTensors& ex = model.layers[l].experts[e];
            switch (criterion.id) {
                case Criterion::Id::aimer:
                    scores[l][e] = aimer_score(ex);
                    break;
                case Criterion::Id::magnitude:
                    scores[l][e] = magnitude_score(ex);
                    break;
                case Criterion::Id::hoyer: {
                    std::vector<float> flat;
                    flat.reserve(ex.numel());
                    for (const auto* t : {&ex.gate, &ex.up, &ex.down}) {
                        flat.insert(flat.end(), t->values.begin(), t->values.end());
                    }
                    scores[l][e] = hoyer_score(flat);
                    break;
                }
                default:
                    break;
            }
        }
    }
    return scores;
}

} // namespace

StabilityMatrix stability_study(const ToyMoeModel& model, const ModelLayout& layout,
                                const Criterion& criterion, std::vector<uint64_t> sizes,
                                uint64_t seed, double ratio, int threads) {
    if (sizes.empty()) throw validation_error("stability study needs at least one size");
    if (!std::is_sorted(sizes.begin(), sizes.end())) {
        throw validation_error("calibration sizes must be ascending");
    }
    const size_t L = model.num_layers();
    const size_t n = model.experts_per_layer();

    StabilityMatrix matrix;
    matrix.criterion = criterion.name();
    matrix.sizes = sizes;
    matrix.seed = seed;
    matrix.ratio = ratio;

    // rankings per size, per layer
    std::vector<std::vector<RankedLayer>> rankings(sizes.size());
    for (size_t s = 0; s < sizes.size(); ++s) {
        std::vector<std::vector<double>> scores;
        if (criterion.requires_calibration) {
            const TokenBatch batch{sizes[s], model.hidden_dim, seed};
            const RoutingStats stats = collect_stats(model, batch, threads);
            scores = scores_from_stats(stats, criterion, layout).layers;
        } else {
            scores = score_toy_model(model, criterion, seed);
        }
        rankings[s].reserve(L);
        for (size_t l = 0; l < L; ++l) {
            rankings[s].push_back(rank_layer(scores[l], criterion, l));
        }
    }

    matrix.tau.assign(sizes.size(),
                      std::vector<std::vector<double>>(sizes.size(), std::vector<double>(L, 1.0)));
    for (size_t a = 0; a < sizes.size(); ++a) {
        for (size_t b = a; b < sizes.size(); ++b) {
            for (size_t l = 0; l < L; ++l) {
                const double t = a == b ? 1.0
                                        : kendall_tau(rankings[a][l].order, rankings[b][l].order);
                matrix.tau[a][b][l] = t;
                matrix.tau[b][a][l] = t;
            }
        }
    }

    // pruned-set overlap vs the largest size at the reference ratio
    size_t p = static_cast<size_t>(std::floor(ratio * static_cast<double>(n) + 0.5));
    p = std::min(p, n - std::min(n, model.top_k));
    matrix.overlap.assign(sizes.size(), 1.0);
    if (p > 0) {
        const size_t ref = sizes.size() - 1;
        for (size_t s = 0; s < sizes.size(); ++s) {
            double acc = 0.0;
            for (size_t l = 0; l < L; ++l) {
                std::vector<size_t> cut_s(rankings[s][l].order.begin(),
                                          rankings[s][l].order.begin() + static_cast<ptrdiff_t>(p));
                std::vector<size_t> cut_r(rankings[ref][l].order.begin(),
                                          rankings[ref][l].order.begin() + static_cast<ptrdiff_t>(p));
                std::sort(cut_s.begin(), cut_s.end());
                std::sort(cut_r.begin(), cut_r.end());
                std::vector<size_t> both;
                std::set_intersection(cut_s.begin(), cut_s.end(), cut_r.begin(), cut_r.end(),
                                      std::back_inserter(both));
                acc += static_cast<double>(both.size()) / static_cast<double>(p);
            }
            matrix.overlap[s] = acc / static_cast<double>(L);
        }
    }
    return matrix;
}

VarianceCurve layer_variance(const ToyMoeModel& model, const TokenBatch& batch,
                             const std::string& variant, int threads) {
    VarianceCurve curve;
    curve.variant = variant;
    curve.tokens = batch.count;
    curve.seed = batch.seed;
    curve.values = run_batch(model, batch, threads).mean_token_variance;
    return curve;
}

ToyMoeModel prune_toy_model(const ToyMoeModel& model, const PruningPlan& plan) {
    if (plan.layers.size() != model.num_layers()) {
        throw validation_error(fmt::format("plan covers {} layers, model has {}",
                               plan.layers.size(), model.num_layers()));
    }
    ToyMoeModel pruned;
    pruned.top_k = model.top_k;
    pruned.hidden_dim = model.hidden_dim;
    pruned.normalize_topk = model.normalize_topk;
    pruned.residual = model.residual;
    pruned.rms_norm = model.rms_norm;
    pruned.rms_eps = model.rms_eps;
    pruned.layers.reserve(model.num_layers());
    for (size_t l = 0; l < model.num_layers(); ++l) {
        const ToyLayer& src = model.layers[l];
        const auto& retained = plan.layers[l].retained;
        ToyLayer dst;
        std::vector<float> rows;
        rows.reserve(retained.size() * src.router.cols);
        for (size_t id : retained) {
            const auto row = src.router.row(id);
            rows.insert(rows.end(), row.begin(), row.end());
        }
        dst.router = Tensor2D(retained.size(), src.router.cols, std::move(rows));
        if (!src.router_bias.empty()) {
            dst.router_bias.reserve(retained.size());
            for (size_t id : retained) dst.router_bias.push_back(src.router_bias[id]);
        }
        dst.experts.reserve(retained.size());
        for (size_t id : retained) dst.experts.push_back(src.experts[id]);
        pruned.layers.push_back(std::move(dst));
    }
    return pruned;
}

// ---------------------------------------------------------------------------
// CSV / SVG emission

namespace {

std::string num(double v) { return fmt::format("{:.12g}", v); }

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw format_error(fmt::format("cannot write '{}'", path.string()));
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

// five-stop blue->teal->green->yellow gradient
std::string heat_color(double v) {
    static const double stops[5][3] = {{68, 1, 84},
                                       {59, 82, 139},
                                       {33, 145, 140},
                                       {94, 201, 98},
                                       {253, 231, 37}};
    v = std::clamp(v, 0.0, 1.0);
    const double pos = v * 4.0;
    const size_t lo = std::min<size_t>(3, static_cast<size_t>(std::floor(pos)));
    const double f = pos - static_cast<double>(lo);
    const int r = static_cast<int>(std::lround(stops[lo][0] + f * (stops[lo + 1][0] - stops[lo][0])));
    const int g = static_cast<int>(std::lround(stops[lo][1] + f * (stops[lo + 1][1] - stops[lo][1])));
    const int b = static_cast<int>(std::lround(stops[lo][2] + f * (stops[lo + 1][2] - stops[lo][2])));
    return fmt::format("rgb({},{},{})", r, g, b);
}

constexpr double kMarginLeft = 70.0;
constexpr double kMarginTop = 40.0;
constexpr double kMarginBottom = 50.0;
constexpr double kMarginRight = 30.0;

class SvgBuilder {
public:
    SvgBuilder(double width, double height, const std::string& title)
        : width_(width), height_(height) {
        body_ += fmt::format(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" "
            "viewBox=\"0 0 {} {}\" font-family=\"sans-serif\">\n",
            num(width), num(height), num(width), num(height));
        body_ += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
        body_ += fmt::format(
            "<text x=\"{}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
            num(width / 2), title);
    }

    void rect(double x, double y, double w, double h, const std::string& fill) {
        body_ += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n",
                             num(x), num(y), num(w), num(h), fill);
    }

    void line(double x1, double y1, double x2, double y2, const std::string& stroke,
              double stroke_width = 1.0) {
        body_ += fmt::format(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{}\" stroke-width=\"{}\"/>\n",
            num(x1), num(y1), num(x2), num(y2), stroke, num(stroke_width));
    }

    void polyline(const std::vector<std::pair<double, double>>& points, const std::string& stroke) {
        std::string pts;
        for (const auto& [x, y] : points) pts += fmt::format("{},{} ", num(x), num(y));
        if (!pts.empty()) pts.pop_back();
        body_ += fmt::format(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n",
            pts, stroke);
    }

    void text(double x, double y, const std::string& s, double size = 11,
              const std::string& anchor = "middle") {
        body_ += fmt::format(
            "<text x=\"{}\" y=\"{}\" font-size=\"{}\" text-anchor=\"{}\">{}</text>\n",
            num(x), num(y), num(size), anchor, s);
    }

    std::string finish() {
        body_ += "</svg>\n";
        return body_;
    }

private:
    double width_, height_;
    std::string body_;
};

void heatmap_svg(const fs::path& path, const std::string& title,
                 const std::vector<std::vector<double>>& grid, const std::string& x_label,
                 const std::string& y_label, double lo, double hi) {
    const size_t rows = grid.size();
    const size_t cols = grid[0].size();
    const double plot_w = std::max<double>(320, 8.0 * static_cast<double>(cols));
    const double plot_h = std::max<double>(160, 12.0 * static_cast<double>(rows));
    const double width = kMarginLeft + plot_w + kMarginRight;
    const double height = kMarginTop + plot_h + kMarginBottom;

    SvgBuilder svg(width, height, title);
    const double cw = plot_w / static_cast<double>(cols);
    const double ch = plot_h / static_cast<double>(rows);
    for (size_t r = 0; r < rows; ++r) {
        for (size_t c = 0; c < cols; ++c) {
            const double v = hi > lo ? (grid[r][c] - lo) / (hi - lo) : 0.5;
            svg.rect(kMarginLeft + cw * static_cast<double>(c),
                     kMarginTop + ch * static_cast<double>(r), cw, ch, heat_color(v));
        }
    }
    svg.text(kMarginLeft + plot_w / 2, height - 14, x_label, 12);
    svg.text(18, kMarginTop + plot_h / 2, y_label, 12);
    svg.text(kMarginLeft - 8, kMarginTop + 10, "0", 10, "end");
    svg.text(kMarginLeft - 8, kMarginTop + plot_h, fmt::format("{}", rows - 1), 10, "end");
    svg.text(kMarginLeft + cw / 2, kMarginTop + plot_h + 16, "0", 10);
    svg.text(kMarginLeft + plot_w - cw / 2, kMarginTop + plot_h + 16,
             fmt::format("{}", cols - 1), 10);
    write_file(path, svg.finish());
}

void line_svg(const fs::path& path, const std::string& title,
              const std::vector<std::pair<std::string, std::vector<double>>>& series,
              const std::string& x_label, const std::string& y_label) {
    static const char* palette[6] = {"#1f77b4", "#d62728", "#2ca02c",
                                     "#9467bd", "#ff7f0e", "#8c564b"};
    const double plot_w = 480, plot_h = 280;
    const double width = kMarginLeft + plot_w + kMarginRight;
    const double height = kMarginTop + plot_h + kMarginBottom;

    double lo = 0.0, hi = 0.0;
    size_t points = 0;
    for (const auto& [name, values] : series) {
        points = std::max(points, values.size());
        for (double v : values) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    if (hi == lo) hi = lo + 1.0;

    SvgBuilder svg(width, height, title);
    svg.line(kMarginLeft, kMarginTop, kMarginLeft, kMarginTop + plot_h, "#333");
    svg.line(kMarginLeft, kMarginTop + plot_h, kMarginLeft + plot_w, kMarginTop + plot_h, "#333");
    for (int tick = 0; tick <= 4; ++tick) {
        const double frac = static_cast<double>(tick) / 4.0;
        const double y = kMarginTop + plot_h * (1.0 - frac);
        svg.line(kMarginLeft - 4, y, kMarginLeft, y, "#333");
        svg.text(kMarginLeft - 8, y + 4, num(lo + frac * (hi - lo)), 10, "end");
    }
    for (size_t s = 0; s < series.size(); ++s) {
        const auto& values = series[s].second;
        std::vector<std::pair<double, double>> pts;
        for (size_t i = 0; i < values.size(); ++i) {
            const double x = kMarginLeft + (points > 1 ? plot_w * static_cast<double>(i) /
                                                             static_cast<double>(points - 1)
                                                       : plot_w / 2);
            const double y = kMarginTop + plot_h * (1.0 - (values[i] - lo) / (hi - lo));
            pts.emplace_back(x, y);
        }
        const std::string color = palette[s % 6];
        svg.polyline(pts, color);
        svg.line(kMarginLeft + plot_w - 120, kMarginTop + 14 * static_cast<double>(s) + 8,
                 kMarginLeft + plot_w - 100, kMarginTop + 14 * static_cast<double>(s) + 8, color, 2);
        svg.text(kMarginLeft + plot_w - 94, kMarginTop + 14 * static_cast<double>(s) + 12,
                 series[s].first, 10, "start");
    }
    svg.text(kMarginLeft + plot_w / 2, height - 14, x_label, 12);
    svg.text(18, kMarginTop + plot_h / 2, y_label, 12);
    svg.text(kMarginLeft, kMarginTop + plot_h + 16, "0", 10);
    svg.text(kMarginLeft + plot_w, kMarginTop + plot_h + 16, fmt::format("{}", points - 1), 10);
    write_file(path, svg.finish());
}

fs::path with_suffix(const fs::path& prefix, const std::string& suffix) {
    fs::path out = prefix;
    out += suffix;
    return out;
}

} // namespace

void export_profile(const RankProfile& profile, const fs::path& prefix) {
    if (profile.rows.empty() || profile.expert_count == 0) {
        throw validation_error("refusing to export an empty rank profile");
    }
    std::string csv = "layer,rank,value\n";
    for (size_t l = 0; l < profile.rows.size(); ++l) {
        for (size_t r = 0; r < profile.rows[l].size(); ++r) {
            csv += fmt::format("{},{},{}\n", l, r, num(profile.rows[l][r]));
        }
    }
    write_file(with_suffix(prefix, "_profile.csv"), csv);
    heatmap_svg(with_suffix(prefix, "_profile.svg"), "Within-layer rank profile", profile.rows,
                "expert rank", "layer", 0.0, 1.0);
}

void export_separation(const ScoreTable& table, const fs::path& prefix) {
    const auto iqr = separation_metric(table);
    std::string csv = "layer,criterion,iqr\n";
    for (size_t l = 0; l < iqr.size(); ++l) {
        csv += fmt::format("{},{},{}\n", l, table.criterion.name(),
                           iqr[l] ? num(*iqr[l]) : "skipped");
    }
    write_file(with_suffix(prefix, "_separation.csv"), csv);
}

void export_scores(const ScoreTable& table, const fs::path& prefix) {
    if (table.layers.empty()) throw validation_error("refusing to export an empty score table");
    std::string csv = "layer,expert,score\n";
    double lo = table.layers[0][0], hi = table.layers[0][0];
    for (size_t l = 0; l < table.num_layers(); ++l) {
        for (size_t e = 0; e < table.layers[l].size(); ++e) {
            const double v = table.layers[l][e];
            lo = std::min(lo, v);
            hi = std::max(hi, v);
            csv += fmt::format("{},{},{}\n", l, e, num(v));
        }
    }
    write_file(with_suffix(prefix, "_scores.csv"), csv);
    heatmap_svg(with_suffix(prefix, "_scores.svg"),
                fmt::format("Expert scores ({})", table.criterion.name()), table.layers,
                "expert", "layer", lo, hi);
}

void export_variance(std::span<const VarianceCurve> curves, const fs::path& prefix) {
    if (curves.empty() || curves[0].values.empty()) {
        throw validation_error("refusing to export an empty variance curve");
    }
    std::string csv = "layer,variant,value\n";
    for (const auto& curve : curves) {
        for (size_t l = 0; l < curve.values.size(); ++l) {
            csv += fmt::format("{},{},{}\n", l, curve.variant, num(curve.values[l]));
        }
    }
    // estimator note: per-token variance across hidden dims, sample (d-1) form
    csv += fmt::format("# variance=sample(dims),tokens={},seed={}\n", curves[0].tokens,
                       curves[0].seed);
    write_file(with_suffix(prefix, "_variance.csv"), csv);

    std::vector<std::pair<std::string, std::vector<double>>> series;
    for (const auto& curve : curves) series.emplace_back(curve.variant, curve.values);
    line_svg(with_suffix(prefix, "_variance.svg"), "Layer-wise hidden-state variance", series,
             "layer (0 = input)", "mean token variance");
}

void export_stability(const StabilityMatrix& matrix, const fs::path& prefix) {
    if (matrix.sizes.empty() || matrix.tau.empty()) {
        throw validation_error("refusing to export an empty stability matrix");
    }
    std::string csv = "size_a,size_b,layer,tau\n";
    for (size_t a = 0; a < matrix.sizes.size(); ++a) {
        for (size_t b = 0; b < matrix.sizes.size(); ++b) {
            for (size_t l = 0; l < matrix.tau[a][b].size(); ++l) {
                csv += fmt::format("{},{},{},{}\n", matrix.sizes[a], matrix.sizes[b], l,
                                   num(matrix.tau[a][b][l]));
            }
        }
    }
    write_file(with_suffix(prefix, "_stability.csv"), csv);

    std::string overlap_csv = "size,overlap\n";
    for (size_t s = 0; s < matrix.sizes.size(); ++s) {
        overlap_csv += fmt::format("{},{}\n", matrix.sizes[s], num(matrix.overlap[s]));
    }
    write_file(with_suffix(prefix, "_overlap.csv"), overlap_csv);

    std::vector<std::vector<double>> grid(matrix.sizes.size(),
                                          std::vector<double>(matrix.sizes.size(), 1.0));
    for (size_t a = 0; a < matrix.sizes.size(); ++a) {
        for (size_t b = 0; b < matrix.sizes.size(); ++b) grid[a][b] = matrix.mean_tau(a, b);
    }
    heatmap_svg(with_suffix(prefix, "_stability.svg"),
                fmt::format("Ranking stability across calibration sizes ({})", matrix.criterion),
                grid, "size index", "size index", -1.0, 1.0);
}

} // namespace moeprune
