#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "urbanet/error.hpp"
#include "urbanet/grid.hpp"
#include "urbanet/tiler.hpp"
#include "urbanet/unet.hpp"

namespace urbanet {

// Anything that maps a batch of n x C_in x S x S tiles to n x C_out x S x S outputs.
class TilePredictor {
public:
    virtual ~TilePredictor() = default;
    virtual std::size_t tile_size() const = 0;
    virtual std::size_t input_channels() const = 0;
    virtual std::size_t output_channels() const = 0;
    virtual void predict(std::span<const float> inputs, std::size_t n, std::span<float> outputs) const = 0;
};

class UNetPredictor : public TilePredictor {
public:
    UNetPredictor(UNetSpec spec, UNetParams params) : net_(std::move(spec), std::move(params)) {}

    std::size_t tile_size() const override { return net_.spec().tile_size; }
    std::size_t input_channels() const override { return net_.spec().input_channels; }
    std::size_t output_channels() const override { return net_.spec().output_channels(); }
    void predict(std::span<const float> inputs, std::size_t n, std::span<float> outputs) const override;

    const UNet<float>& net() const { return net_; }

private:
    UNet<float> net_;
};

// Per-pixel world predictions on the unpadded grid. `defined` marks the
// pixels that were evaluated; planes hold NaN elsewhere.
struct PredictionGrid {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::string> names;            // one per output channel
    std::vector<std::vector<double>> planes;   // height*width each
    std::vector<std::uint32_t> counts;         // contributing tiles per pixel
    std::vector<std::uint8_t> defined;

    const std::vector<double>& plane(std::string_view name) const;
};

// Collects every prediction a pixel receives from overlapping windows and
// resolves them by the median (mean of the two central values for even counts).
class MedianAccumulator {
public:
    MedianAccumulator(std::size_t height, std::size_t width, std::size_t channels, std::vector<std::uint8_t> wanted);

    // `values` is C x S x S for the window whose top-left corner sits at
    // (row0, col0) in unpadded coordinates; `valid` (S x S) selects the
    // positions that count (land pixels).
    void add(std::ptrdiff_t row0, std::ptrdiff_t col0, std::size_t size, std::span<const float> values,
             std::span<const float> valid);

    PredictionGrid finish(std::vector<std::string> names) &&;

private:
    std::size_t height_, width_, channels_;
    std::vector<std::uint8_t> wanted_;
    std::vector<std::vector<float>> values_;  // per pixel, channel-interleaved
};

double median_of(std::vector<double> values);

struct PredictOptions {
    std::size_t batch_size = 64;
    std::size_t threads = 1;
};

// Runs the model on every land-centered, unaugmented tile whose window overlaps
// a pixel selected by `filter`, and aggregates per pixel by the median.
PredictionGrid predict_world(const TilePredictor& model, const TileSampler& sampler, SplitFilter filter,
                             const PredictOptions& options = {});

struct MetricsRow {
    std::string model;
    std::size_t window = 0;
    std::string scope = "global";
    std::string stratum;
    std::size_t n_cells = 0;
    std::optional<double> mean_abs, max_abs, std_dev, r2;
    // Published values that are only known as text (e.g. ">50%").
    std::string r2_text;
};

// R^2 is undefined when the truth has zero variance; the other metrics are
// still available on `row`.
class UndefinedMetricError : public Error {
public:
    UndefinedMetricError(const std::string& what, MetricsRow row) : Error(what), row(std::move(row)) {}
    MetricsRow row;
};

// e = truth - pred over cells with stratum != 0. Population standard deviation.
MetricsRow residual_metrics(std::span<const double> pred, std::span<const double> truth,
                            std::span<const std::uint8_t> stratum);

inline constexpr std::string_view kStratumAll = "all_cells";
inline constexpr std::string_view kStratumBuiltup = "builtup_positive";

struct Strata {
    std::vector<std::uint8_t> all_cells;
    std::vector<std::uint8_t> builtup_positive;
};

// all_cells = land pixels passing `filter`; builtup_positive keeps those with builtup_2010 > 0.
Strata stratify(const SplitAssignment& split, SplitFilter filter, std::span<const double> builtup_2010);

struct EvalReport {
    std::vector<MetricsRow> rows;

    // Rejects a second row with the same (model, window, scope, stratum).
    void add(MetricsRow row);
    void merge(const EvalReport& other);
};

// Metrics for both strata; an empty stratum yields a row with n_cells = 0 and no values.
std::vector<MetricsRow> evaluate_strata(std::span<const double> pred, std::span<const double> truth,
                                        const Strata& strata, const std::string& model, std::size_t window,
                                        const std::string& scope = "global");

void export_report(const EvalReport& report, const std::filesystem::path& path);
EvalReport load_report(const std::filesystem::path& path);

// Human-readable stratum headings.
std::string stratum_title(std::string_view stratum);

// Fixed-width text table: one line per (model, window), with R^2 (percent),
// mean, max and std of residuals grouped under each stratum heading.
std::string format_report_table(const EvalReport& report);

// Published SELECT reference rows (CSV in the report layout).
EvalReport load_baseline(const std::filesystem::path& path);
std::filesystem::path default_baseline_path();

// One row per selected cell plus an 800x800 SVG of the point cloud and the identity line.
void export_scatter(std::span<const double> pred, std::span<const double> truth, std::span<const std::uint8_t> cells,
                    const std::string& variable, const std::filesystem::path& csv_path,
                    const std::filesystem::path& svg_path);

}  // namespace urbanet
