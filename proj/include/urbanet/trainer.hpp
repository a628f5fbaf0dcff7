#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "urbanet/augment.hpp"
#include "urbanet/tiler.hpp"
#include "urbanet/unet.hpp"

namespace urbanet {

enum class OptimizerKind { Adam, SgdMomentum };

struct TrainConfig {
    std::size_t batch_size = 64;
    double learning_rate = 1e-3;
    OptimizerKind optimizer = OptimizerKind::Adam;
    double momentum = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t max_epochs = 12;
    std::size_t patience = 10;
    double min_delta = 1e-7;
    std::uint64_t seed = 1;
    bool shuffle = true;
    // Expand the training stream with the five geometric transforms.
    bool augment = true;

    void validate() const;
};

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based, counted per phase
    std::string phase;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double seconds = 0.0;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;  // index into epochs of the restored parameters
    double best_val_loss = 0.0;

    void append(const TrainHistory& other);
};

void write_history_csv(const TrainHistory& history, const std::filesystem::path& path);

// Training stream of 6N items over N base tiles. Item k is tile k mod N under
// transform (k / N + k mod N) mod 6, so each round over the tiles uses all six
// transforms and every tile gets each transform exactly once.
class AugmentedStream {
public:
    AugmentedStream(const TileStream& base, bool augment) : base_(&base), factor_(augment ? 6 : 1) {}

    std::size_t size() const { return base_->size() * factor_; }
    TileSample operator[](std::size_t k) const;
    Transform transform_of(std::size_t k) const;
    std::size_t base_index(std::size_t k) const { return k % base_->size(); }

private:
    const TileStream* base_;
    std::size_t factor_;
};

using EpochCallback = std::function<void(const EpochRecord&, const UNetParams& current)>;

struct TrainOptions {
    std::string phase = "single";
    // Per-parameter-array flag; empty means everything trains.
    std::vector<bool> trainable;
    // Per-output-channel loss weights; empty means equal.
    std::vector<double> channel_weights;
    // Called after each epoch with the parameters at that point.
    EpochCallback on_epoch;
};

struct TrainResult {
    UNetParams params;  // parameters of the best validation epoch
    UNetParams final_params;
    TrainHistory history;
};

// The loss targets are the target channels of the tile streams.
TrainResult train(const UNetSpec& spec, UNetParams params, const TileStream& train_tiles, const TileStream& val_tiles,
                  const TrainConfig& config, const TrainOptions& options = {});

// Mean per-tile masked MSE of the unaugmented stream.
double evaluate_loss(const UNet<float>& net, const TileStream& tiles, std::span<const double> channel_weights = {},
                     std::size_t batch_size = 64);

// Gathers tiles into a batch (inputs, targets, masks).
Batch<float> make_batch(std::span<const TileSample> tiles);

// Deterministic region-based hold-out: ceil(fraction * R) of the R train regions
// that contain land, chosen by a seeded shuffle.
std::set<std::uint16_t> holdout_regions(const SplitAssignment& split, const WorldGrid& grid, double fraction,
                                        std::uint64_t seed);

struct SplitCenters {
    std::vector<Pixel> train;
    std::vector<Pixel> val;
};
SplitCenters split_train_val(const TileSampler& sampler, const std::set<std::uint16_t>& val_regions);

struct MultiTaskSchedule {
    TrainConfig phase1;
    TrainConfig phase2;
    std::vector<std::string> frozen_groups;  // frozen during phase 1
    std::vector<double> phase1_weights;      // per output channel
    std::vector<double> phase2_weights;

    // Defaults for a task-1 head named `task1` and a new head named `task2`.
    static MultiTaskSchedule defaults(const std::string& task1);
    void validate(const UNetSpec& spec) const;
};

struct MultiTaskModel {
    UNetSpec spec;
    UNetParams params;
};

// Pretrained single-head encoder and decoder copied bitwise, fresh decoder for `task2`.
MultiTaskModel build_multitask(const UNetSpec& pretrained_spec, const UNetParams& pretrained, const HeadSpec& task2,
                               std::uint64_t seed);

std::vector<bool> trainable_mask(const UNetParams& params, const std::vector<std::string>& frozen_groups);

struct MultiTaskResult {
    MultiTaskModel model;
    TrainHistory history;
    // Group hashes before phase 1, and whether they held at every phase-1 epoch boundary.
    std::vector<std::pair<std::string, std::uint64_t>> frozen_hashes;
    bool frozen_intact = true;
};

MultiTaskResult train_multitask(MultiTaskModel model, const TileStream& train_tiles, const TileStream& val_tiles,
                                const MultiTaskSchedule& schedule,
                                EpochCallback on_epoch = {});

}  // namespace urbanet
