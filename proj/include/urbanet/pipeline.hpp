#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "urbanet/eval.hpp"
#include "urbanet/grid.hpp"
#include "urbanet/tiler.hpp"
#include "urbanet/trainer.hpp"
#include "urbanet/unet.hpp"

namespace urbanet {

inline constexpr std::size_t kWorldPad = 20;

const std::vector<std::string>& default_input_channels();
const std::set<std::string>& default_test_regions();

// Channels rescaled by train-split min-max statistics: the nine inputs and d_pop.
// d_urban and urban_2010 stay in fraction units.
std::vector<std::string> normalized_channel_names(const WorldGrid& grid);

// A world ready for tiling: split, normalized, padded.
struct WorldData {
    WorldGrid raw;
    SplitAssignment split;
    NormStats stats;
    WorldGrid normalized;  // unpadded
    PaddedWorld padded;
};

WorldData prepare_world(WorldGrid raw, const std::set<std::string>& test_regions,
                        const std::optional<NormStats>& stats = std::nullopt, std::size_t pad = kWorldPad);

std::string unet_label(std::size_t window);        // "U-Net (sz28)"
std::string multitask_label(std::size_t window);   // "Multi-task (sz28)"
inline const std::string kSingleTaskLabel = "Single-task";

struct ModelRun {
    UNetSpec spec;
    UNetParams params;
    UNetParams final_params;
    TrainHistory history;
};

struct RunOptions {
    std::size_t base_features = 8;
    std::size_t depth = 2;
    double val_fraction = 0.1;
    EpochCallback on_epoch;
};

// Trains a fresh single-head network on `target` with a region-held-out validation set.
ModelRun train_single_task(const WorldData& data, const std::string& target, std::size_t window,
                           const TrainConfig& config, const RunOptions& options = {});

// Multi-task fine-tuning from a single-task model; the new head is `task2`.
struct MultiTaskRun {
    ModelRun run;
    bool frozen_intact = false;
};
MultiTaskRun train_multitask_from(const WorldData& data, const ModelRun& pretrained, const std::string& task2,
                                  std::size_t window, const MultiTaskSchedule& schedule, std::uint64_t seed,
                                  const RunOptions& options = {});

struct EvalOutcome {
    PredictionGrid prediction;
    std::map<std::string, std::vector<MetricsRow>> rows;  // per target
    Strata strata;
};

// Median-aggregated predictions over `filter` pixels and both strata for each head.
EvalOutcome evaluate_model(const WorldData& data, const UNetSpec& spec, const UNetParams& params,
                           const std::string& label, SplitFilter filter = SplitFilter::Test,
                           const PredictOptions& options = {});

}  // namespace urbanet
