#include "urbanet/pipeline.hpp"

#include <algorithm>

#include "urbanet/error.hpp"
#include "urbanet/synth.hpp"

namespace urbanet {

const std::vector<std::string>& default_input_channels() {
    static const std::vector<std::string> names(synth::kInputChannels.begin(), synth::kInputChannels.end());
    return names;
}

const std::set<std::string>& default_test_regions() {
    static const std::set<std::string> regions = {"USA", "CHN", "GBR", "MWI"};
    return regions;
}

std::vector<std::string> normalized_channel_names(const WorldGrid& grid) {
    std::vector<std::string> names = default_input_channels();
    if (grid.find_channel(synth::kPopChange)) names.emplace_back(synth::kPopChange);
    return names;
}

WorldData prepare_world(WorldGrid raw, const std::set<std::string>& test_regions, const std::optional<NormStats>& stats,
                        std::size_t pad) {
    raw.validate();
    WorldData d;
    d.split = assign_split(raw, test_regions);
    const auto names = normalized_channel_names(raw);
    auto norm = normalize_channels(raw, stats, d.split, names);
    d.stats = std::move(norm.stats);
    d.normalized = std::move(norm.grid);
    d.padded = PaddedWorld::from(d.normalized, pad);
    d.raw = std::move(raw);
    return d;
}

std::string unet_label(std::size_t window) { return "U-Net (sz" + std::to_string(window) + ")"; }
std::string multitask_label(std::size_t window) { return "Multi-task (sz" + std::to_string(window) + ")"; }

ModelRun train_single_task(const WorldData& data, const std::string& target, std::size_t window,
                           const TrainConfig& config, const RunOptions& options) {
    const ChannelLayout layout{default_input_channels(), {target}};
    const TileSampler sampler(data.padded, data.split, layout, WindowSpec::centered(window));
    const auto held = holdout_regions(data.split, data.raw, options.val_fraction, config.seed);
    auto centers = split_train_val(sampler, held);
    const TileStream train_tiles(sampler, std::move(centers.train));
    const TileStream val_tiles(sampler, std::move(centers.val));

    UNetSpec spec = UNetSpec::desk_scale(window);
    spec.base_features = options.base_features;
    spec.depth = options.depth;
    spec.input_channels = layout.inputs.size();
    spec.heads = {{target, 1}};
    spec.validate();

    TrainOptions topt;
    topt.on_epoch = options.on_epoch;
    auto r = train(spec, init_params(spec, config.seed), train_tiles, val_tiles, config, topt);
    return {spec, std::move(r.params), std::move(r.final_params), std::move(r.history)};
}

MultiTaskRun train_multitask_from(const WorldData& data, const ModelRun& pretrained, const std::string& task2,
                                  std::size_t window, const MultiTaskSchedule& schedule, std::uint64_t seed,
                                  const RunOptions& options) {
    if (pretrained.spec.tile_size != window) throw ShapeError("pretrained model was trained on another window size");
    const std::string task1 = pretrained.spec.heads.front().name;
    const ChannelLayout layout{default_input_channels(), {task1, task2}};
    const TileSampler sampler(data.padded, data.split, layout, WindowSpec::centered(window));
    const auto held = holdout_regions(data.split, data.raw, options.val_fraction, schedule.phase1.seed);
    auto centers = split_train_val(sampler, held);
    const TileStream train_tiles(sampler, std::move(centers.train));
    const TileStream val_tiles(sampler, std::move(centers.val));

    auto model = build_multitask(pretrained.spec, pretrained.params, {task2, 1}, seed);
    auto r = train_multitask(std::move(model), train_tiles, val_tiles, schedule, options.on_epoch);
    MultiTaskRun out;
    out.run.spec = r.model.spec;
    out.run.params = std::move(r.model.params);
    out.run.final_params = out.run.params;
    out.run.history = std::move(r.history);
    out.frozen_intact = r.frozen_intact;
    return out;
}

EvalOutcome evaluate_model(const WorldData& data, const UNetSpec& spec, const UNetParams& params,
                           const std::string& label, SplitFilter filter, const PredictOptions& options) {
    ChannelLayout layout{default_input_channels(), {}};
    for (const auto& h : spec.heads) {
        if (h.output_channels != 1) throw SpecError("evaluation expects one output channel per head");
        layout.targets.push_back(h.name);
    }
    const TileSampler sampler(data.padded, data.split, layout, WindowSpec::centered(spec.tile_size));
    const UNetPredictor model(spec, params);
    EvalOutcome out;
    out.prediction = predict_world(model, sampler, filter, options);
    out.strata = stratify(data.split, filter, data.raw.channel(synth::kBuiltup2010).plane);
    for (const auto& target : layout.targets) {
        out.rows[target] = evaluate_strata(out.prediction.plane(target), data.normalized.channel(target).plane,
                                           out.strata, label, spec.tile_size);
    }
    return out;
}

}  // namespace urbanet
