#include "urbanet/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "urbanet/error.hpp"

namespace urbanet {

void TrainConfig::validate() const {
    if (batch_size == 0) throw SpecError("batch_size must be at least 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw SpecError("learning_rate must be >= 0");
    if (patience == 0) throw SpecError("patience must be at least 1");
    if (!(min_delta >= 0.0)) throw SpecError("min_delta must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw SpecError("Adam betas must lie in [0, 1)");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw SpecError("momentum must lie in [0, 1)");
}

void TrainHistory::append(const TrainHistory& other) {
    const std::size_t offset = epochs.size();
    epochs.insert(epochs.end(), other.epochs.begin(), other.epochs.end());
    best_epoch = offset + other.best_epoch;
    best_val_loss = other.best_val_loss;
}

void write_history_csv(const TrainHistory& history, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "epoch,phase,train_loss,val_loss,seconds\n";
    char buf[160];
    for (const auto& e : history.epochs) {
        std::snprintf(buf, sizeof buf, "%zu,%s,%.10g,%.10g,%.3f\n", e.epoch, e.phase.c_str(), e.train_loss, e.val_loss,
                      e.seconds);
        out << buf;
    }
    if (!out) throw IoError("write failed for " + path.string());
}

Transform AugmentedStream::transform_of(std::size_t k) const {
    if (factor_ == 1) return Transform::Identity;
    const std::size_t n = base_->size();
    return kAugmentations[(k / n + k % n) % kAugmentations.size()];
}

TileSample AugmentedStream::operator[](std::size_t k) const {
    if (k >= size()) throw BoundsError("augmented stream index out of range");
    TileSample t = (*base_)[base_index(k)];
    const Transform tr = transform_of(k);
    return tr == Transform::Identity ? t : apply_transform(t, tr);
}

Batch<float> make_batch(std::span<const TileSample> tiles) {
    Batch<float> b;
    if (tiles.empty()) return b;
    const auto& f = tiles.front();
    b.resize(tiles.size(), f.input_channels, f.target_channels, f.size);
    const std::size_t plane = f.plane_size();
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        const auto& t = tiles[i];
        if (t.size != f.size || t.input_channels != f.input_channels || t.target_channels != f.target_channels) {
            throw ShapeError("tiles in a batch must share one shape");
        }
        std::copy(t.input.begin(), t.input.end(), b.inputs.begin() + i * f.input_channels * plane);
        std::copy(t.target.begin(), t.target.end(), b.targets.begin() + i * f.target_channels * plane);
        std::copy(t.mask.begin(), t.mask.end(), b.masks.begin() + i * plane);
    }
    return b;
}

double evaluate_loss(const UNet<float>& net, const TileStream& tiles, std::span<const double> channel_weights,
                     std::size_t batch_size) {
    if (tiles.empty()) throw PreconditionError("evaluate_loss on an empty stream");
    double total = 0.0;
    std::vector<TileSample> chunk;
    for (std::size_t start = 0; start < tiles.size(); start += batch_size) {
        chunk.clear();
        for (std::size_t i = start; i < std::min(tiles.size(), start + batch_size); ++i) chunk.push_back(tiles[i]);
        const auto b = make_batch(chunk);
        const auto pred = net.forward(b.inputs, b.n);
        total += masked_mse<float>(pred, b.targets, b.masks, b.n, b.target_channels, b.size, channel_weights) *
                 static_cast<double>(b.n);
    }
    return total / static_cast<double>(tiles.size());
}

namespace {

class Optimizer {
public:
    Optimizer(const TrainConfig& config, const UNetParams& params) : config_(config) {
        first_ = params.zeros_like();
        if (config.optimizer == OptimizerKind::Adam) second_ = params.zeros_like();
    }

    void step(UNetParams& params, const UNetParams& grads, const std::vector<bool>& trainable) {
        ++t_;
        if (config_.learning_rate == 0.0) return;
        const double lr = config_.learning_rate;
        const bool adam = config_.optimizer == OptimizerKind::Adam;
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
        for (std::size_t a = 0; a < params.arrays.size(); ++a) {
            if (!trainable.empty() && !trainable[a]) continue;
            auto& p = params.arrays[a].values;
            const auto& g = grads.arrays[a].values;
            auto& m = first_.arrays[a].values;
            if (adam) {
                auto& v = second_.arrays[a].values;
                const auto b1 = static_cast<float>(config_.beta1), b2 = static_cast<float>(config_.beta2);
                for (std::size_t i = 0; i < p.size(); ++i) {
                    m[i] = b1 * m[i] + (1.0f - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
                    const double mh = m[i] / bc1, vh = v[i] / bc2;
                    p[i] -= static_cast<float>(lr * mh / (std::sqrt(vh) + config_.adam_eps));
                }
            } else {
                const auto mu = static_cast<float>(config_.momentum);
                for (std::size_t i = 0; i < p.size(); ++i) {
                    m[i] = mu * m[i] + g[i];
                    p[i] -= static_cast<float>(lr * m[i]);
                }
            }
        }
    }

private:
    TrainConfig config_;
    UNetParams first_, second_;
    std::size_t t_ = 0;
};

}  // namespace

TrainResult train(const UNetSpec& spec, UNetParams params, const TileStream& train_tiles, const TileStream& val_tiles,
                  const TrainConfig& config, const TrainOptions& options) {
    config.validate();
    check_params(spec, params);
    if (train_tiles.empty()) throw PreconditionError("training stream is empty");
    if (val_tiles.empty()) throw PreconditionError("validation stream is empty");
    if (!options.trainable.empty() && options.trainable.size() != params.arrays.size()) {
        throw ShapeError("trainable mask does not match the parameter arrays");
    }
    const std::vector<bool>* trainable = options.trainable.empty() ? nullptr : &options.trainable;

    UNet<float> net(spec, std::move(params));
    Optimizer opt(config, net.params());
    const AugmentedStream stream(train_tiles, config.augment);
    std::vector<std::size_t> order(stream.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    TrainResult result;
    result.params = net.params();
    UNetParams grads = net.params().zeros_like();
    std::size_t since_best = 0;
    std::vector<TileSample> tiles;
    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        if (config.shuffle) {
            std::mt19937_64 rng(config.seed * 0x9E3779B97F4A7C15ULL + epoch);
            for (std::size_t i = order.size(); i > 1; --i) {
                std::uniform_int_distribution<std::size_t> pick(0, i - 1);
                std::swap(order[i - 1], order[pick(rng)]);
            }
        }
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            tiles.clear();
            for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i) {
                tiles.push_back(stream[order[i]]);
            }
            const auto batch = make_batch(tiles);
            double loss = 0.0;
            try {
                loss = net.loss_and_grad(batch, grads, options.channel_weights, trainable);
            } catch (const NumericError& e) {
                throw NumericError("training diverged in " + options.phase + " epoch " + std::to_string(epoch) + ": " +
                                   e.what());
            }
            loss_sum += loss * static_cast<double>(batch.n);
            opt.step(net.params(), grads, options.trainable);
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.phase = options.phase;
        rec.train_loss = loss_sum / static_cast<double>(order.size());
        rec.val_loss = evaluate_loss(net, val_tiles, options.channel_weights, config.batch_size);
        if (!std::isfinite(rec.val_loss)) {
            throw NumericError("validation loss is not finite in " + options.phase + " epoch " + std::to_string(epoch));
        }
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.history.epochs.push_back(rec);

        const bool first = result.history.epochs.size() == 1;
        if (first || rec.val_loss < result.history.best_val_loss - config.min_delta) {
            result.history.best_epoch = result.history.epochs.size() - 1;
            result.history.best_val_loss = rec.val_loss;
            result.params = net.params();
            since_best = 0;
        } else {
            ++since_best;
        }
        if (options.on_epoch) options.on_epoch(rec, net.params());
        if (since_best >= config.patience) break;
    }
    if (result.history.epochs.empty()) {
        // max_epochs = 0: report the starting point.
        EpochRecord rec;
        rec.phase = options.phase;
        rec.val_loss = evaluate_loss(net, val_tiles, options.channel_weights, config.batch_size);
        result.history.best_val_loss = rec.val_loss;
    }
    result.final_params = net.params();
    return result;
}

std::set<std::uint16_t> holdout_regions(const SplitAssignment& split, const WorldGrid& grid, double fraction,
                                        std::uint64_t seed) {
    if (split.labels.size() != grid.size()) throw ShapeError("split does not match the grid");
    if (!(fraction > 0.0 && fraction < 1.0)) throw PreconditionError("hold-out fraction must lie in (0, 1)");
    std::set<std::uint16_t> present;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (split.labels[i] == SplitLabel::Train) present.insert(grid.regions[i]);
    }
    if (present.size() < 2) throw PreconditionError("need at least two training regions for a validation hold-out");
    std::vector<std::uint16_t> codes(present.begin(), present.end());
    std::mt19937_64 rng(seed ^ 0xA5A5A5A5ULL);
    for (std::size_t i = codes.size(); i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(codes[i - 1], codes[pick(rng)]);
    }
    auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(codes.size())));
    k = std::clamp<std::size_t>(k, 1, codes.size() - 1);
    return {codes.begin(), codes.begin() + static_cast<std::ptrdiff_t>(k)};
}

SplitCenters split_train_val(const TileSampler& sampler, const std::set<std::uint16_t>& val_regions) {
    SplitCenters out;
    const auto& g = sampler.world().grid;
    const std::size_t pad = sampler.world().pad;
    for (const Pixel& p : sampler.centers(SplitFilter::Train)) {
        const auto region = g.regions[g.index(p.row + pad, p.col + pad)];
        (val_regions.count(region) ? out.val : out.train).push_back(p);
    }
    return out;
}

MultiTaskSchedule MultiTaskSchedule::defaults(const std::string& task1) {
    MultiTaskSchedule s;
    s.phase2.learning_rate = 1e-4;
    s.frozen_groups = {"encoder", "decoder." + task1};
    s.phase1_weights = {0.0, 1.0};
    s.phase2_weights = {1.0, 1.0};
    return s;
}

void MultiTaskSchedule::validate(const UNetSpec& spec) const {
    phase1.validate();
    phase2.validate();
    if (!(phase2.learning_rate < phase1.learning_rate)) {
        throw SpecError("fine-tuning learning rate must be smaller than the phase-1 learning rate");
    }
    const std::size_t oc = spec.output_channels();
    if (phase1_weights.size() != oc || phase2_weights.size() != oc) {
        throw SpecError("schedule loss weights need one entry per output channel");
    }
    for (const auto& g : frozen_groups) {
        bool known = g == "encoder";
        for (const auto& h : spec.heads) known = known || g == "decoder." + h.name;
        if (!known) throw SpecError("unknown parameter group '" + g + "'");
    }
}

MultiTaskModel build_multitask(const UNetSpec& pretrained_spec, const UNetParams& pretrained, const HeadSpec& task2,
                               std::uint64_t seed) {
    pretrained_spec.validate();
    check_params(pretrained_spec, pretrained);
    if (pretrained_spec.heads.size() != 1) throw SpecError("multi-task model needs a single-head pretrained model");
    if (pretrained_spec.heads.front().name == task2.name) throw SpecError("task-2 head name collides with task 1");
    MultiTaskModel m;
    m.spec = pretrained_spec;
    m.spec.heads.push_back(task2);
    m.params = init_params(m.spec, seed);
    for (auto& a : m.params.arrays) {
        if (param_group(a.name) == "decoder." + task2.name) continue;
        const auto& src = pretrained.at(a.name);
        if (src.dims != a.dims) throw SpecError("pretrained array " + a.name + " has unexpected dims");
        a.values = src.values;
    }
    return m;
}

std::vector<bool> trainable_mask(const UNetParams& params, const std::vector<std::string>& frozen_groups) {
    std::vector<bool> mask(params.arrays.size(), true);
    for (std::size_t i = 0; i < params.arrays.size(); ++i) {
        const auto group = param_group(params.arrays[i].name);
        if (std::find(frozen_groups.begin(), frozen_groups.end(), group) != frozen_groups.end()) mask[i] = false;
    }
    return mask;
}

MultiTaskResult train_multitask(MultiTaskModel model, const TileStream& train_tiles, const TileStream& val_tiles,
                                const MultiTaskSchedule& schedule, EpochCallback on_epoch) {
    schedule.validate(model.spec);
    MultiTaskResult out;
    for (const auto& g : schedule.frozen_groups) out.frozen_hashes.emplace_back(g, params_hash(model.params, g));

    TrainOptions p1;
    p1.phase = "phase1";
    p1.trainable = trainable_mask(model.params, schedule.frozen_groups);
    p1.channel_weights = schedule.phase1_weights;
    p1.on_epoch = [&](const EpochRecord& rec, const UNetParams& current) {
        for (const auto& [g, h] : out.frozen_hashes) out.frozen_intact = out.frozen_intact && params_hash(current, g) == h;
        if (on_epoch) on_epoch(rec, current);
    };
    auto r1 = train(model.spec, std::move(model.params), train_tiles, val_tiles, schedule.phase1, p1);
    for (const auto& [g, h] : out.frozen_hashes) out.frozen_intact = out.frozen_intact && params_hash(r1.params, g) == h;
    out.history = r1.history;

    TrainOptions p2;
    p2.phase = "phase2";
    p2.channel_weights = schedule.phase2_weights;
    p2.on_epoch = on_epoch;
    auto r2 = train(model.spec, std::move(r1.params), train_tiles, val_tiles, schedule.phase2, p2);
    out.history.append(r2.history);
    out.model = {model.spec, std::move(r2.params)};
    return out;
}

}  // namespace urbanet
