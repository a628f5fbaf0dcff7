// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "urbanet/augment.hpp"
#include "urbanet/cli.hpp"
#include "urbanet/eval.hpp"
#include "urbanet/pipeline.hpp"
#include "urbanet/synth.hpp"
#include "urbanet/tiler.hpp"
#include "urbanet/trainer.hpp"
#include "urbanet/unet.hpp"

using namespace urbanet;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;
std::ofstream summary;

void report(const std::string& name, const Outcome& o) {
    const std::string line = std::string(o.pass ? "PASS " : "FAIL ") + name + ": " + o.detail;
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    summary << line << std::endl;
    failures += !o.pass;
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

void log_epoch(const EpochRecord& r, const UNetParams&) {
    std::fprintf(stderr, "  %s epoch %zu train %.3g val %.3g (%.1f s)\n", r.phase.c_str(), r.epoch, r.train_loss,
                 r.val_loss, r.seconds);
}

// ---------------------------------------------------------------------------

Outcome gradient_check() {
    const auto t0 = Clock::now();
    UNetSpec spec;
    spec.input_channels = 9;
    spec.base_features = 4;
    spec.depth = 1;
    spec.tile_size = 8;
    spec.heads = {{"d_urban", 1}};
    GradCheckOptions opt;
    opt.epsilon = 1e-5;
    opt.tolerance = 1e-4;
    double worst = 0.0;
    bool all = true;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto r = grad_check(spec, seed, opt);
        worst = std::max(worst, r.max_rel_error);
        all = all && r.passed;
    }
    const double t = seconds_since(t0);
    return {all && worst < 1e-4 && t < 60.0,
            fmt("max rel error %.3g over 10 seeds (< 1e-4), %.1f s (< 60 s)", worst, t)};
}

double naive_loss(const std::vector<double>& p, const std::vector<double>& y, const std::vector<double>& m,
                  std::size_t n, std::size_t s) {
    double total = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        double sum = 0.0, zeros = 0.0;
        for (std::size_t i = 0; i < s; ++i) {
            for (std::size_t j = 0; j < s; ++j) {
                const std::size_t q = (k * s + i) * s + j;
                sum += m[q] * (y[q] - p[q]) * (y[q] - p[q]);
                zeros += m[q] == 0.0;
            }
        }
        total += sum / (static_cast<double>(s * s) - zeros);
    }
    return total / static_cast<double>(n);
}

Outcome masked_loss() {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> g(0.0, 1.0);
    double worst = 0.0;
    for (int b = 0; b < 100; ++b) {
        const std::size_t n = 1 + rng() % 8, s = 2 + rng() % 27;
        std::vector<double> p(n * s * s), y(p.size()), m(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) {
            p[i] = g(rng);
            y[i] = g(rng);
            m[i] = rng() % 4 ? 1.0 : 0.0;
        }
        for (std::size_t k = 0; k < n; ++k) m[k * s * s + (s / 2) * s + s / 2] = 1.0;
        const double want = naive_loss(p, y, m, n, s);
        worst = std::max(worst, std::abs(masked_mse<double>(p, y, m, n, 1, s) - want));
    }
    const std::vector<double> hp = {1, 1, 1, 0}, hy = {1, 2, 3, 0}, hm = {1, 1, 1, 0};
    const double hand = masked_mse<double>(hp, hy, hm, 1, 1, 2);
    return {worst <= 1e-12 && hand == 5.0 / 3.0,
            fmt("max |diff| %.3g on 100 batches (<= 1e-12), hand case %.17g (== 5/3)", worst, hand)};
}

Outcome augmentation_laws() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    std::size_t bad = 0;
    auto same = [](const TileSample& a, const TileSample& b) {
        return a.input == b.input && a.target == b.target && a.mask == b.mask;
    };
    for (int k = 0; k < 1000; ++k) {
        TileSample t;
        t.size = 1 + rng() % 28;
        t.input_channels = 9;
        t.target_channels = 1 + rng() % 2;
        const std::size_t ss = t.size * t.size;
        t.mask.resize(ss);
        for (auto& m : t.mask) m = rng() % 3 ? 1.0f : 0.0f;
        t.input.resize(9 * ss);
        t.target.resize(t.target_channels * ss);
        for (std::size_t i = 0; i < t.input.size(); ++i) t.input[i] = t.mask[i % ss] ? u(rng) : 0.0f;
        for (std::size_t i = 0; i < t.target.size(); ++i) t.target[i] = t.mask[i % ss] ? u(rng) : 0.0f;
        auto r = t;
        for (int i = 0; i < 4; ++i) r = apply_transform(r, Transform::Rot90);
        bad += !same(r, t);
        bad += !same(apply_transform(apply_transform(t, Transform::HFlip), Transform::HFlip), t);
        bad += !same(apply_transform(apply_transform(t, Transform::VFlip), Transform::VFlip), t);
        bad += !same(apply_transform(apply_transform(t, Transform::HFlip), Transform::Rot180),
                     apply_transform(t, Transform::VFlip));
    }
    const double t = seconds_since(t0);
    return {bad == 0 && t < 10.0, fmt("%zu violations on 1000 tiles, %.2f s (< 10 s)", bad, t)};
}

WorldGrid random_grid(std::size_t h, std::size_t w, double land, std::mt19937_64& rng) {
    WorldGrid g(h, w);
    g.region_table = {{1, "AAA"}, {2, "BBB"}};
    std::bernoulli_distribution b(land);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> v(h * w, 0.0);
    for (std::size_t i = 0; i < h * w; ++i) {
        g.mask[i] = b(rng);
        g.regions[i] = g.mask[i] ? static_cast<std::uint16_t>(1 + (i % w) * 2 / w) : 0;
        if (g.mask[i]) v[i] = u(rng);
    }
    g.add_channel("x", v);
    return g;
}

Outcome tiler_bijection() {
    std::mt19937_64 rng(4);
    std::size_t grids = 0, bad = 0;
    for (std::size_t h : {1u, 7u, 16u, 33u, 64u}) {
        for (std::size_t w : {1u, 9u, 40u, 64u}) {
            auto g = random_grid(h, w, 0.2 + 0.15 * static_cast<double>(rng() % 5), rng);
            const auto split = assign_split(g, {"AAA"});
            const auto padded = PaddedWorld::from(g, kWorldPad);
            TileSampler sampler(padded, split, {{"x"}, {"x"}}, WindowSpec::centered(28));
            const auto all = sample_all(sampler, SplitFilter::All);
            std::set<std::pair<std::size_t, std::size_t>> centers, land;
            for (const auto& p : all.centers()) centers.insert({p.row, p.col});
            for (std::size_t r = 0; r < h; ++r) {
                for (std::size_t c = 0; c < w; ++c) {
                    if (g.is_land(r, c)) land.insert({r, c});
                }
            }
            const auto train = sample_all(sampler, SplitFilter::Train);
            const bool ok = all.size() == land.size() && centers == land && centers.size() == all.size() &&
                            AugmentedStream(train, true).size() == 6 * train.size() &&
                            train.size() == split.train_count;
            bad += !ok;
            ++grids;
        }
    }
    return {bad == 0, fmt("%zu of %zu grids (up to 64x64) mismatched; augmented stream = 6x base", bad, grids)};
}

Outcome median_oracle() {
    std::mt19937_64 rng(5);
    std::size_t grids = 0, mismatches = 0;
    for (std::size_t h = 1; h <= 20; h += 3) {
        for (std::size_t w = 2; w <= 20; w += 6) {
            auto g = random_grid(h, w, 0.6, rng);
            const auto split = assign_split(g, {"BBB"});
            const auto padded = PaddedWorld::from(g, kWorldPad);
            const std::size_t s = 8;
            TileSampler sampler(padded, split, {{"x"}, {"x"}}, WindowSpec::centered(s));
            UNetSpec spec;
            spec.input_channels = 1;
            spec.base_features = 2;
            spec.depth = 1;
            spec.tile_size = s;
            const UNetPredictor model(spec, init_params(spec, grids + 1));
            const auto got = predict_world(model, sampler, SplitFilter::All);
            std::vector<std::vector<double>> lists(h * w);
            for (const auto& c : sampler.centers(SplitFilter::All)) {
                const auto tile = sampler.tile_at(c);
                std::vector<float> out(s * s);
                model.predict(tile.input, 1, out);
                for (std::size_t i = 0; i < s; ++i) {
                    for (std::size_t j = 0; j < s; ++j) {
                        const long r = static_cast<long>(c.row + i) - static_cast<long>(s / 2);
                        const long q = static_cast<long>(c.col + j) - static_cast<long>(s / 2);
                        if (r < 0 || q < 0 || r >= static_cast<long>(h) || q >= static_cast<long>(w)) continue;
                        if (!g.is_land(r, q)) continue;
                        lists[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(q)].push_back(out[i * s + j]);
                    }
                }
            }
            for (std::size_t p = 0; p < h * w; ++p) {
                if (!g.mask[p]) continue;
                auto v = lists[p];
                std::sort(v.begin(), v.end());
                const auto m = v.size() / 2;
                const double med = v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
                mismatches += got.planes[0][p] != med;
            }
            ++grids;
        }
    }
    WorldGrid full(60, 60);
    full.mask.assign(3600, 1);
    full.regions.assign(3600, 1);
    full.region_table = {{1, "AAA"}};
    full.add_channel("x", std::vector<double>(3600, 1.0));
    const auto cov = coverage_count(PaddedWorld::from(full, kWorldPad), WindowSpec::centered(28));
    const auto interior = cov[full.index(30, 30)];
    return {mismatches == 0 && interior == 784,
            fmt("%zu mismatched pixels over %zu grids (<= 20x20); interior coverage %u (== 784)", mismatches, grids,
                interior)};
}

Outcome metrics_oracle() {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> g(0.0, 1.0);
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
        std::vector<double> t(50), p(50);
        for (std::size_t i = 0; i < 50; ++i) t[i] = g(rng), p[i] = t[i] + 0.5 * g(rng);
        const auto row = residual_metrics(p, t, std::vector<std::uint8_t>(50, 1));
        double sa = 0, mx = 0, se = 0, st = 0, mt = 0, me = 0;
        for (std::size_t i = 0; i < 50; ++i) mt += t[i] / 50.0, me += (t[i] - p[i]) / 50.0;
        double ve = 0;
        for (std::size_t i = 0; i < 50; ++i) {
            const double e = t[i] - p[i];
            sa += std::abs(e) / 50.0;
            mx = std::max(mx, std::abs(e));
            se += e * e;
            st += (t[i] - mt) * (t[i] - mt);
            ve += (e - me) * (e - me) / 50.0;
        }
        worst = std::max({worst, std::abs(*row.mean_abs - sa), std::abs(*row.max_abs - mx),
                          std::abs(*row.std_dev - std::sqrt(ve)), std::abs(*row.r2 - (1.0 - se / st))});
    }
    const std::vector<double> t = {0.3, 0.1, 0.7, 0.2};
    const std::vector<std::uint8_t> all(4, 1);
    const double perfect = *residual_metrics(t, t, all).r2;
    const double mean = (0.3 + 0.1 + 0.7 + 0.2) / 4.0;
    const double flat = *residual_metrics(std::vector<double>(4, mean), t, all).r2;
    return {worst <= 1e-12 && perfect == 1.0 && std::abs(flat) <= 1e-15,
            fmt("max |diff| %.3g on 100 cases (<= 1e-12); perfect R2 %.17g; mean R2 %.3g", worst, perfect, flat)};
}

// ---------------------------------------------------------------------------

struct WindowRun {
    ModelRun run;
    double r2 = 0.0;
    double seconds = 0.0;
};

WindowRun train_window(const WorldData& data, std::size_t window) {
    std::fprintf(stderr, "training sz%zu\n", window);
    const auto t0 = Clock::now();
    RunOptions opt;
    opt.on_epoch = log_epoch;
    WindowRun w;
    w.run = train_single_task(data, std::string(synth::kUrbanChange), window, TrainConfig{}, opt);
    w.seconds = seconds_since(t0);
    const auto ev = evaluate_model(data, w.run.spec, w.run.params, unet_label(window));
    w.r2 = *ev.rows.at(std::string(synth::kUrbanChange))[0].r2;
    std::fprintf(stderr, "sz%zu: test R2 %.4f after %zu epochs, %.0f s\n", window, w.r2, w.run.history.epochs.size(),
                 w.seconds);
    return w;
}

// Single-task vs multi-task on task 2 over ten seeds of a smaller world.
Outcome multitask_contract(std::size_t size, std::size_t window, std::size_t epochs) {
    std::size_t wins = 0, regressions = 0, intact = 0;
    std::ostringstream per_seed;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        SynthConfig sc;
        sc.seed = seed;
        sc.height = sc.width = size;
        const auto data = prepare_world(gen_world(sc), default_test_regions());
        TrainConfig tc;
        tc.max_epochs = epochs;
        tc.seed = seed;
        const auto pre = train_single_task(data, std::string(synth::kUrbanChange), window, tc);
        const auto single = train_single_task(data, std::string(synth::kPopChange), window, tc);
        auto sched = MultiTaskSchedule::defaults(std::string(synth::kUrbanChange));
        sched.phase1 = tc;
        sched.phase2 = tc;
        sched.phase2.learning_rate = 1e-4;
        const auto mt = train_multitask_from(data, pre, std::string(synth::kPopChange), window, sched, seed);
        const double rs = *evaluate_model(data, single.spec, single.params, kSingleTaskLabel)
                               .rows.at(std::string(synth::kPopChange))[0]
                               .r2;
        const double rm = *evaluate_model(data, mt.run.spec, mt.run.params, multitask_label(window))
                               .rows.at(std::string(synth::kPopChange))[0]
                               .r2;
        wins += rm > rs;
        regressions += rm < rs - 0.005;
        intact += mt.frozen_intact;
        per_seed << (seed > 1 ? " " : "") << fmt("%+.4f", rm - rs);
        std::fprintf(stderr, "multitask seed %llu: single %.4f multi %.4f frozen %d\n",
                     static_cast<unsigned long long>(seed), rs, rm, mt.frozen_intact ? 1 : 0);
    }
    return {intact == 10 && regressions == 0 && wins >= 7,
            fmt("frozen intact %zu/10; improved %zu/10 (>= 7); worse than single - 0.005: %zu (== 0); "
                "task-2 R2 gain per seed [%s]; %zux%zu world, sz%zu, %zu epochs per stage",
                intact, wins, regressions, per_seed.str().c_str(), size, size, window, epochs)};
}

void save_run(const fs::path& path, const ModelRun& run, const NormStats& stats) {
    save_checkpoint(run.spec, run.params, path);
    auto norm = path;
    norm.replace_extension(".norm");
    save_norm_stats(stats, norm);
}

int cli(std::vector<std::string> args) {
    args.insert(args.begin(), "urbanet");
    std::ostringstream out;
    return run_cli(args, out, std::cerr);
}

// Drives the eval and report subcommands over the trained window sweep plus a multi-task sz28 model.
Outcome report_fidelity(const fs::path& dir, const WorldData& data, const std::vector<WindowRun>& windows,
                        std::size_t mt_epochs) {
    const auto& sz28 = windows.front();
    std::fprintf(stderr, "training multi-task sz28 for the report\n");
    auto sched = MultiTaskSchedule::defaults(std::string(synth::kUrbanChange));
    sched.phase1.max_epochs = mt_epochs;
    sched.phase2.max_epochs = mt_epochs;
    RunOptions opt;
    opt.on_epoch = log_epoch;
    const auto mt = train_multitask_from(data, sz28.run, std::string(synth::kPopChange), 28, sched, 1, opt);
    save_run(dir / "multitask_sz28.unpk", mt.run, data.stats);

    const auto d = dir.string();
    int bad_exit = 0;
    for (const auto& w : windows) {
        const auto name = "unet_sz" + std::to_string(w.run.spec.tile_size) + ".unpk";
        bad_exit += cli({"eval", "--out-dir", d, "--checkpoint", (dir / name).string()}) != 0;
    }
    bad_exit += cli({"eval", "--out-dir", d, "--checkpoint", (dir / "multitask_sz28.unpk").string()}) != 0;
    bad_exit += cli({"report", "--out-dir", d}) != 0;
    if (bad_exit) return {false, fmt("%d eval/report invocations failed", bad_exit)};

    const auto report = load_report(dir / "report_d_urban.csv");
    std::size_t found = 0;
    const std::pair<std::string, std::size_t> keys[] = {
        {unet_label(16), 16}, {unet_label(22), 22}, {unet_label(28), 28}, {multitask_label(28), 28}};
    for (const auto& [label, window] : keys) {
        for (auto stratum : {kStratumAll, kStratumBuiltup}) {
            found += std::any_of(report.rows.begin(), report.rows.end(), [&](const MetricsRow& r) {
                return r.model == label && r.window == window && r.scope == "global" && r.stratum == stratum &&
                       r.r2.has_value();
            });
        }
    }
    std::size_t baseline = 0;
    for (const auto& r : report.rows) baseline += r.model == "SELECT (baseline)" && r.r2_text == ">50%";
    std::ifstream csv(dir / "report_d_urban.csv");
    const std::string text{std::istreambuf_iterator<char>(csv), {}};
    std::ifstream txt(dir / "report_d_urban.txt");
    const std::string table{std::istreambuf_iterator<char>(txt), {}};
    const bool titles = table.find(stratum_title(kStratumAll)) != std::string::npos &&
                        table.find(stratum_title(kStratumBuiltup)) != std::string::npos;
    const bool literal = text.find(",>50%\n") != std::string::npos;
    const bool svg = fs::exists(dir / "scatter_d_urban.svg");

    // The CLI's sz28 row must agree with the in-process evaluation.
    double cli_r2 = std::nan("");
    for (const auto& r : report.rows) {
        if (r.model == unet_label(28) && r.stratum == kStratumAll) cli_r2 = *r.r2;
    }
    const bool consistent = std::abs(cli_r2 - sz28.r2) <= 1e-8;
    return {found == 8 && baseline == 2 && literal && titles && svg && consistent,
            fmt("%zu/8 model x stratum rows; SELECT rows with literal >50%%: %zu/2; stratum headings %s; scatter "
                "SVG %s; CLI sz28 R2 %.6f vs in-process %.6f",
                found, baseline, titles ? "present" : "missing", svg ? "present" : "missing", cli_r2, sz28.r2)};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"urbanet acceptance run"};
    std::string out_dir = "acceptance_run";
    std::size_t mt_size = 48, mt_window = 16, mt_epochs = 4, report_mt_epochs = 2;
    bool skip_training = false;
    app.add_option("--out-dir", out_dir, "scratch directory for models and reports");
    app.add_option("--multitask-size", mt_size, "world size for the ten-seed multi-task comparison");
    app.add_option("--multitask-window", mt_window, "window size for the ten-seed multi-task comparison");
    app.add_option("--multitask-epochs", mt_epochs, "epochs per stage in the ten-seed comparison");
    app.add_option("--report-multitask-epochs", report_mt_epochs, "epochs per phase for the reported multi-task model");
    app.add_flag("--skip-training", skip_training, "only run the fast property checks");
    CLI11_PARSE(app, argc, argv);

    const fs::path dir = out_dir;
    fs::remove_all(dir);
    fs::create_directories(dir);
    summary.open(dir / "acceptance.txt");

    report("gradient-correctness", gradient_check());
    report("masked-loss-oracle", masked_loss());
    report("augmentation-group-laws", augmentation_laws());
    report("tiler-bijection", tiler_bijection());
    report("median-aggregation-oracle", median_oracle());
    report("metrics-oracle", metrics_oracle());
    if (skip_training) return failures ? 1 : 0;

    SynthConfig sc;
    sc.noise_std = 0.01;
    const auto raw = gen_world(sc);
    save_grid(raw, dir / "world.wgrd");
    const auto data = prepare_world(raw, default_test_regions());

    std::vector<WindowRun> windows;
    for (std::size_t w : {28u, 22u, 16u}) {
        windows.push_back(train_window(data, w));
        save_run(dir / ("unet_sz" + std::to_string(w) + ".unpk"), windows.back().run, data.stats);
    }
    const auto& w28 = windows[0];
    report("end-to-end-learning",
           {w28.r2 >= 0.95 && w28.seconds < 600.0 && w28.run.history.epochs.size() <= 100,
            fmt("96x96 world, sz28 test R2 %.4f (>= 0.95) after %zu epochs (<= 100) in %.0f s (< 600 s)", w28.r2,
                w28.run.history.epochs.size(), w28.seconds)});
    const double r28 = windows[0].r2, r22 = windows[1].r2, r16 = windows[2].r2;
    report("window-size-ordering", {r28 >= r22 - 0.01 && r22 >= r16 - 0.01,
                                    fmt("R2 sz28 %.4f, sz22 %.4f, sz16 %.4f (each >= next - 0.01)", r28, r22, r16)});
    report("report-fidelity", report_fidelity(dir, data, windows, report_mt_epochs));
    report("multitask-contract", multitask_contract(mt_size, mt_window, mt_epochs));
    return failures ? 1 : 0;
}
