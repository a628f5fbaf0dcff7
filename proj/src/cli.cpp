#include "urbanet/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "urbanet/config.hpp"
#include "urbanet/error.hpp"
#include "urbanet/eval.hpp"
#include "urbanet/grid.hpp"
#include "urbanet/pipeline.hpp"
#include "urbanet/synth.hpp"
#include "urbanet/trainer.hpp"
#include "urbanet/unet.hpp"

namespace urbanet {

namespace fs = std::filesystem;

namespace {

// Every setting with its default; flags and config files override these.
const std::vector<std::pair<std::string, std::string>>& defaults() {
    static const std::vector<std::pair<std::string, std::string>> d = {
        {"seed", "1"},
        {"window", "28"},
        {"threads", "1"},
        {"out_dir", "."},
        {"checkpoint", ""},
        {"test_regions", "USA,CHN,GBR,MWI"},
        {"grid", ""},
        {"target", "d_urban"},
        {"task2", "d_pop"},
        {"label", ""},
        {"scatter_model", ""},
        {"height", "96"},
        {"width", "96"},
        {"land_fraction", "0.6"},
        {"n_regions", "16"},
        {"noise_std", "0.01"},
        {"pop_noise_std", "0.03"},
        {"base_features", "8"},
        {"depth", "2"},
        {"batch_size", "64"},
        {"learning_rate", "0.001"},
        {"finetune_learning_rate", "0.0001"},
        {"optimizer", "adam"},
        {"momentum", "0.9"},
        {"max_epochs", "12"},
        {"patience", "10"},
        {"min_delta", "1e-7"},
        {"shuffle", "true"},
        {"augment", "true"},
        {"val_fraction", "0.1"},
        {"gradcheck_seeds", "10"},
        {"gradcheck_tolerance", "1e-4"},
        {"gradcheck_epsilon", "1e-5"},
    };
    return d;
}

struct Settings {
    KeyValueConfig cfg;
    std::set<std::string> explicit_keys;

    std::string str(const std::string& k) const { return cfg.get_string(k, ""); }
    std::uint64_t uint(const std::string& k) const { return cfg.get_uint(k, 0); }
    double real(const std::string& k) const { return cfg.get_double(k, 0.0); }
    bool flag(const std::string& k) const { return cfg.get_bool(k, false); }

    fs::path out_dir() const { return str("out_dir"); }
    fs::path grid_path() const { return str("grid").empty() ? out_dir() / "world.wgrd" : fs::path(str("grid")); }
    std::size_t window() const {
        const auto w = uint("window");
        if (w != 16 && w != 22 && w != 28) throw UsageError("--window must be one of 16, 22, 28");
        return w;
    }
    std::set<std::string> test_regions() const {
        const auto list = split_list(str("test_regions"));
        return {list.begin(), list.end()};
    }
    TrainConfig train_config() const {
        TrainConfig c;
        c.batch_size = uint("batch_size");
        c.learning_rate = real("learning_rate");
        const auto opt = str("optimizer");
        if (opt == "adam") {
            c.optimizer = OptimizerKind::Adam;
        } else if (opt == "sgd") {
            c.optimizer = OptimizerKind::SgdMomentum;
        } else {
            throw UsageError("optimizer must be adam or sgd");
        }
        c.momentum = real("momentum");
        c.max_epochs = uint("max_epochs");
        c.patience = uint("patience");
        c.min_delta = real("min_delta");
        c.seed = uint("seed");
        c.shuffle = flag("shuffle");
        c.augment = flag("augment");
        return c;
    }
    RunOptions run_options(std::ostream& err) const {
        RunOptions o;
        o.base_features = uint("base_features");
        o.depth = uint("depth");
        o.val_fraction = real("val_fraction");
        o.on_epoch = [&err](const EpochRecord& r, const UNetParams&) {
            err << r.phase << " epoch " << r.epoch << ": train " << r.train_loss << " val " << r.val_loss << " ("
                << r.seconds << " s)\n";
        };
        return o;
    }
    PredictOptions predict_options() const {
        PredictOptions p;
        p.threads = std::max<std::uint64_t>(1, uint("threads"));
        return p;
    }
};

// Flags collected as raw strings so they can be layered over the config file.
struct Flags {
    std::map<std::string, std::string> values;
    std::string config_file;
    bool print_config = false;
};

void add_common(CLI::App& sub, Flags& f) {
    auto bind = [&](const std::string& flag, const std::string& key, const std::string& help) {
        sub.add_option_function<std::string>(
            flag, [&f, key](const std::string& v) { f.values[key] = v; }, help);
    };
    sub.add_option("--config", f.config_file, "key=value settings file");
    sub.add_flag("--print-config", f.print_config, "print the effective settings and exit");
    bind("--seed", "seed", "seed for all randomness");
    bind("--window", "window", "tile window size (16, 22 or 28)");
    bind("--threads", "threads", "worker threads for evaluation");
    bind("--out-dir", "out_dir", "directory for generated artifacts");
    bind("--checkpoint", "checkpoint", "model checkpoint path");
    bind("--test-regions", "test_regions", "comma-separated ISO codes held out for testing");
    bind("--grid", "grid", "world grid (WGRD) path");
}

Settings resolve(const Flags& f) {
    Settings s;
    for (const auto& [k, v] : defaults()) s.cfg.set(k, v);
    std::vector<std::string> known;
    for (const auto& [k, v] : defaults()) known.push_back(k);
    if (!f.config_file.empty()) {
        const auto file = KeyValueConfig::load(f.config_file);
        const auto unknown = file.unknown_keys(known);
        if (!unknown.empty()) throw UsageError("unknown setting '" + unknown.front() + "' in " + f.config_file);
        for (const auto& [k, v] : file.values()) s.cfg.set(k, v), s.explicit_keys.insert(k);
    }
    for (const auto& [k, v] : f.values) s.cfg.set(k, v), s.explicit_keys.insert(k);
    // Each setting takes the type of its default.
    for (const auto& [k, v] : defaults()) {
        if (v == "true" || v == "false") {
            s.flag(k);
        } else if (!v.empty() && v.find_first_not_of("0123456789") == std::string::npos) {
            s.uint(k);
        } else if (std::isdigit(static_cast<unsigned char>(v.front())) &&
                   v.find_first_not_of("0123456789.e-") == std::string::npos) {
            s.real(k);
        }
    }
    return s;
}

std::string slug(const std::string& label) {
    std::string out;
    for (char c : label) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
            out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        } else if (!out.empty() && out.back() != '_') {
            out += '_';
        }
    }
    while (!out.empty() && out.back() == '_') out.pop_back();
    return out;
}

WorldData load_world(const Settings& s, const std::optional<NormStats>& stats) {
    return prepare_world(load_grid(s.grid_path()), s.test_regions(), stats);
}

fs::path stats_path_for(const fs::path& checkpoint) {
    auto p = checkpoint;
    p.replace_extension(".norm");
    return p;
}

void save_model(const fs::path& path, const ModelRun& run, const NormStats& stats) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    save_checkpoint(run.spec, run.params, path);
    save_norm_stats(stats, stats_path_for(path));
}

int cmd_synth(const Settings& s, std::ostream& out, std::ostream& err) {
    SynthConfig c;
    c.seed = s.uint("seed");
    c.height = s.uint("height");
    c.width = s.uint("width");
    c.land_fraction = s.real("land_fraction");
    c.n_regions = s.uint("n_regions");
    c.noise_std = s.real("noise_std");
    c.pop_noise_std = s.real("pop_noise_std");
    const auto grid = gen_world(c);
    const auto path = s.grid_path();
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    save_grid(grid, path);
    err << "wrote " << path.string() << " (" << grid.height << "x" << grid.width << ", " << grid.land_count()
        << " land pixels)\n";
    out << path.string() << "\n";
    return kExitOk;
}

int cmd_split(const Settings& s, std::ostream& out, std::ostream& err) {
    const auto grid = load_grid(s.grid_path());
    const auto split = assign_split(grid, s.test_regions());
    for (const auto& r : split.unknown_regions) err << "warning: test region " << r << " not in the region table\n";
    out << "train=" << split.train_count << " test=" << split.test_count << " water=" << split.water_count << "\n";
    return kExitOk;
}

fs::path default_checkpoint(const Settings& s, const std::string& stem) {
    return s.str("checkpoint").empty() ? s.out_dir() / (stem + ".unpk") : fs::path(s.str("checkpoint"));
}

int cmd_train(const Settings& s, std::ostream& out, std::ostream& err) {
    const auto window = s.window();
    const auto target = s.str("target");
    const auto data = load_world(s, std::nullopt);
    const auto run = train_single_task(data, target, window, s.train_config(), s.run_options(err));
    const std::string stem = (target == "d_urban" ? "unet" : "single_" + target) + "_sz" + std::to_string(window);
    const auto ckpt = default_checkpoint(s, stem);
    save_model(ckpt, run, data.stats);
    auto final_path = ckpt;
    final_path.replace_filename(ckpt.stem().string() + "_final.unpk");
    save_checkpoint(run.spec, run.final_params, final_path);
    write_history_csv(run.history, s.out_dir() / (stem + "_history.csv"));
    const auto& best = run.history.epochs.at(run.history.best_epoch);
    err << "best epoch " << best.epoch << " val " << best.val_loss << "\n";
    out << ckpt.string() << "\n";
    return kExitOk;
}

int cmd_multitask(const Settings& s, std::ostream& out, std::ostream& err) {
    if (s.str("checkpoint").empty()) throw UsageError("multitask needs --checkpoint with the pretrained model");
    const fs::path pre_path = s.str("checkpoint");
    const auto pre = load_checkpoint(pre_path);
    const auto data = load_world(s, load_norm_stats(stats_path_for(pre_path)));
    const auto window = pre.spec.tile_size;
    auto sched = MultiTaskSchedule::defaults(pre.spec.heads.at(0).name);
    sched.phase1 = s.train_config();
    sched.phase2 = s.train_config();
    sched.phase2.learning_rate = s.real("finetune_learning_rate");
    ModelRun pretrained{pre.spec, pre.params, pre.params, {}};
    const auto mt = train_multitask_from(data, pretrained, s.str("task2"), window, sched, s.uint("seed"),
                                         s.run_options(err));
    if (!mt.frozen_intact) throw IntegrityError("frozen parameters changed during phase 1");
    const std::string stem = "multitask_sz" + std::to_string(window);
    const auto ckpt = s.out_dir() / (stem + ".unpk");
    save_model(ckpt, mt.run, data.stats);
    write_history_csv(mt.run.history, s.out_dir() / (stem + "_history.csv"));
    out << ckpt.string() << "\n";
    return kExitOk;
}

std::string default_label(const UNetSpec& spec) {
    if (spec.heads.size() > 1) return multitask_label(spec.tile_size);
    if (spec.heads.front().name == "d_urban") return unet_label(spec.tile_size);
    return kSingleTaskLabel;
}

fs::path report_rows_path(const fs::path& dir, const std::string& target) { return dir / ("eval_" + target + ".csv"); }

int cmd_eval(const Settings& s, std::ostream& out, std::ostream& err) {
    if (s.str("checkpoint").empty()) throw UsageError("eval needs --checkpoint");
    const fs::path ckpt_path = s.str("checkpoint");
    const auto ckpt = load_checkpoint(ckpt_path);
    if (s.explicit_keys.count("window") && s.window() != ckpt.spec.tile_size) {
        throw UsageError("--window does not match the checkpoint's tile size");
    }
    const auto data = load_world(s, load_norm_stats(stats_path_for(ckpt_path)));
    const std::string label = s.str("label").empty() ? default_label(ckpt.spec) : s.str("label");
    const auto ev = evaluate_model(data, ckpt.spec, ckpt.params, label, SplitFilter::Test, s.predict_options());
    fs::create_directories(s.out_dir());
    for (const auto& [target, rows] : ev.rows) {
        const auto path = report_rows_path(s.out_dir(), target);
        EvalReport report;
        if (fs::exists(path)) {
            for (auto& r : load_report(path).rows) {
                const bool replaced = std::any_of(rows.begin(), rows.end(), [&](const MetricsRow& n) {
                    return n.model == r.model && n.window == r.window && n.scope == r.scope && n.stratum == r.stratum;
                });
                if (!replaced) report.add(r);
            }
        }
        for (const auto& r : rows) {
            report.add(r);
            err << label << " " << target << " " << r.stratum << ": n=" << r.n_cells
                << " r2=" << (r.r2 ? std::to_string(*r.r2) : std::string("-")) << "\n";
        }
        export_report(report, path);
        const auto base = s.out_dir() / ("scatter_" + target + "_" + slug(label));
        export_scatter(ev.prediction.plane(target), data.normalized.channel(target).plane, ev.strata.all_cells, target,
                       base.string() + ".csv", base.string() + ".svg");
        out << path.string() << "\n";
    }
    return kExitOk;
}

std::vector<std::pair<double, double>> read_scatter(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    std::getline(in, line);
    if (line != "observed,predicted") throw FormatError(path.string() + ": not a scatter file");
    std::vector<std::pair<double, double>> pts;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        try {
            pts.emplace_back(std::stod(line.substr(0, comma)), std::stod(line.substr(comma + 1)));
        } catch (const std::exception&) {
            throw FormatError(path.string() + ": bad row '" + line + "'");
        }
    }
    return pts;
}

int cmd_report(const Settings& s, std::ostream& out, std::ostream& err) {
    const auto dir = s.out_dir();
    int written = 0;
    for (const std::string target : {"d_urban", "d_pop"}) {
        const auto rows_path = report_rows_path(dir, target);
        if (!fs::exists(rows_path)) continue;
        const auto rows = load_report(rows_path);
        EvalReport report;
        if (target == "d_urban") report.merge(load_baseline(default_baseline_path()));
        report.merge(rows);
        const auto final_path = dir / ("report_" + target + ".csv");
        export_report(report, final_path);
        out << final_path.string() << "\n";
        const auto table_path = dir / ("report_" + target + ".txt");
        std::ofstream table(table_path, std::ios::trunc);
        if (!(table << format_report_table(report))) throw IoError("cannot write " + table_path.string());
        out << table_path.string() << "\n";

        std::string model = s.str("scatter_model");
        if (model.empty()) {
            model = rows.rows.front().model;
            for (const auto& r : rows.rows) {
                if (r.model == unet_label(28) || r.model == kSingleTaskLabel) model = r.model;
            }
        }
        const auto scatter = dir / ("scatter_" + target + "_" + slug(model) + ".csv");
        if (fs::exists(scatter)) {
            const auto pts = read_scatter(scatter);
            std::vector<double> obs, pred;
            for (const auto& [o, p] : pts) obs.push_back(o), pred.push_back(p);
            const std::vector<std::uint8_t> all(pts.size(), 1);
            export_scatter(pred, obs, all, target, dir / ("scatter_" + target + ".csv"),
                           dir / ("scatter_" + target + ".svg"));
            out << (dir / ("scatter_" + target + ".svg")).string() << "\n";
        } else {
            err << "warning: no scatter data for " << model << "\n";
        }
        ++written;
    }
    if (written == 0) throw PreconditionError("no evaluation rows found in " + dir.string() + "; run eval first");
    return kExitOk;
}

int cmd_gradcheck(const Settings& s, std::ostream& out, std::ostream&) {
    UNetSpec spec;
    spec.input_channels = 9;
    spec.base_features = 4;
    spec.depth = 1;
    spec.tile_size = 8;
    spec.heads = {{"d_urban", 1}};
    GradCheckOptions opt;
    opt.tolerance = s.real("gradcheck_tolerance");
    opt.epsilon = s.real("gradcheck_epsilon");
    const auto seeds = s.uint("gradcheck_seeds");
    const auto base = s.uint("seed");
    bool ok = true;
    for (std::uint64_t i = 0; i < seeds; ++i) {
        const auto r = grad_check(spec, base + i, opt);
        out << "seed=" << base + i << " checked=" << r.checked << " kinks=" << r.skipped_kinks
            << " max_rel_error=" << r.max_rel_error << " worst=" << r.worst_param << " "
            << (r.passed ? "PASS" : "FAIL") << "\n";
        ok = ok && r.passed;
    }
    return ok ? kExitOk : kExitNumeric;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Urban land change prediction with a masked U-Net regressor", "urbanet"};
    app.require_subcommand(1);
    struct Sub {
        const char* name;
        const char* help;
        int (*fn)(const Settings&, std::ostream&, std::ostream&);
    };
    const Sub subs[] = {
        {"synth", "generate a synthetic world grid", cmd_synth},
        {"split", "print train/test/water pixel counts", cmd_split},
        {"train", "train a single-task model", cmd_train},
        {"multitask", "multi-task schedule from a pretrained checkpoint", cmd_multitask},
        {"eval", "evaluate a checkpoint on the test regions", cmd_eval},
        {"report", "merge evaluation rows into final reports", cmd_report},
        {"gradcheck", "check analytic gradients against finite differences", cmd_gradcheck},
    };
    std::vector<Flags> flags(std::size(subs));
    std::vector<CLI::App*> apps;
    for (std::size_t i = 0; i < std::size(subs); ++i) {
        auto* sub = app.add_subcommand(subs[i].name, subs[i].help);
        add_common(*sub, flags[i]);
        auto bind = [&, i](const std::string& flag, const std::string& key, const std::string& help) {
            sub->add_option_function<std::string>(
                flag, [&flags, i, key](const std::string& v) { flags[i].values[key] = v; }, help);
        };
        if (std::string(subs[i].name) == "train") bind("--target", "target", "target channel");
        if (std::string(subs[i].name) == "eval") bind("--label", "label", "model label for report rows");
        if (std::string(subs[i].name) == "report") bind("--scatter-model", "scatter_model", "model shown in the scatter");
        if (std::string(subs[i].name) == "synth") {
            bind("--height", "height", "rows");
            bind("--width", "width", "columns");
        }
        apps.push_back(sub);
    }

    std::vector<std::string> argv_rev(args.rbegin(), args.rend());
    if (!argv_rev.empty()) argv_rev.pop_back();
    if (args.size() <= 1) {
        err << app.help();
        return kExitUsage;
    }
    try {
        app.parse(argv_rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        for (auto* sub : apps) {
            if (sub->parsed()) {
                err << sub->help();
                return kExitUsage;
            }
        }
        err << app.help();
        return kExitUsage;
    }

    for (std::size_t i = 0; i < std::size(subs); ++i) {
        if (!apps[i]->parsed()) continue;
        try {
            const auto settings = resolve(flags[i]);
            if (flags[i].print_config) {
                out << settings.cfg.to_string();
                return kExitOk;
            }
            return subs[i].fn(settings, out, err);
        } catch (const UsageError& e) {
            err << "usage error: " << e.what() << "\n";
            return kExitUsage;
        } catch (const SpecError& e) {
            err << "usage error: " << e.what() << "\n";
            return kExitUsage;
        } catch (const NumericError& e) {
            err << "numeric error: " << e.what() << "\n";
            return kExitNumeric;
        } catch (const Error& e) {
            err << "error: " << e.what() << "\n";
            return kExitData;
        } catch (const fs::filesystem_error& e) {
            err << "error: " << e.what() << "\n";
            return kExitData;
        }
    }
    return kExitUsage;
}

int run_cli(int argc, char** argv) {
    return run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}

}  // namespace urbanet
