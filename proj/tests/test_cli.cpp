#include <fstream>
#include <sstream>

#include "doctest.h"
#include "support.hpp"
#include "urbanet/cli.hpp"
#include "urbanet/config.hpp"
#include "urbanet/error.hpp"

using namespace urbanet;

namespace {

struct Run {
    int code;
    std::string out, err;
};

Run cli(std::vector<std::string> args) {
    args.insert(args.begin(), "urbanet");
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), {}};
}

void write(const std::filesystem::path& p, const std::string& text) { std::ofstream(p) << text; }

}  // namespace

TEST_CASE("key=value config parsing") {
    const auto cfg = KeyValueConfig::parse("# comment\n a = 1 \n\nb=two # trailing\nflag=yes\nx=0.25\n");
    CHECK(cfg.get_int("a", 0) == 1);
    CHECK(cfg.get_string("b", "") == "two");
    CHECK(cfg.get_bool("flag", false));
    CHECK(cfg.get_double("x", 0.0) == 0.25);
    CHECK(cfg.get_int("missing", 42) == 42);
    CHECK_THROWS_AS(cfg.get_int("b", 0), UsageError);
    CHECK_THROWS_AS(cfg.get_bool("x", false), UsageError);
    CHECK_THROWS_AS(KeyValueConfig::parse("novalue\n"), FormatError);
    CHECK(cfg.unknown_keys({"a", "b", "x"}) == std::vector<std::string>{"flag"});
    CHECK(split_list(" USA, CHN ,,GBR ") == std::vector<std::string>{"USA", "CHN", "GBR"});
}

TEST_CASE("usage errors exit with 1") {
    testing::TempDir dir("cli");
    auto r = cli({});
    CHECK(r.code == kExitUsage);
    CHECK(r.err.find("Usage") != std::string::npos);
    CHECK(cli({"frobnicate"}).code == kExitUsage);
    r = cli({"train", "--bogus"});
    CHECK(r.code == kExitUsage);
    CHECK(r.err.find("--bogus") != std::string::npos);
    CHECK(cli({"train", "--window", "20", "--out-dir", dir.path().string()}).code == kExitUsage);
    write(dir / "bad.cfg", "no_such_key=1\n");
    CHECK(cli({"split", "--config", (dir / "bad.cfg").string()}).code == kExitUsage);
    write(dir / "typed.cfg", "max_epochs=many\n");
    CHECK(cli({"train", "--config", (dir / "typed.cfg").string(), "--out-dir", dir.path().string()}).code == kExitUsage);
    CHECK(cli({"eval", "--out-dir", dir.path().string()}).code == kExitUsage);
}

TEST_CASE("--print-config layers defaults, file and flags") {
    testing::TempDir dir("cli");
    auto r = cli({"train", "--print-config"});
    CHECK(r.code == kExitOk);
    CHECK(r.out.find("learning_rate=0.001\n") != std::string::npos);
    CHECK(r.out.find("test_regions=USA,CHN,GBR,MWI\n") != std::string::npos);
    CHECK(r.out.find("window=28\n") != std::string::npos);
    write(dir / "c.cfg", "window=22\nseed=5\n");
    r = cli({"train", "--config", (dir / "c.cfg").string(), "--seed", "9", "--print-config"});
    CHECK(r.out.find("window=22\n") != std::string::npos);
    CHECK(r.out.find("seed=9\n") != std::string::npos);
}

TEST_CASE("data errors exit with 2") {
    testing::TempDir dir("cli");
    CHECK(cli({"split", "--grid", (dir / "missing.wgrd").string()}).code == kExitData);
    write(dir / "junk.wgrd", "not a grid");
    const auto r = cli({"split", "--grid", (dir / "junk.wgrd").string()});
    CHECK(r.code == kExitData);
    CHECK(r.err.find("magic") != std::string::npos);
    CHECK(cli({"report", "--out-dir", dir.path().string()}).code == kExitData);
}

TEST_CASE("gradcheck subcommand") {
    auto r = cli({"gradcheck"});
    CHECK(r.code == kExitOk);
    CHECK(std::count(r.out.begin(), r.out.end(), '\n') == 10);
    CHECK(r.out.find("FAIL") == std::string::npos);
    testing::TempDir dir("cli");
    write(dir / "g.cfg", "gradcheck_tolerance=0\ngradcheck_seeds=1\n");
    r = cli({"gradcheck", "--config", (dir / "g.cfg").string()});
    CHECK(r.code == kExitNumeric);
}

TEST_CASE("divergent training exits with 3") {
    testing::TempDir dir("cli");
    const auto d = dir.path().string();
    REQUIRE(cli({"synth", "--out-dir", d, "--height", "24", "--width", "24"}).code == kExitOk);
    write(dir / "c.cfg", "optimizer=sgd\nlearning_rate=1e30\nmax_epochs=2\nwindow=16\nn_regions=16\n");
    const auto r = cli({"train", "--config", (dir / "c.cfg").string(), "--out-dir", d, "--test-regions", "USA"});
    CHECK(r.code == kExitNumeric);
}

TEST_CASE("synth, split, train, multitask, eval, report") {
    testing::TempDir dir("cli");
    const auto d = dir.path().string();
    write(dir / "run.cfg", "height=32\nwidth=32\nmax_epochs=1\ntest_regions=USA,GBR\n");
    const auto cfg = (dir / "run.cfg").string();

    auto r = cli({"synth", "--config", cfg, "--out-dir", d});
    REQUIRE(r.code == kExitOk);
    const auto grid_bytes = slurp(dir / "world.wgrd");

    r = cli({"split", "--config", cfg, "--out-dir", d});
    REQUIRE(r.code == kExitOk);
    CHECK(r.out.rfind("train=", 0) == 0);
    CHECK(r.out.find(" test=") != std::string::npos);

    r = cli({"train", "--config", cfg, "--out-dir", d, "--window", "28"});
    REQUIRE_MESSAGE(r.code == kExitOk, r.err);
    for (const char* f : {"unet_sz28.unpk", "unet_sz28_final.unpk", "unet_sz28.norm", "unet_sz28_history.csv"}) {
        CHECK(std::filesystem::exists(dir / f));
    }

    r = cli({"eval", "--config", cfg, "--out-dir", d, "--window", "28", "--checkpoint", (dir / "unet_sz28.unpk").string()});
    REQUIRE_MESSAGE(r.code == kExitOk, r.err);
    const auto rows = slurp(dir / "eval_d_urban.csv");
    CHECK(rows.find("\nU-Net (sz28),28,global,all_cells,") != std::string::npos);
    CHECK(rows.find("\nU-Net (sz28),28,global,builtup_positive,") != std::string::npos);
    CHECK(cli({"eval", "--config", cfg, "--out-dir", d, "--window", "16", "--checkpoint",
               (dir / "unet_sz28.unpk").string()})
              .code == kExitUsage);

    r = cli({"multitask", "--config", cfg, "--out-dir", d, "--checkpoint", (dir / "unet_sz28.unpk").string()});
    REQUIRE_MESSAGE(r.code == kExitOk, r.err);
    CHECK(std::filesystem::exists(dir / "multitask_sz28.unpk"));
    r = cli({"eval", "--config", cfg, "--out-dir", d, "--checkpoint", (dir / "multitask_sz28.unpk").string()});
    REQUIRE_MESSAGE(r.code == kExitOk, r.err);
    CHECK(std::filesystem::exists(dir / "eval_d_pop.csv"));

    // Re-running eval replaces rows rather than duplicating them.
    r = cli({"eval", "--config", cfg, "--out-dir", d, "--checkpoint", (dir / "unet_sz28.unpk").string()});
    REQUIRE(r.code == kExitOk);

    r = cli({"report", "--config", cfg, "--out-dir", d});
    REQUIRE_MESSAGE(r.code == kExitOk, r.err);
    const auto report = slurp(dir / "report_d_urban.csv");
    CHECK(report.rfind("model,window,scope,stratum,n_cells,mean_abs,max_abs,std,r2\n", 0) == 0);
    CHECK(report.find("SELECT (baseline),,global,all_cells,,0.000367,0.435294,0.002041,>50%") != std::string::npos);
    CHECK(report.find("\nMulti-task (sz28),28,global,builtup_positive,") != std::string::npos);
    CHECK(std::count(report.begin(), report.end(), '\n') == 7);
    CHECK(std::filesystem::exists(dir / "scatter_d_urban.svg"));
    CHECK(std::filesystem::exists(dir / "report_d_pop.csv"));
    CHECK(slurp(dir / "report_d_urban.txt").find("All grid cells") != std::string::npos);

    CHECK(slurp(dir / "world.wgrd") == grid_bytes);
}

TEST_CASE("identical training invocations give identical checkpoints") {
    testing::TempDir a("cli"), b("cli");
    for (const auto* dir : {&a, &b}) {
        const auto d = dir->path().string();
        REQUIRE(cli({"synth", "--out-dir", d, "--height", "24", "--width", "24", "--seed", "3"}).code == kExitOk);
        write(*dir / "c.cfg", "max_epochs=1\nwindow=16\n");
        REQUIRE(cli({"train", "--config", (*dir / "c.cfg").string(), "--out-dir", d, "--seed", "3", "--test-regions",
                     "USA"})
                    .code == kExitOk);
    }
    CHECK(slurp(a / "unet_sz16.unpk") == slurp(b / "unet_sz16.unpk"));
    CHECK(slurp(a / "unet_sz16.norm") == slurp(b / "unet_sz16.norm"));
}
