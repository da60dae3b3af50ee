#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "capseg/cli.hpp"
#include "support.hpp"

using namespace capseg;
using namespace capseg::testing;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result invoke(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::vector<std::string> small_train_args(const fs::path& data, const fs::path& out) {
    return {"train", "--data", data.string(), "--out", out.string(), "--input-size", "32", "--batch", "4", "--quiet"};
}

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& more) {
    a.insert(a.end(), more.begin(), more.end());
    return a;
}

// Small shared dataset: 8 training samples and a 20-case test split at 32 px.
const fs::path& small_dataset() {
    static TempDir dir("cli_data");
    static const bool made = [] {
        const auto r = invoke({"synth", "--out", dir.path().string(), "--count", "8", "--size", "32", "--seed", "5",
                            "--test-count", "40", "--test-slices-per-case", "2"});
        return r.code == 0;
    }();
    EXPECT_TRUE(made);
    return dir.path();
}

std::map<std::string, std::string> read_config(const fs::path& p) {
    std::map<std::string, std::string> kv;
    std::istringstream in(read_file(p));
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

std::size_t count_pngs(const fs::path& dir) {
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ".png";
    return n;
}

}  // namespace

TEST(CliSynth, WritesRequestedTriplesDeterministically) {
    TempDir a("synth_a"), b("synth_b");
    const std::vector<std::string> flags{"--count", "128", "--size", "64", "--seed", "7"};
    const auto ra = invoke(with({"synth", "--out", a.path().string()}, flags));
    ASSERT_EQ(ra.code, 0) << ra.err;
    for (const char* sub : {"images", "masks_expert", "masks_nonexpert"}) EXPECT_EQ(count_pngs(a / "train" / sub), 128u);
    EXPECT_NE(ra.out.find("disagreement"), std::string::npos);
    const auto rb = invoke(with({"synth", "--out", b.path().string()}, flags));
    ASSERT_EQ(rb.code, 0);
    EXPECT_EQ(content_hash(a.path()), content_hash(b.path()));
    EXPECT_NE(ra.out.find(hex64(content_hash(a.path()))), std::string::npos);
}

TEST(CliSynth, ZeroPerturbationCopiesExpertMasks) {
    TempDir d("synth_p0");
    ASSERT_EQ(invoke({"synth", "--out", d.path().string(), "--count", "6", "--size", "32", "--perturb", "0"}).code, 0);
    const auto loaded = load_dataset(d.path(), Split::train);
    ASSERT_EQ(loaded.samples.size(), 6u);
    for (const auto& s : loaded.samples) EXPECT_EQ(s.expert_mask, s.nonexpert_mask);
}

TEST(CliExitCodes, UsageAndRuntimeErrors) {
    const auto& data = small_dataset();
    TempDir out("cli_codes");
    const auto unknown = invoke(with(small_train_args(data, out / "r"), {"--loss", "dice"}));
    EXPECT_EQ(unknown.code, 2);
    for (const char* name : {"adaptive_focal", "focal", "ag_bce"}) EXPECT_NE(unknown.err.find(name), std::string::npos);

    EXPECT_EQ(invoke({"train", "--data", data.string()}).code, 2);
    EXPECT_EQ(invoke({"frobnicate"}).code, 2);
    EXPECT_EQ(invoke({}).code, 2);
    EXPECT_EQ(invoke({"--help"}).code, 0);
    EXPECT_EQ(invoke({"synth", "--out", "/proc/capseg_cannot_write_here"}).code, 2);
    EXPECT_EQ(invoke({"eval", "--checkpoint", (out / "missing.json").string(), "--data", data.string(), "--out",
                   (out / "e").string()})
                  .code,
              2);
    EXPECT_EQ(invoke(with(small_train_args(out / "no_such_data", out / "r2"), {})).code, 2);
    EXPECT_EQ(invoke(with(small_train_args(data, out / "r3"), {"--epochs", "0"})).code, 2);
    EXPECT_EQ(invoke(with(small_train_args(data, out / "r4"), {"--momentum", "1.5"})).code, 2);
}

TEST(CliTrain, DefaultsMirrorTrainingSetup) {
    const auto help = invoke({"train", "--help"});
    EXPECT_EQ(help.code, 0);
    const auto& data = small_dataset();
    TempDir out("cli_defaults");
    // Only the input size is overridden; epochs are capped to keep the test short.
    const auto r = invoke({"train", "--data", data.string(), "--out", (out / "run").string(), "--input-size", "32",
                        "--epochs", "1", "--quiet"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto kv = read_config(out / "run/config.txt");
    EXPECT_EQ(kv.at("train.learning_rate"), "0.01");
    EXPECT_EQ(kv.at("train.momentum"), "0.9");
    EXPECT_EQ(kv.at("train.weight_decay"), "0.0001");
    EXPECT_EQ(kv.at("train.batch_size"), "8");
    EXPECT_EQ(kv.at("train.optimizer"), "sgd_momentum");
    EXPECT_EQ(kv.at("train.loss"), "adaptive_focal");
    EXPECT_EQ(TrainConfig{}.epochs, 10);
    cli::TrainFlags f;
    EXPECT_EQ(f.epochs, 10);
    EXPECT_EQ(f.batch, 8);
    EXPECT_EQ(f.lr, 0.01);
}

TEST(CliTrain, WritesOneLogRowPerEpochAndManifest) {
    const auto& data = small_dataset();
    TempDir out("cli_rows");
    const auto r = invoke(with(small_train_args(data, out / "run"), {"--epochs", "3"}));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto rows = read_csv(out / "run/loss_log.csv");
    ASSERT_EQ(rows.size(), 4u);
    EXPECT_EQ(rows[0], (std::vector<std::string>{"epoch", "mean_loss", "wall_seconds"}));
    for (int e = 1; e <= 3; ++e) EXPECT_EQ(rows[e][0], std::to_string(e));
    EXPECT_TRUE(fs::exists(out / "run/checkpoint_last.json"));
    EXPECT_EQ(read_csv(out / "run/batches.csv").size(), 1u + 3 * 2);

    const auto manifest = nlohmann::json::parse(read_file(out / "run/manifest.json"));
    for (const char* key : {"command", "resolved_config", "dataset_fingerprint", "code_version", "timestamps"})
        EXPECT_TRUE(manifest.contains(key)) << key;
    EXPECT_TRUE(manifest["timestamps"].contains("started"));
    EXPECT_TRUE(manifest["timestamps"].contains("finished"));
    EXPECT_EQ(manifest["dataset_fingerprint"], hex64(content_hash(data / "train")));
    EXPECT_EQ(manifest["resolved_config"]["train.epochs"], "3");
    EXPECT_EQ(manifest["resolved_config"]["model.input_size"], "32");
}

TEST(CliTrain, SameSeedRerunsAreIdentical) {
    const auto& data = small_dataset();
    TempDir out("cli_rerun");
    ASSERT_EQ(invoke(with(small_train_args(data, out / "a"), {"--epochs", "2"})).code, 0);
    ASSERT_EQ(invoke(with(small_train_args(data, out / "b"), {"--epochs", "2"})).code, 0);
    auto a = read_csv(out / "a/loss_log.csv"), b = read_csv(out / "b/loss_log.csv");
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i][1], b[i][1]);
    EXPECT_EQ(read_file(out / "a/batches.csv"), read_file(out / "b/batches.csv"));
}

TEST(CliTrain, ResumeContinuesToTheSameResult) {
    const auto& data = small_dataset();
    TempDir out("cli_resume");
    ASSERT_EQ(invoke(with(small_train_args(data, out / "straight"), {"--epochs", "3"})).code, 0);
    ASSERT_EQ(invoke(with(small_train_args(data, out / "part"), {"--epochs", "1"})).code, 0);
    const auto r = invoke({"train", "--resume", (out / "part/checkpoint_last.json").string(), "--data", data.string(),
                        "--out", (out / "part").string(), "--epochs", "3", "--quiet"});
    ASSERT_EQ(r.code, 0) << r.err;
    auto a = read_csv(out / "straight/loss_log.csv"), b = read_csv(out / "part/loss_log.csv");
    ASSERT_EQ(a.size(), 4u);
    ASSERT_EQ(b.size(), 4u);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i][1], b[i][1]);
    const auto ca = load_checkpoint(out / "straight/checkpoint_last.json");
    const auto cb = load_checkpoint(out / "part/checkpoint_last.json");
    ASSERT_EQ(ca.params.size(), cb.params.size());
    for (std::size_t i = 0; i < ca.params.size(); ++i) EXPECT_EQ(ca.params[i].second.data, cb.params[i].second.data);
}

TEST(CliTrain, FocalWithoutFocusingIsBce) {
    const auto& data = small_dataset();
    TempDir out("cli_bce");
    ASSERT_EQ(invoke(with(small_train_args(data, out / "focal"), {"--epochs", "2", "--loss", "focal", "--gamma-f", "0",
                                                                "--beta", "1"}))
                  .code,
              0);
    ASSERT_EQ(invoke(with(small_train_args(data, out / "bce"), {"--epochs", "2", "--loss", "ag_bce", "--hard-weight", "1",
                                                              "--easy-weight", "1"}))
                  .code,
              0);
    auto a = read_csv(out / "focal/loss_log.csv"), b = read_csv(out / "bce/loss_log.csv");
    ASSERT_EQ(a.size(), 3u);
    for (std::size_t i = 1; i < a.size(); ++i) EXPECT_NEAR(std::stod(a[i][1]), std::stod(b[i][1]), 1e-9) << i;
}

TEST(CliEval, PerfectFixtureScoresOne) {
    TempDir dir("cli_perfect");
    ModelConfig mc;
    mc.input_size = 32;
    SegmentationModel m(mc);
    for (auto& [name, v] : m.parameters()) {
        if (name == "head1.weight") v->value.fill(0.0);
        if (name == "head1.bias") v->value.data[0] = 10.0;
    }
    Trainer t(m, TrainConfig{}, LossConfig{});
    save_checkpoint(dir / "ck.json", snapshot(t, m));
    std::vector<SegSample> test;
    for (int i = 0; i < 3; ++i) {
        SegSample s;
        s.case_id = "case00" + std::to_string(i);
        s.image = RealGrid(32, 32, 0.5);
        s.expert_mask = Mask(32, 32, 1);
        s.nonexpert_mask = s.expert_mask;
        test.push_back(s);
    }
    write_dataset(dir.path() / "data", Split::test, test);
    const auto r = invoke({"eval", "--checkpoint", (dir / "ck.json").string(), "--data", (dir / "data").string(), "--out",
                        (dir / "eval").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto rows = read_csv(dir / "eval/metrics.csv");
    ASSERT_EQ(rows.size(), 5u);
    EXPECT_EQ(rows.back()[0], "Mean");
    EXPECT_EQ(std::stod(rows.back()[1]), 1.0);
    EXPECT_EQ(std::stod(rows.back()[2]), 0.0);
    EXPECT_EQ(count_pngs(dir / "eval/overlays"), 3u);
}

TEST(CliEval, TwentyCasesPlusRecomputableMean) {
    const auto& data = small_dataset();
    TempDir out("cli_eval");
    ASSERT_EQ(invoke(with(small_train_args(data, out / "run"), {"--epochs", "1"})).code, 0);
    const auto r = invoke({"eval", "--checkpoint", (out / "run/checkpoint_last.json").string(), "--data", data.string(),
                        "--out", (out / "eval").string(), "--spacing", "0.5"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto rows = read_csv(out / "eval/metrics.csv");
    ASSERT_EQ(rows.size(), 22u);
    EXPECT_EQ(rows[0], (std::vector<std::string>{"case_id", "mean_dice", "mean_hd95", "slice_count"}));
    double dsum = 0, hsum = 0;
    int hn = 0, slices = 0;
    for (std::size_t i = 1; i <= 20; ++i) {
        dsum += std::stod(rows[i][1]);
        if (rows[i][2] != "nan") {
            hsum += std::stod(rows[i][2]);
            ++hn;
        }
        slices += std::stoi(rows[i][3]);
    }
    EXPECT_EQ(rows[21][0], "Mean");
    EXPECT_NEAR(std::stod(rows[21][1]), dsum / 20, 1e-12);
    ASSERT_GT(hn, 0);
    EXPECT_NEAR(std::stod(rows[21][2]), hsum / hn, 1e-12);
    EXPECT_EQ(std::stoi(rows[21][3]), slices);
    EXPECT_EQ(slices, 40);
    EXPECT_EQ(count_pngs(out / "eval/overlays"), 40u);
}

TEST(CliCompare, TableShapeAndIsolation) {
    const auto& data = small_dataset();
    TempDir out("cli_compare");
    const auto r = invoke({"compare", "--data", data.string(), "--out", (out / "cmp").string(), "--input-size", "32",
                        "--batch", "4", "--epochs", "2", "--quiet"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto table = read_csv(out / "cmp/loss_table.csv");
    ASSERT_EQ(table.size(), 3u);
    EXPECT_EQ(table[0], (std::vector<std::string>{"epoch", "adaptive_focal", "focal", "ag_bce"}));
    const auto metrics = read_csv(out / "cmp/metrics_table.csv");
    EXPECT_EQ(metrics.size(), 22u);
    EXPECT_EQ(metrics[0].size(), 7u);
    EXPECT_TRUE(fs::exists(out / "cmp/loss_curves.png"));
    EXPECT_TRUE(fs::exists(out / "cmp/manifest.json"));

    const std::vector<std::pair<std::string, std::string>> losses{
        {"adaptive_focal", "adaptive_focal"}, {"focal", "focal"}, {"ag_bce", "ag_bce"}};
    std::string first_batches;
    for (std::size_t k = 0; k < losses.size(); ++k) {
        const auto& [flag, column] = losses[k];
        ASSERT_EQ(invoke(with(small_train_args(data, out / flag), {"--epochs", "2", "--loss", flag})).code, 0);
        const auto single = read_csv(out / flag / "loss_log.csv");
        for (std::size_t e = 1; e <= 2; ++e) EXPECT_EQ(table[e][k + 1], single[e][1]) << column << " epoch " << e;
        // Same batch order for every loss: the hash column matches across runs.
        std::string hashes;
        for (const auto& row : read_csv(out / flag / "batches.csv")) hashes += row[2] + ";";
        if (k == 0) first_batches = hashes;
        EXPECT_EQ(hashes, first_batches);
    }
}
