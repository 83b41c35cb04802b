#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

#include "mfpp/io.hpp"
#include "mfpp/remote.hpp"
#include "mfpp/saliency.hpp"

using namespace mfpp;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int code = -1;
    std::string output;
};

/// Runs the CLI through the shell with optional VAR=value assignments in `env`.
RunResult run(const std::string& args, const std::string& env = "") {
    const std::string cmd = env + " " + MFPP_CLI + " " + args + " 2>&1";
    RunResult r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return r;
    char buf[4096];
    while (std::size_t n = fread(buf, 1, sizeof buf, pipe)) r.output.append(buf, n);
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string fixture(const std::string& name) { return (fs::path(MFPP_TEST_DATA) / (name + ".png")).string(); }

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path()
               / ("mfpp_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string out(const std::string& name) const { return (dir_ / name).string(); }

    fs::path dir_;
};

void write_voc_xml(const fs::path& p, const std::string& file, int w, int h, const std::string& cls, int x0, int y0,
                   int x1, int y1) {
    std::ofstream(p) << "<annotation><filename>" << file << "</filename><size><width>" << w << "</width><height>" << h
                     << "</height></size><object><name>" << cls << "</name><bndbox><xmin>" << x0 << "</xmin><ymin>"
                     << y0 << "</ymin><xmax>" << x1 << "</xmax><ymax>" << y1 << "</ymax></bndbox></object></annotation>";
}

} // namespace

TEST_F(Cli, ExplainConstantToyWritesUniformMap) {
    const auto r = run("explain --image " + fixture("coffee") + " --toy constant:1 --masks 100 --layers 4 --seed 7"
                       " --normalization empirical --out " + out("a"));
    ASSERT_EQ(r.code, 0) << r.output;
    for (const char* f : {"saliency.f32", "saliency.json", "heatmap.png", "manifest.json"})
        EXPECT_TRUE(fs::exists(dir_ / "a" / f)) << f;
    const SaliencyMap map = load_saliency(dir_ / "a" / "saliency.f32");
    EXPECT_EQ(map.size(), (Size{96, 96}));
    EXPECT_EQ(map.meta.n_masks, 100u);
    EXPECT_EQ(map.meta.seed, 7u);
    for (double v : map.values) EXPECT_EQ(v, 1.0);
    EXPECT_EQ(read_image(dir_ / "a" / "heatmap.png").size(), (Size{96, 96}));

    const auto manifest = read_json(dir_ / "a" / "manifest.json");
    EXPECT_EQ(manifest["command"], "explain");
    EXPECT_EQ(manifest["seed"], 7);
    EXPECT_EQ(manifest["options"]["config"]["pyramid"]["layer_fragment_counts"], nlohmann::json({50, 100, 200, 400}));
    EXPECT_EQ(manifest["inputs"].size(), 1u);
}

TEST_F(Cli, ExplainExpectationNormalizationIsNearlyUniform) {
    const auto r = run("explain --image " + fixture("coffee") + " --toy constant:1 --masks 400 --seed 3 --out " + out("a"));
    ASSERT_EQ(r.code, 0) << r.output;
    for (double v : load_saliency(dir_ / "a" / "saliency.f32").values) {
        EXPECT_GT(v, 0.7);
        EXPECT_LT(v, 1.3);
    }
}

TEST_F(Cli, FastMfppDefaults) {
    const auto r = run("explain --image " + fixture("rocket") + " --toy region:20,20,60,60 --masks 4000 --out " + out("a"));
    ASSERT_EQ(r.code, 0) << r.output;
    const auto cfg = read_json(dir_ / "a" / "manifest.json")["options"]["config"];
    EXPECT_EQ(cfg["pyramid"]["layer_fragment_counts"], nlohmann::json({50, 100, 200, 400, 800}));
    EXPECT_EQ(cfg["pyramid"]["n_masks_total"], 4000);
    EXPECT_EQ(cfg["pyramid"]["upscale_offset"], 2.2);
    EXPECT_EQ(cfg["pyramid"]["keep_prob"], 0.5);
    EXPECT_EQ(cfg["slic"]["sigma"], 1.0);
    EXPECT_EQ(cfg["slic"]["compactness"], 10.0);
    EXPECT_EQ(cfg["method"], "fragments");
}

TEST_F(Cli, ManifestReplayIsBitIdentical) {
    const std::string base = "explain --image " + fixture("chelsea") + " --toy region:10,10,50,40 --masks 300 --seed 11";
    ASSERT_EQ(run(base + " --out " + out("a")).code, 0);
    const auto r = run("explain --manifest " + out("a") + "/manifest.json --out " + out("b"));
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(slurp(dir_ / "a" / "saliency.f32"), slurp(dir_ / "b" / "saliency.f32"));
    EXPECT_EQ(read_json(dir_ / "a" / "saliency.json"), read_json(dir_ / "b" / "saliency.json"));

    ASSERT_EQ(run(base + " --batch 7 --in-flight 1 --out " + out("c")).code, 0);
    const auto a = load_saliency(dir_ / "a" / "saliency.f32");
    const auto c = load_saliency(dir_ / "c" / "saliency.f32");
    for (std::size_t p = 0; p < a.values.size(); ++p) EXPECT_NEAR(a.values[p], c.values[p], 1e-6);

    ASSERT_EQ(run("explain --image " + fixture("chelsea") + " --toy region:10,10,50,40 --masks 300 --seed 12 --out "
                  + out("d")).code,
              0);
    EXPECT_NE(slurp(dir_ / "a" / "saliency.f32"), slurp(dir_ / "d" / "saliency.f32"));
}

TEST_F(Cli, ReplayRejectsChangedInputs) {
    fs::copy_file(fixture("coffee"), dir_ / "img.png");
    ASSERT_EQ(run("explain --image " + out("img.png") + " --toy constant:1 --masks 10 --out " + out("a")).code, 0);
    fs::copy_file(fixture("rocket"), dir_ / "img.png", fs::copy_options::overwrite_existing);
    const auto r = run("explain --manifest " + out("a") + "/manifest.json --out " + out("b"));
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find("changed"), std::string::npos) << r.output;
}

TEST_F(Cli, DumpMasks) {
    const auto r = run("explain --image " + fixture("coffee") + " --toy constant:1 --masks 5 --layers 2 --dump-masks --out "
                       + out("a"));
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_TRUE(fs::exists(dir_ / "a" / "masks" / "mask_00004.png"));
    EXPECT_EQ(read_json(dir_ / "a" / "masks" / "manifest.json")["masks"].size(), 5u);
}

TEST_F(Cli, ExitCodes) {
    EXPECT_EQ(run("explain --image " + out("missing.png") + " --toy constant:1 --out " + out("a")).code, 1);
    EXPECT_EQ(run("explain --image " + fixture("coffee") + " --out " + out("a")).code, 1);
    EXPECT_EQ(run("explain --image " + fixture("coffee") + " --toy bogus --out " + out("a")).code, 1);
    EXPECT_EQ(run("explain --image " + fixture("coffee") + " --toy constant:1 --method rise --grid 7by7 --out " + out("a")).code, 1);
    EXPECT_EQ(run("explain --image " + fixture("coffee") + " --toy constant:1 --keep 1.5 --out " + out("a")).code, 1);
    EXPECT_EQ(run("explain --no-such-flag").code, 1);
    EXPECT_EQ(run("").code, 1);
    EXPECT_EQ(run("--help").code, 0);
    const auto unreachable = run("explain --image " + fixture("coffee") + " --model-url http://127.0.0.1:1 --masks 4 --out "
                                 + out("a"));
    EXPECT_EQ(unreachable.code, 2);
    EXPECT_NE(unreachable.output.find("127.0.0.1:1"), std::string::npos) << unreachable.output;
}

TEST_F(Cli, ExplainAgainstRemoteModel) {
    ToyPredictorSpec spec;
    spec.kind = ToyPredictorSpec::Kind::region_mean;
    spec.region = {10, 10, 50, 40};
    const auto model = make_toy(spec);
    httplib::Server server;
    mount_predictor(server, *model);
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread thread([&] { server.listen_after_bind(); });
    server.wait_until_ready();
    const std::string url = "http://127.0.0.1:" + std::to_string(port);

    const std::string common = "explain --image " + fixture("chelsea") + " --masks 200 --seed 5 --out ";
    const auto remote = run(common + out("remote") + " --model-url " + url);
    const auto env = run(common + out("env"), "MFPP_MODEL_URL=" + url);
    const auto local = run(common + out("local") + " --toy region:10,10,50,40");
    server.stop();
    thread.join();
    ASSERT_EQ(remote.code, 0) << remote.output;
    ASSERT_EQ(env.code, 0) << env.output;
    ASSERT_EQ(local.code, 0) << local.output;
    EXPECT_EQ(slurp(dir_ / "remote" / "saliency.f32"), slurp(dir_ / "local" / "saliency.f32"));
    EXPECT_EQ(slurp(dir_ / "env" / "saliency.f32"), slurp(dir_ / "local" / "saliency.f32"));
    EXPECT_EQ(read_json(dir_ / "env" / "manifest.json")["options"]["model"]["url"], url);
}

TEST_F(Cli, ServeSpeaksTheWireProtocol) {
    int fds[2];
    ASSERT_EQ(pipe(fds), 0);
    const pid_t pid = fork();
    if (pid == 0) {
        dup2(fds[1], STDOUT_FILENO);
        close(fds[0]);
        execl(MFPP_CLI, MFPP_CLI, "serve", "--toy", "constant:2.5", "--port", "0", static_cast<char*>(nullptr));
        _exit(127);
    }
    close(fds[1]);
    std::string line;
    char c;
    while (read(fds[0], &c, 1) == 1 && c != '\n') line += c;
    const auto at = line.find("http://");
    ASSERT_NE(at, std::string::npos) << line;
    RemoteOptions opts;
    opts.backoff = std::chrono::milliseconds(10);
    const RemotePredictor remote(line.substr(at), opts);
    EXPECT_EQ(remote.info().model, "toy:constant");
    const auto resp = remote.predict({2, 3, 3, std::vector<float>(54, 0.5f)});
    EXPECT_EQ(resp.scores.rows, 2);
    EXPECT_EQ(resp.scores.at(1, 0), 2.5f);
    kill(pid, SIGTERM);
    int status = 0;
    waitpid(pid, &status, 0);
    close(fds[0]);
    EXPECT_TRUE(WIFEXITED(status));
}

TEST_F(Cli, SegmentSigmaSweepAndGranularity) {
    const auto r = run("segment --image " + fixture("chelsea") + " --segments 50,800 --sigmas 1,3,7 --out " + out("s"));
    ASSERT_EQ(r.code, 0) << r.output;
    const auto runs = read_json(dir_ / "s" / "results.json")["runs"];
    ASSERT_EQ(runs.size(), 6u);
    for (const auto& run : runs) {
        EXPECT_TRUE(fs::exists(dir_ / "s" / run["file"].get<std::string>()));
        const int k = run["n_segments"], n = run["fragments"];
        EXPECT_GE(n, k / 2);
        EXPECT_LE(n, 2 * k);
    }
    for (int i = 0; i < 2; ++i)
        for (int s = 1; s < 3; ++s)
            EXPECT_LE(runs[3 * i + s]["boundary_length"].get<int>(), runs[3 * i + s - 1]["boundary_length"].get<int>());
    EXPECT_GT(runs[3]["fragments"].get<int>(), 4 * runs[0]["fragments"].get<int>());
}

TEST_F(Cli, SegmentConstantImage) {
    write_png(Image(64, 64, 0.5f), dir_ / "flat.png");
    const auto r = run("segment --image " + out("flat.png") + " --segments 4 --out " + out("s"));
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(read_json(dir_ / "s" / "results.json")["runs"][0]["fragments"], 4);
}

TEST_F(Cli, EvalSyntheticLocalization) {
    const auto r = run("eval --dataset synthetic --count 20 --seed 1 --out " + out("e"));
    ASSERT_EQ(r.code, 0) << r.output;
    const auto res = read_json(dir_ / "e" / "results.json");
    EXPECT_GE(res["overall"]["accuracy"].get<double>(), 0.95);
    EXPECT_EQ(res["n"], 20);
    EXPECT_TRUE(fs::exists(dir_ / "e" / "decisions.csv"));
    EXPECT_EQ(read_json(dir_ / "e" / "manifest.json")["command"], "eval");
}

TEST_F(Cli, EvalRiseConfiguration) {
    const auto r = run("eval --dataset synthetic --count 2 --method rise --grid 7x7 --keep 0.5 --masks 4000 --out " + out("e"));
    ASSERT_EQ(r.code, 0) << r.output;
    const auto cfg = read_json(dir_ / "e" / "results.json")["config"];
    EXPECT_EQ(cfg["method"], "rise");
    EXPECT_EQ(cfg["config"]["method"], "grid");
    EXPECT_EQ(cfg["config"]["grid"]["rows"], 7);
    EXPECT_EQ(cfg["config"]["grid"]["cols"], 7);
    EXPECT_EQ(cfg["config"]["pyramid"]["keep_prob"], 0.5);
    EXPECT_EQ(cfg["config"]["pyramid"]["n_masks_total"], 4000);
}

TEST_F(Cli, EvalVocWithClassMap) {
    fs::create_directories(dir_ / "Annotations");
    fs::create_directories(dir_ / "JPEGImages");
    Image bright_left(80, 60, 0.1f);
    for (int y = 0; y < 60; ++y)
        for (int x = 0; x < 20; ++x) bright_left.set_pixel(x, y, 0.9f, 0.9f, 0.9f);
    write_png(bright_left, dir_ / "JPEGImages" / "a.png");
    write_png(bright_left, dir_ / "JPEGImages" / "b.png");
    write_voc_xml(dir_ / "Annotations" / "a.xml", "a.png", 80, 60, "dog", 0, 0, 20, 60);
    write_voc_xml(dir_ / "Annotations" / "b.xml", "b.png", 80, 60, "cat", 0, 0, 20, 60);
    std::ofstream(dir_ / "val.txt") << "a\nb\n";
    std::ofstream(dir_ / "classes.json") << R"({"dog": 0})";
    const std::string args = "eval --dataset voc --annotations " + out("Annotations") + " --split " + out("val.txt")
                             + " --images " + out("JPEGImages") + " --class-map " + out("classes.json")
                             + " --toy region:0,0,20,60 --input-size 0 --masks 400 --out " + out("e");
    const auto r = run(args);
    ASSERT_EQ(r.code, 0) << r.output;
    const auto res = read_json(dir_ / "e" / "results.json");
    EXPECT_EQ(res["overall"]["hits"], 1);
    EXPECT_EQ(res["config_errors"], 1);
    EXPECT_NE(r.output.find("no model class for 'cat'"), std::string::npos);
}

TEST_F(Cli, EvalCoco) {
    fs::create_directories(dir_ / "images");
    write_png(Image(40, 40, 0.5f), dir_ / "images" / "x.png");
    std::ofstream(dir_ / "instances.json") << R"({"images": [{"id": 7, "file_name": "x.png", "width": 40, "height": 40}],
        "categories": [{"id": 3, "name": "car"}],
        "annotations": [{"id": 1, "image_id": 7, "category_id": 3, "bbox": [0, 0, 40, 40], "iscrowd": 0}]})";
    std::ofstream(dir_ / "classes.json") << R"({"car": 0})";
    const auto r = run("eval --dataset coco --annotations " + out("instances.json") + " --images " + out("images")
                       + " --class-map " + out("classes.json") + " --toy constant:1 --input-size 0 --masks 50 --out "
                       + out("e"));
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(read_json(dir_ / "e" / "results.json")["overall"]["hits"], 1);
}

TEST_F(Cli, EvalDatasetErrors) {
    std::ofstream(dir_ / "empty.txt") << "";
    fs::create_directories(dir_ / "ann");
    fs::create_directories(dir_ / "img");
    auto r = run("eval --dataset voc --annotations " + out("ann") + " --split " + out("empty.txt") + " --images "
                 + out("img") + " --toy constant:1 --out " + out("e"));
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find("empty"), std::string::npos) << r.output;

    r = run("eval --dataset voc --annotations " + out("nope") + " --split " + out("nope.txt") + " --images " + out("nada")
            + " --toy constant:1 --out " + out("e"));
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find("3 problem(s)"), std::string::npos) << r.output;
}

TEST_F(Cli, BenchReportsRepeatsAndPhases) {
    const auto r = run("bench --masks 100,400 --repeats 3 --samples 1 --input-size 96 --out " + out("b"));
    ASSERT_EQ(r.code, 0) << r.output;
    const auto runs = read_json(dir_ / "b" / "results.json")["runs"];
    ASSERT_EQ(runs.size(), 2u);
    for (const auto& run : runs) {
        EXPECT_EQ(run["per_repeat_s"].size(), 3u);
        EXPECT_TRUE(run.contains("stddev_s"));
        double phases = 0;
        for (const auto& [k, v] : run["phases_s"].items()) phases += v.get<double>();
        EXPECT_NEAR(phases, run["mean_s"].get<double>(), 0.1 * run["mean_s"].get<double>());
    }
    EXPECT_GT(runs[1]["mean_s"].get<double>(), runs[0]["mean_s"].get<double>());
    EXPECT_NE(r.output.find("masks 100:"), std::string::npos);
}
