// mfpp: explain images with fragment-pyramid saliency, inspect segmentations,
// run pointing-game evaluations and timing benchmarks.

#include <chrono>
#include <csignal>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "mfpp/io.hpp"
#include "mfpp/mfpp.hpp"
#include "mfpp/parallel.hpp"
#include "mfpp/remote.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mfpp;

namespace {

constexpr int kExitUser = 1;
constexpr int kExitRuntime = 2;

/// Bad arguments or inputs; maps to exit code 1.
class UsageError : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Shared option groups

struct ModelSource {
    std::string toy;
    std::string url;

    bool empty() const { return toy.empty() && url.empty(); }
};

void to_json(json& j, const ModelSource& m) {
    j = json::object();
    if (!m.toy.empty()) j["toy"] = m.toy;
    if (!m.url.empty()) j["url"] = m.url;
}

void from_json(const json& j, ModelSource& m) {
    m.toy = j.value("toy", std::string{});
    m.url = j.value("url", std::string{});
}

void add_model_flags(CLI::App* cmd, ModelSource& m) {
    cmd->add_option("--toy", m.toy, "built-in predictor: constant:<c> or region:<x0>,<y0>,<x1>,<y1>");
    cmd->add_option("--model-url", m.url, std::string("model server base URL (default $") + kModelUrlEnv + ")");
}

void resolve_model_url(ModelSource& m) {
    if (m.toy.empty() && m.url.empty())
        if (auto env = RemotePredictor::env_url()) m.url = *env;
}

std::unique_ptr<Predictor> open_model(const ModelSource& m) {
    if (!m.toy.empty()) return make_toy(parse_toy_spec(m.toy));
    if (!m.url.empty()) return std::make_unique<RemotePredictor>(m.url);
    throw UsageError(std::string("no model: pass --toy or --model-url, or set ") + kModelUrlEnv);
}

/// Mask-generation flags named after the method's parameters. Unset values
/// keep the method defaults.
struct MaskFlags {
    std::string method = "fast-mfpp";
    std::optional<int> masks;
    std::optional<int> layers;
    std::vector<int> fragments;
    std::optional<double> sigma;
    std::optional<double> compactness;
    std::optional<double> upscale;
    std::optional<double> keep;
    std::string grid = "7x7";
    std::uint64_t seed = 0;
    int batch = 64;
    std::string normalization = "expectation";
    unsigned in_flight = 4;
};

void add_mask_flags(CLI::App* cmd, MaskFlags& f, bool mask_count = true) {
    cmd->add_option("--method", f.method, "mfpp (20000 masks), fast-mfpp (4000 masks) or rise (grid masks)")
        ->check(CLI::IsMember({"mfpp", "fast-mfpp", "rise"}))
        ->capture_default_str();
    if (mask_count) cmd->add_option("--masks", f.masks, "total number of masks");
    cmd->add_option("--layers", f.layers, "pyramid layers; layer l has 50*2^l fragments")->check(CLI::Range(1, 12));
    cmd->add_option("--fragments", f.fragments, "explicit fragment count per layer, e.g. 50,100,200")->delimiter(',');
    cmd->add_option("--sigma", f.sigma, "SLIC pre-smoothing sigma");
    cmd->add_option("--compactness", f.compactness, "SLIC compactness");
    cmd->add_option("--upscale", f.upscale, "canvas scale factor before cropping");
    cmd->add_option("--keep-prob,--keep", f.keep, "probability of keeping a fragment or grid cell");
    cmd->add_option("--grid", f.grid, "grid cells for rise, ROWSxCOLS")->capture_default_str();
    cmd->add_option("--seed", f.seed, "random seed")->capture_default_str();
    cmd->add_option("--batch", f.batch, "masks per predictor call")->capture_default_str();
    cmd->add_option("--normalization", f.normalization, "expectation or empirical")
        ->check(CLI::IsMember({"expectation", "empirical"}))
        ->capture_default_str();
    cmd->add_option("--in-flight", f.in_flight, "predictor batches in flight at once")->capture_default_str();
}

GridConfig parse_grid(const std::string& s) {
    GridConfig g;
    char x = 0;
    std::istringstream in(s);
    if (!(in >> g.rows >> x >> g.cols) || (x != 'x' && x != 'X') || !in.eof() || g.rows < 1 || g.cols < 1)
        throw UsageError("grid must look like 7x7, got '" + s + "'");
    return g;
}

ExplainConfig resolve_config(const MaskFlags& f) {
    ExplainConfig cfg;
    if (f.method == "rise") {
        cfg.method = MaskMethod::grid;
        cfg.grid = parse_grid(f.grid);
    }
    cfg.pyramid.n_masks_total = f.masks.value_or(f.method == "mfpp" ? 20000 : 4000);
    if (!f.fragments.empty()) {
        cfg.pyramid.layer_fragment_counts = f.fragments;
    } else if (f.layers) {
        cfg.pyramid.layer_fragment_counts.clear();
        for (int l = 0; l < *f.layers; ++l) cfg.pyramid.layer_fragment_counts.push_back(50 << l);
    }
    if (f.upscale) cfg.pyramid.upscale_offset = *f.upscale;
    if (f.keep) cfg.pyramid.keep_prob = *f.keep;
    if (f.sigma) cfg.slic.sigma = *f.sigma;
    if (f.compactness) cfg.slic.compactness = *f.compactness;
    cfg.pyramid.seed = f.seed;
    cfg.batch_size = f.batch;
    cfg.normalization = parse_normalization(f.normalization);
    cfg.in_flight = std::max(1u, f.in_flight);
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Files and manifests

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw UsageError("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string absolute_path(const std::string& p) { return p.empty() ? p : fs::absolute(p).lexically_normal().string(); }

std::string file_hash(const fs::path& p) { return "fnv1a64:" + fnv1a_hex(read_file(p)); }

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream ss;
    ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return ss.str();
}

void write_json(const fs::path& p, const json& j) {
    std::ofstream out(p);
    if (!out) throw Error("cannot write " + p.string());
    out << j.dump(2) << '\n';
}

json read_json(const fs::path& p) {
    auto j = json::parse(read_file(p), nullptr, false);
    if (j.is_discarded()) throw UsageError(p.string() + " is not valid JSON");
    return j;
}

/// Everything needed to replay a run: the resolved options of the command and
/// hashes of every input file.
struct RunManifest {
    std::string command;
    json options;
    std::uint64_t seed = 0;
    std::map<std::string, std::string> inputs;
    std::string started_at;
    std::string finished_at;

    json to_json() const {
        return {{"tool", "mfpp"},  {"version", kVersion},  {"command", command},         {"seed", seed},
                {"options", options}, {"inputs", inputs}, {"started_at", started_at}, {"finished_at", finished_at}};
    }

    static RunManifest load(const fs::path& p, const std::string& expected_command) {
        const json j = read_json(p);
        RunManifest m;
        m.command = j.value("command", std::string{});
        if (m.command != expected_command)
            throw UsageError(p.string() + " is a '" + m.command + "' manifest, not '" + expected_command + "'");
        if (!j.contains("options")) throw UsageError(p.string() + " has no options");
        m.options = j["options"];
        m.seed = j.value("seed", std::uint64_t{0});
        m.inputs = j.value("inputs", std::map<std::string, std::string>{});
        return m;
    }

    void add_input(const fs::path& p) { inputs[p.string()] = file_hash(p); }

    /// Replays must see the same input bytes.
    void verify_inputs() const {
        for (const auto& [path, hash] : inputs)
            if (file_hash(path) != hash) throw UsageError("input " + path + " changed since the manifest was written");
    }
};

Image load_image(const fs::path& p) {
    try {
        return read_image(p);
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
}

Image fit_input(const Image& img, int input_size) {
    if (input_size <= 0 || (img.width == input_size && img.height == input_size)) return img;
    return resize_bilinear(img, input_size, input_size);
}

void print_warnings(const SaliencyMap& map) {
    for (const auto& w : map.meta.warnings) std::cerr << "warning: " << w << '\n';
}

std::string format_phases(const PhaseTimes& t) {
    std::ostringstream ss;
    ss << std::fixed << std::setprecision(3) << "segmentation " << t.segmentation << " s, masking " << t.masking
       << " s, inference " << t.inference << " s, aggregation " << t.aggregation << " s";
    return ss.str();
}

// ---------------------------------------------------------------------------
// explain

struct ExplainOptions {
    std::string image;
    ModelSource model;
    ExplainConfig config;
    int input_size = 0;
    bool dump_masks = false;
};

json to_json(const ExplainOptions& o) {
    return {{"image", o.image}, {"model", o.model}, {"config", o.config}, {"input_size", o.input_size},
            {"dump_masks", o.dump_masks}};
}

ExplainOptions explain_options_from(const json& j) {
    ExplainOptions o;
    o.image = j.at("image").get<std::string>();
    o.model = j.value("model", ModelSource{});
    o.config = j.at("config").get<ExplainConfig>();
    o.input_size = j.value("input_size", 0);
    o.dump_masks = j.value("dump_masks", false);
    return o;
}

int run_explain(const ExplainOptions& o, RunManifest manifest, const fs::path& out, unsigned jobs) {
    const auto model = open_model(o.model);
    const Image img = fit_input(load_image(o.image), o.input_size);
    manifest.add_input(o.image);
    ExplainConfig cfg = o.config;
    cfg.in_flight = std::min(cfg.in_flight, jobs);
    cfg.validate();

    PhaseTimes times;
    const auto t0 = std::chrono::steady_clock::now();
    SaliencyMap map;
    std::optional<MaskBatch> dumped;
    if (cfg.method == MaskMethod::grid) {
        map = saliency(img, *model, cfg, &times);
        if (o.dump_masks)
            dumped = gen_grid_masks(static_cast<std::size_t>(cfg.pyramid.n_masks_total), cfg.grid,
                                    cfg.pyramid.keep_prob, img.size(), cfg.pyramid.seed, jobs);
    } else {
        const int target = resolve_target(img, *model, cfg, &times);
        const auto ts = std::chrono::steady_clock::now();
        const FragmentPyramid pyr = build_pyramid(img, cfg.pyramid, cfg.slic);
        times.segmentation += std::chrono::duration<double>(std::chrono::steady_clock::now() - ts).count();
        ExplainConfig resolved = cfg;
        resolved.target_class = target;
        map = explain_with_pyramid(img, *model, pyr, resolved, &times);
        map.meta.config_hash = config_hash(cfg);
        if (o.dump_masks) dumped = gen_fragment_masks(pyr, cfg.pyramid, img.size(), jobs);
    }
    const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    print_warnings(map);

    fs::create_directories(out);
    save_saliency(map, out / "saliency.f32");
    write_png(heatmap_overlay(img, map, 0.5f), out / "heatmap.png");
    if (dumped) dump_masks(*dumped, out / "masks");
    manifest.finished_at = utc_now();
    write_json(out / "manifest.json", manifest.to_json());

    std::cout << "target class " << map.target_class << ", " << map.meta.n_masks << " masks, " << std::fixed
              << std::setprecision(3) << total << " s (" << format_phases(times) << ")\n"
              << "wrote " << (out / "saliency.f32").string() << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// segment

struct SegmentOptions {
    std::string image;
    std::vector<int> segments{50, 100, 200, 400, 800};
    std::vector<double> sigmas{1.0};
    double compactness = 10.0;
    int input_size = 0;
    std::uint64_t seed = 0;
};

json to_json(const SegmentOptions& o) {
    return {{"image", o.image},           {"segments", o.segments},     {"sigmas", o.sigmas},
            {"compactness", o.compactness}, {"input_size", o.input_size}, {"seed", o.seed}};
}

SegmentOptions segment_options_from(const json& j) {
    SegmentOptions o;
    o.image = j.at("image").get<std::string>();
    o.segments = j.value("segments", o.segments);
    o.sigmas = j.value("sigmas", o.sigmas);
    o.compactness = j.value("compactness", o.compactness);
    o.input_size = j.value("input_size", o.input_size);
    o.seed = j.value("seed", o.seed);
    return o;
}

std::string number_tag(double v) {
    std::ostringstream ss;
    ss << v;
    return ss.str();
}

int run_segment(const SegmentOptions& o, RunManifest manifest, const fs::path& out) {
    const Image img = fit_input(load_image(o.image), o.input_size);
    manifest.add_input(o.image);
    fs::create_directories(out);
    json results = json::array();
    for (int k : o.segments)
        for (double sigma : o.sigmas) {
            SlicParams p;
            p.n_segments = k;
            p.sigma = sigma;
            p.compactness = o.compactness;
            const LabelMap lm = slic_segment(img, p);
            const std::string name = "segments_k" + std::to_string(k) + "_sigma" + number_tag(sigma) + ".png";
            write_png(colorize_labels(lm, o.seed), out / name);
            const std::size_t boundary = boundary_length(lm);
            results.push_back(
                {{"n_segments", k}, {"sigma", sigma}, {"fragments", lm.n_fragments}, {"boundary_length", boundary}, {"file", name}});
            std::cout << "k " << k << " sigma " << sigma << ": " << lm.n_fragments << " fragments, boundary length "
                      << boundary << '\n';
        }
    write_json(out / "results.json", {{"image", o.image}, {"width", img.width}, {"height", img.height}, {"runs", results}});
    manifest.finished_at = utc_now();
    write_json(out / "manifest.json", manifest.to_json());
    return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
    std::string dataset = "synthetic";
    std::string annotations;
    std::string split;
    std::string images;
    std::map<std::string, int> class_map;
    ModelSource model;
    MaskFlags masks;
    ExplainConfig config;
    double tolerance = 0.0;
    bool exclude_difficult = false;
    int repeats = 1;
    int input_size = 224;
    int synthetic_count = 50;
    int synthetic_object = 56;
};

json to_json(const EvalOptions& o) {
    return {{"dataset", o.dataset},
            {"annotations", o.annotations},
            {"split", o.split},
            {"images", o.images},
            {"class_map", o.class_map},
            {"model", o.model},
            {"method", o.masks.method},
            {"config", o.config},
            {"tolerance", o.tolerance},
            {"exclude_difficult", o.exclude_difficult},
            {"repeats", o.repeats},
            {"input_size", o.input_size},
            {"synthetic", {{"count", o.synthetic_count}, {"object", o.synthetic_object}}}};
}

EvalOptions eval_options_from(const json& j) {
    EvalOptions o;
    o.dataset = j.value("dataset", o.dataset);
    o.annotations = j.value("annotations", std::string{});
    o.split = j.value("split", std::string{});
    o.images = j.value("images", std::string{});
    o.class_map = j.value("class_map", o.class_map);
    o.model = j.value("model", ModelSource{});
    o.masks.method = j.value("method", o.masks.method);
    o.config = j.at("config").get<ExplainConfig>();
    o.tolerance = j.value("tolerance", o.tolerance);
    o.exclude_difficult = j.value("exclude_difficult", o.exclude_difficult);
    o.repeats = j.value("repeats", o.repeats);
    o.input_size = j.value("input_size", o.input_size);
    if (j.contains("synthetic")) {
        o.synthetic_count = j["synthetic"].value("count", o.synthetic_count);
        o.synthetic_object = j["synthetic"].value("object", o.synthetic_object);
    }
    return o;
}

struct EvalSample {
    GroundTruth truth;
    fs::path image_path;
    Image image;
    std::shared_ptr<const Predictor> model;
};

/// Loads annotations and checks that every referenced image exists. All
/// problems are reported together before any work starts.
std::vector<EvalSample> load_eval_dataset(const EvalOptions& o, RunManifest& manifest) {
    std::vector<EvalSample> samples;
    std::vector<std::string> problems;
    if (o.dataset == "synthetic") {
        const Size size{o.input_size > 0 ? o.input_size : 224, o.input_size > 0 ? o.input_size : 224};
        for (int i = 0; i < o.synthetic_count; ++i) {
            auto scene = make_planted_scene(size, o.synthetic_object, stream_seed(o.config.pyramid.seed, i));
            scene.truth.image_id = "synthetic_" + std::to_string(i);
            ToyPredictorSpec spec;
            spec.kind = ToyPredictorSpec::Kind::region_mean;
            spec.region = scene.object;
            samples.push_back({scene.truth, {}, std::move(scene.image), make_toy(spec)});
        }
    } else {
        std::vector<GroundTruth> gts;
        if (o.annotations.empty()) problems.push_back("--annotations is required for " + o.dataset);
        if (o.images.empty()) problems.push_back("--images is required for " + o.dataset);
        else if (!fs::is_directory(o.images)) problems.push_back("image directory " + o.images + " does not exist");
        if (o.dataset == "voc") {
            if (o.split.empty()) problems.push_back("--split is required for voc");
            else if (!fs::exists(o.split)) problems.push_back("split list " + o.split + " does not exist");
            if (!o.annotations.empty() && !fs::is_directory(o.annotations))
                problems.push_back("annotation directory " + o.annotations + " does not exist");
            if (problems.empty()) {
                auto loaded = load_voc(o.annotations, o.split);
                for (const auto& e : loaded.errors) problems.push_back(e.file + ": " + e.message);
                gts = std::move(loaded.records);
                manifest.add_input(o.split);
                for (const auto& gt : gts) manifest.add_input(fs::path(o.annotations) / (gt.image_id + ".xml"));
            }
        } else {
            if (!o.annotations.empty() && !fs::exists(o.annotations))
                problems.push_back("annotation file " + o.annotations + " does not exist");
            if (problems.empty()) {
                try {
                    gts = load_coco(o.annotations);
                    manifest.add_input(o.annotations);
                } catch (const FormatError& e) {
                    problems.push_back(e.what());
                }
            }
        }
        for (auto& gt : gts) {
            const fs::path p = fs::path(o.images) / gt.file_name;
            if (!fs::exists(p)) {
                problems.push_back("image " + p.string() + " for annotation " + gt.image_id + " does not exist");
                continue;
            }
            samples.push_back({std::move(gt), p, {}, nullptr});
        }
    }
    if (!problems.empty()) {
        std::string msg = "dataset has " + std::to_string(problems.size()) + " problem(s):";
        for (const auto& p : problems) msg += "\n  " + p;
        throw UsageError(msg);
    }
    if (samples.empty()) throw UsageError("dataset is empty");
    return samples;
}

std::map<std::string, int> resolve_class_indices(const EvalOptions& o, const Predictor& model) {
    if (!o.class_map.empty()) return o.class_map;
    const ModelInfo info = model.info();
    if (info.class_names.empty()) throw UsageError("model reports no class names; pass --class-map");
    std::map<std::string, int> m;
    for (std::size_t i = 0; i < info.class_names.size(); ++i) m.emplace(info.class_names[i], static_cast<int>(i));
    return m;
}

int run_eval(const EvalOptions& o, RunManifest manifest, const fs::path& out, unsigned jobs) {
    std::vector<EvalSample> samples = load_eval_dataset(o, manifest);
    std::shared_ptr<const Predictor> shared_model;
    std::map<std::string, int> classes;
    if (o.dataset == "synthetic") {
        classes = {{"object", 0}};
    } else {
        shared_model = open_model(o.model);
        classes = resolve_class_indices(o, *shared_model);
        for (auto& s : samples) {
            manifest.add_input(s.image_path);
            s.model = shared_model;
        }
    }

    ExplainConfig base = o.config;
    base.in_flight = std::min(base.in_flight, jobs);
    const bool include_difficult = !o.exclude_difficult;
    std::vector<PointingResult> runs;
    const auto t0 = std::chrono::steady_clock::now();
    for (int r = 0; r < o.repeats; ++r) {
        PointingGame game(o.tolerance, include_difficult);
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const auto& s = samples[i];
            const Image img = s.image_path.empty() ? s.image : fit_input(load_image(s.image_path), o.input_size);
            ExplainConfig cfg = base;
            cfg.pyramid.seed = stream_seed(o.config.pyramid.seed + static_cast<std::uint64_t>(r), i);
            std::optional<FragmentPyramid> pyr;
            if (cfg.method == MaskMethod::fragments) pyr = build_pyramid(img, cfg.pyramid, cfg.slic);
            for (const auto& cls : s.truth.present_classes(include_difficult)) {
                const auto it = classes.find(cls);
                if (it == classes.end()) {
                    std::cerr << "warning: no model class for '" << cls << "' (image " << s.truth.image_id << ")\n";
                    game.record(s.truth, cls, nullptr);
                    continue;
                }
                cfg.target_class = it->second;
                const SaliencyMap map =
                    pyr ? explain_with_pyramid(img, *s.model, *pyr, cfg) : saliency(img, *s.model, cfg);
                game.record(s.truth, cls, &map);
            }
        }
        runs.push_back(game.result());
        std::cout << "repeat " << r << ": accuracy " << std::fixed << std::setprecision(4) << runs.back().accuracy
                  << " (" << runs.back().hits << "/" << runs.back().hits + runs.back().misses << ")\n";
    }
    const PointingResult result = combine_repeats(runs);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    fs::create_directories(out);
    write_json(out / "results.json", mfpp::to_json(result, to_json(o)));
    std::ofstream csv(out / "decisions.csv");
    write_decisions_csv(csv, result.decisions);
    manifest.finished_at = utc_now();
    write_json(out / "manifest.json", manifest.to_json());

    std::cout << "pointing accuracy " << std::fixed << std::setprecision(4) << result.accuracy;
    if (result.repeats > 1) std::cout << " +- " << result.stddev << " over " << result.repeats << " repeats";
    std::cout << ", " << result.hits << " hits, " << result.misses << " misses, " << std::setprecision(1) << seconds
              << " s\n";
    if (result.config_errors > 0)
        std::cerr << "warning: " << result.config_errors << " (image, class) pairs had no saliency map\n";
    return 0;
}

// ---------------------------------------------------------------------------
// bench

struct BenchOptions {
    std::vector<int> masks{100, 200, 400};
    std::vector<std::string> images;
    int samples = 3;
    int input_size = 224;
    int repeats = 3;
    ModelSource model;
    std::string method = "fast-mfpp";
    ExplainConfig config;
};

json to_json(const BenchOptions& o) {
    return {{"masks", o.masks},           {"images", o.images}, {"samples", o.samples}, {"input_size", o.input_size},
            {"repeats", o.repeats},       {"model", o.model},   {"method", o.method},   {"config", o.config}};
}

BenchOptions bench_options_from(const json& j) {
    BenchOptions o;
    o.masks = j.value("masks", o.masks);
    o.images = j.value("images", o.images);
    o.samples = j.value("samples", o.samples);
    o.input_size = j.value("input_size", o.input_size);
    o.repeats = j.value("repeats", o.repeats);
    o.model = j.value("model", ModelSource{});
    o.method = j.value("method", o.method);
    o.config = j.at("config").get<ExplainConfig>();
    return o;
}

int run_bench(const BenchOptions& o, RunManifest manifest, const fs::path& out, unsigned jobs) {
    const int side = o.input_size > 0 ? o.input_size : 224;
    std::vector<Image> samples;
    for (const auto& p : o.images) {
        samples.push_back(fit_input(load_image(p), o.input_size));
        manifest.add_input(p);
    }
    if (o.images.empty())
        for (int i = 0; i < o.samples; ++i)
            samples.push_back(make_planted_scene({side, side}, side / 4, stream_seed(o.config.pyramid.seed, i)).image);
    if (samples.empty()) throw UsageError("no benchmark samples");

    ModelSource source = o.model;
    if (source.empty()) source.toy = "region:" + std::to_string(side / 4) + "," + std::to_string(side / 4) + ","
                                     + std::to_string(side / 2) + "," + std::to_string(side / 2);
    const auto model = open_model(source);

    json runs = json::array();
    for (int m : o.masks) {
        ExplainConfig cfg = o.config;
        cfg.pyramid.n_masks_total = m;
        cfg.in_flight = std::min(cfg.in_flight, jobs);
        cfg.validate();
        const TimingReport t = benchmark_time(cfg, *model, samples, o.repeats);
        for (const auto& f : t.failures) std::cerr << "warning: " << f << '\n';
        std::cout << "masks " << m << ": " << std::fixed << std::setprecision(4) << t.mean << " s +- " << t.stddev
                  << " s per sample (" << format_phases(t.phases) << ")\n";
        json entry = mfpp::to_json(t);
        entry["masks"] = m;
        runs.push_back(entry);
    }
    fs::create_directories(out);
    write_json(out / "results.json", {{"method", o.method}, {"model", source}, {"runs", runs}});
    manifest.finished_at = utc_now();
    write_json(out / "manifest.json", manifest.to_json());
    return 0;
}

// ---------------------------------------------------------------------------
// serve

std::atomic<httplib::Server*> g_server{nullptr};

int run_serve(const std::string& toy, const std::string& host, int port) {
    const auto model = make_toy(parse_toy_spec(toy));
    httplib::Server server;
    mount_predictor(server, *model);
    if (port == 0) port = server.bind_to_any_port(host);
    else if (!server.bind_to_port(host, port)) throw Error("cannot bind " + host + ":" + std::to_string(port));
    g_server = &server;
    std::signal(SIGINT, [](int) {
        if (auto* s = g_server.load()) s->stop();
    });
    std::signal(SIGTERM, [](int) {
        if (auto* s = g_server.load()) s->stop();
    });
    std::cout << "listening on http://" << host << ':' << port << std::endl;
    server.listen_after_bind();
    g_server = nullptr;
    return 0;
}

RunManifest start_manifest(const std::string& command, const json& options, std::uint64_t seed) {
    RunManifest m;
    m.command = command;
    m.options = options;
    m.seed = seed;
    m.started_at = utc_now();
    return m;
}

/// Loads a manifest for replay, or returns nullopt when none was given.
std::optional<RunManifest> replay_manifest(const std::string& path, const std::string& command) {
    if (path.empty()) return std::nullopt;
    RunManifest m = RunManifest::load(path, command);
    m.verify_inputs();
    m.inputs.clear();
    m.started_at = utc_now();
    return m;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Fragment-pyramid saliency maps for black-box image classifiers"};
    app.set_version_flag("--version", std::string(kVersion));
    app.require_subcommand(1);

    std::string out_dir;
    std::string manifest_path;
    unsigned jobs = hardware_jobs();

    // explain
    ExplainOptions ex;
    MaskFlags ex_flags;
    std::optional<int> ex_target;
    auto* explain = app.add_subcommand("explain", "saliency map for one image");
    explain->add_option("--image", ex.image, "input image");
    add_model_flags(explain, ex.model);
    add_mask_flags(explain, ex_flags);
    explain->add_option("--target", ex_target, "class index to explain (default: top-1 class)");
    explain->add_option("--input-size", ex.input_size, "resize to NxN before explaining (0 keeps the image size)");
    explain->add_flag("--dump-masks", ex.dump_masks, "also write every mask as PNG under masks/");
    explain->add_option("--out", out_dir, "output directory")->required();
    explain->add_option("--manifest", manifest_path, "replay the run recorded in this manifest");
    explain->add_option("--jobs", jobs, "maximum worker threads");

    // segment
    SegmentOptions sg;
    auto* segment = app.add_subcommand("segment", "SLIC segmentations as colored label images");
    segment->add_option("--image", sg.image, "input image");
    segment->add_option("--segments", sg.segments, "requested fragment counts")->delimiter(',');
    segment->add_option("--sigmas,--sigma", sg.sigmas, "pre-smoothing sigmas")->delimiter(',');
    segment->add_option("--compactness", sg.compactness)->capture_default_str();
    segment->add_option("--input-size", sg.input_size, "resize to NxN first (0 keeps the image size)");
    segment->add_option("--seed", sg.seed, "color seed");
    segment->add_option("--out", out_dir, "output directory")->required();
    segment->add_option("--manifest", manifest_path, "replay the run recorded in this manifest");

    // eval
    EvalOptions ev;
    std::string class_map_path;
    auto* eval = app.add_subcommand("eval", "pointing-game evaluation");
    eval->add_option("--dataset", ev.dataset, "voc, coco or synthetic")
        ->check(CLI::IsMember({"voc", "coco", "synthetic"}))
        ->capture_default_str();
    eval->add_option("--annotations", ev.annotations, "VOC Annotations directory or COCO instances JSON");
    eval->add_option("--split", ev.split, "VOC image-set list");
    eval->add_option("--images", ev.images, "image directory");
    eval->add_option("--class-map", class_map_path, "JSON object mapping dataset class names to model class indices");
    add_model_flags(eval, ev.model);
    add_mask_flags(eval, ev.masks);
    eval->add_option("--tolerance", ev.tolerance, "box dilation in map pixels")->capture_default_str();
    eval->add_flag("--exclude-difficult", ev.exclude_difficult, "ignore VOC boxes marked difficult");
    eval->add_option("--repeats", ev.repeats, "independent repeats with different seeds")->check(CLI::PositiveNumber);
    eval->add_option("--input-size", ev.input_size, "model input size")->capture_default_str();
    eval->add_option("--count", ev.synthetic_count, "synthetic images")->capture_default_str();
    eval->add_option("--object-size", ev.synthetic_object, "synthetic object side")->capture_default_str();
    eval->add_option("--out", out_dir, "output directory")->required();
    eval->add_option("--manifest", manifest_path, "replay the run recorded in this manifest");
    eval->add_option("--jobs", jobs, "maximum worker threads");

    // bench
    BenchOptions bn;
    MaskFlags bn_flags;
    auto* bench = app.add_subcommand("bench", "time single-image explanations");
    bench->add_option("--masks", bn.masks, "mask counts to time")->delimiter(',');
    bench->add_option("--images", bn.images, "sample images (default: synthetic scenes)");
    bench->add_option("--samples", bn.samples, "synthetic samples")->capture_default_str();
    bench->add_option("--repeats", bn.repeats, "timing repeats")->check(CLI::PositiveNumber)->capture_default_str();
    bench->add_option("--input-size", bn.input_size, "model input size")->capture_default_str();
    add_model_flags(bench, bn.model);
    add_mask_flags(bench, bn_flags, false);
    bench->add_option("--out", out_dir, "output directory")->required();
    bench->add_option("--manifest", manifest_path, "replay the run recorded in this manifest");
    bench->add_option("--jobs", jobs, "maximum worker threads");

    // serve
    std::string serve_toy = "constant:1";
    std::string serve_host = "127.0.0.1";
    int serve_port = 8000;
    auto* serve = app.add_subcommand("serve", "serve a toy predictor over the model wire protocol");
    serve->add_option("--toy", serve_toy)->capture_default_str();
    serve->add_option("--host", serve_host)->capture_default_str();
    serve->add_option("--port", serve_port, "0 picks a free port")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kExitUser;
    }
    jobs = std::max(1u, jobs);

    try {
        if (*explain) {
            if (auto m = replay_manifest(manifest_path, "explain")) {
                return run_explain(explain_options_from(m->options), *m, out_dir, jobs);
            }
            if (ex.image.empty()) throw UsageError("--image is required");
            ex.image = absolute_path(ex.image);
            resolve_model_url(ex.model);
            ex.config = resolve_config(ex_flags);
            ex.config.target_class = ex_target;
            ex.config.validate();
            return run_explain(ex, start_manifest("explain", to_json(ex), ex.config.pyramid.seed), out_dir, jobs);
        }
        if (*segment) {
            if (auto m = replay_manifest(manifest_path, "segment")) return run_segment(segment_options_from(m->options), *m, out_dir);
            if (sg.image.empty()) throw UsageError("--image is required");
            sg.image = absolute_path(sg.image);
            return run_segment(sg, start_manifest("segment", to_json(sg), sg.seed), out_dir);
        }
        if (*eval) {
            if (auto m = replay_manifest(manifest_path, "eval")) return run_eval(eval_options_from(m->options), *m, out_dir, jobs);
            resolve_model_url(ev.model);
            for (auto* p : {&ev.annotations, &ev.split, &ev.images}) *p = absolute_path(*p);
            ev.config = resolve_config(ev.masks);
            if (!class_map_path.empty()) {
                try {
                    ev.class_map = read_json(class_map_path).get<std::map<std::string, int>>();
                } catch (const json::exception&) {
                    throw UsageError(class_map_path + " must map class names to integer indices");
                }
            }
            return run_eval(ev, start_manifest("eval", to_json(ev), ev.config.pyramid.seed), out_dir, jobs);
        }
        if (*bench) {
            if (auto m = replay_manifest(manifest_path, "bench")) return run_bench(bench_options_from(m->options), *m, out_dir, jobs);
            resolve_model_url(bn.model);
            for (auto& p : bn.images) p = absolute_path(p);
            bn.method = bn_flags.method;
            bn.config = resolve_config(bn_flags);
            return run_bench(bn, start_manifest("bench", to_json(bn), bn.config.pyramid.seed), out_dir, jobs);
        }
        if (*serve) return run_serve(serve_toy, serve_host, serve_port);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUser;
    } catch (const InvalidParams& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUser;
    } catch (const InvalidConfig& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUser;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUser;
    } catch (const DimensionMismatch& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUser;
    } catch (const json::exception& e) {
        std::cerr << "error: malformed manifest: " << e.what() << '\n';
        return kExitUser;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return 0;
}
