#pragma once

// Pointing-game localization metric, VOC/COCO ground-truth ingestion and the
// per-sample wall-clock benchmark.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <json.hpp>

#include "mfpp/error.hpp"
#include "mfpp/saliency.hpp"

namespace mfpp {

struct Box {
    std::string class_name;
    double xmin = 0, ymin = 0, xmax = 0, ymax = 0;
    bool difficult = false;
    bool iscrowd = false;
};

struct GroundTruth {
    std::string image_id;
    std::string file_name;
    int width = 0;
    int height = 0;
    std::vector<Box> boxes;

    /// Throws FormatError unless every box satisfies 0 <= min < max <= size.
    void validate() const {
        if (width < 1 || height < 1) throw FormatError(image_id + ": image size must be positive");
        for (const auto& b : boxes)
            if (!(b.xmin >= 0 && b.xmin < b.xmax && b.xmax <= width && b.ymin >= 0 && b.ymin < b.ymax && b.ymax <= height))
                throw FormatError(image_id + ": box for '" + b.class_name + "' lies outside the image");
    }

    /// Sorted distinct class names with at least one box.
    std::vector<std::string> present_classes(bool include_difficult = true) const {
        std::set<std::string> s;
        for (const auto& b : boxes)
            if (include_difficult || !b.difficult) s.insert(b.class_name);
        return {s.begin(), s.end()};
    }
};

inline const std::array<std::string, 20>& voc_classes() {
    static const std::array<std::string, 20> names{
        "aeroplane", "bicycle", "bird",  "boat",        "bottle", "bus",         "car",   "cat",  "chair", "cow",
        "diningtable", "dog",   "horse", "motorbike", "person", "pottedplant", "sheep", "sofa", "train", "tvmonitor"};
    return names;
}

struct LoadError {
    std::string file;
    std::string message;
};

struct LoadResult {
    std::vector<GroundTruth> records;
    std::vector<LoadError> errors;
};

/// Parses one VOC-layout XML annotation.
inline GroundTruth parse_voc_xml(std::istream& in, const std::string& image_id) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    try {
        pt::read_xml(in, tree);
    } catch (const pt::xml_parser_error& e) {
        throw FormatError(std::string("malformed XML: ") + e.what());
    }
    const auto& ann = tree.get_child_optional("annotation");
    if (!ann) throw FormatError("missing <annotation> root");
    GroundTruth gt;
    gt.image_id = image_id;
    gt.file_name = ann->get<std::string>("filename", image_id + ".jpg");
    try {
        gt.width = ann->get<int>("size.width");
        gt.height = ann->get<int>("size.height");
    } catch (const pt::ptree_error&) {
        throw FormatError("missing or invalid <size>");
    }
    const auto& vocab = voc_classes();
    for (const auto& [tag, obj] : *ann) {
        if (tag != "object") continue;
        Box b;
        try {
            b.class_name = obj.get<std::string>("name");
            b.difficult = obj.get<int>("difficult", 0) != 0;
            b.xmin = obj.get<double>("bndbox.xmin");
            b.ymin = obj.get<double>("bndbox.ymin");
            b.xmax = obj.get<double>("bndbox.xmax");
            b.ymax = obj.get<double>("bndbox.ymax");
        } catch (const pt::ptree_error& e) {
            throw FormatError(std::string("invalid <object>: ") + e.what());
        }
        if (std::find(vocab.begin(), vocab.end(), b.class_name) == vocab.end())
            throw FormatError("unknown VOC class '" + b.class_name + "'");
        gt.boxes.push_back(std::move(b));
    }
    gt.validate();
    return gt;
}

/// Reads `<ann_dir>/<id>.xml` for every id listed in `split_file`. Per-file
/// failures are collected and the remaining files still load.
inline LoadResult load_voc(const std::filesystem::path& ann_dir, const std::filesystem::path& split_file) {
    std::ifstream split(split_file);
    if (!split) throw FormatError("cannot open split list " + split_file.string());
    LoadResult result;
    std::string line;
    while (std::getline(split, line)) {
        std::istringstream ls(line);
        std::string id;
        if (!(ls >> id)) continue;
        const auto path = ann_dir / (id + ".xml");
        std::ifstream in(path);
        if (!in) {
            result.errors.push_back({path.string(), "cannot open"});
            continue;
        }
        try {
            result.records.push_back(parse_voc_xml(in, id));
        } catch (const FormatError& e) {
            result.errors.push_back({path.string(), e.what()});
        }
    }
    return result;
}

/// COCO instances JSON: (x, y, w, h) boxes become corner form, crowd
/// annotations are dropped and images left without boxes are excluded.
inline std::vector<GroundTruth> parse_coco(const nlohmann::json& j) {
    for (const char* key : {"images", "annotations", "categories"})
        if (!j.contains(key) || !j[key].is_array()) throw FormatError(std::string("COCO JSON lacks a '") + key + "' array");

    std::map<std::int64_t, std::string> categories;
    for (const auto& c : j["categories"]) categories[c.at("id").get<std::int64_t>()] = c.at("name").get<std::string>();

    std::map<std::int64_t, std::size_t> index;
    std::vector<GroundTruth> all;
    for (const auto& im : j["images"]) {
        GroundTruth gt;
        const auto id = im.at("id").get<std::int64_t>();
        gt.image_id = std::to_string(id);
        gt.file_name = im.value("file_name", gt.image_id + ".jpg");
        gt.width = im.at("width").get<int>();
        gt.height = im.at("height").get<int>();
        index[id] = all.size();
        all.push_back(std::move(gt));
    }
    for (const auto& a : j["annotations"]) {
        if (a.value("iscrowd", 0) != 0) continue;
        const auto it = index.find(a.at("image_id").get<std::int64_t>());
        if (it == index.end()) throw FormatError("annotation refers to an unknown image");
        const auto cat = categories.find(a.at("category_id").get<std::int64_t>());
        if (cat == categories.end()) throw FormatError("annotation refers to an unknown category");
        const auto& bbox = a.at("bbox");
        if (!bbox.is_array() || bbox.size() != 4) throw FormatError("bbox must hold 4 numbers");
        GroundTruth& gt = all[it->second];
        Box b;
        b.class_name = cat->second;
        b.xmin = std::clamp(bbox[0].get<double>(), 0.0, static_cast<double>(gt.width));
        b.ymin = std::clamp(bbox[1].get<double>(), 0.0, static_cast<double>(gt.height));
        b.xmax = std::clamp(bbox[0].get<double>() + bbox[2].get<double>(), 0.0, static_cast<double>(gt.width));
        b.ymax = std::clamp(bbox[1].get<double>() + bbox[3].get<double>(), 0.0, static_cast<double>(gt.height));
        if (b.xmax <= b.xmin || b.ymax <= b.ymin) continue;
        gt.boxes.push_back(std::move(b));
    }
    std::vector<GroundTruth> out;
    for (auto& gt : all)
        if (!gt.boxes.empty()) out.push_back(std::move(gt));
    return out;
}

inline std::vector<GroundTruth> load_coco(const std::filesystem::path& ann_json) {
    std::ifstream in(ann_json);
    if (!in) throw FormatError("cannot open " + ann_json.string());
    const auto j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw FormatError(ann_json.string() + " is not valid JSON");
    try {
        return parse_coco(j);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed COCO annotation: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// Pointing game

struct ClassTally {
    std::size_t hits = 0;
    std::size_t misses = 0;

    std::size_t total() const noexcept { return hits + misses; }
    double accuracy() const noexcept { return total() ? static_cast<double>(hits) / static_cast<double>(total()) : 0.0; }
};

struct PointingDecision {
    std::string image_id;
    std::string class_name;
    int x = 0;
    int y = 0;
    bool hit = false;
};

struct PointingResult {
    std::size_t hits = 0;
    std::size_t misses = 0;
    double accuracy = 0.0;
    std::map<std::string, ClassTally> per_class;
    /// (image, class) pairs that had no saliency map; not counted as misses.
    std::size_t config_errors = 0;
    double stddev = 0.0;
    std::size_t repeats = 1;
    std::vector<PointingDecision> decisions;
};

/// Argmax of `map` (ties to the lowest row-major index) tested against every
/// box of `class_name`. Boxes are rescaled from the original image frame to the
/// map frame and dilated by `tolerance` map pixels; the argmax pixel center must
/// fall inside.
inline PointingDecision point(const SaliencyMap& map, const GroundTruth& gt, const std::string& class_name,
                              double tolerance = 0.0, bool include_difficult = true) {
    const std::size_t idx = map.argmax();
    PointingDecision d{gt.image_id, class_name, static_cast<int>(idx % map.width), static_cast<int>(idx / map.width), false};
    const double sx = static_cast<double>(map.width) / gt.width;
    const double sy = static_cast<double>(map.height) / gt.height;
    const double px = d.x + 0.5, py = d.y + 0.5;
    for (const auto& b : gt.boxes) {
        if (b.class_name != class_name || (!include_difficult && b.difficult)) continue;
        if (px >= b.xmin * sx - tolerance && px <= b.xmax * sx + tolerance && py >= b.ymin * sy - tolerance
            && py <= b.ymax * sy + tolerance) {
            d.hit = true;
            break;
        }
    }
    return d;
}

/// Incremental pointing-game tally.
class PointingGame {
public:
    explicit PointingGame(double tolerance = 0.0, bool include_difficult = true)
        : tolerance_(tolerance), include_difficult_(include_difficult) {}

    /// `map` may be null when no map exists for a present class.
    void record(const GroundTruth& gt, const std::string& class_name, const SaliencyMap* map) {
        if (!map) {
            ++result_.config_errors;
            return;
        }
        PointingDecision d = point(*map, gt, class_name, tolerance_, include_difficult_);
        auto& tally = result_.per_class[class_name];
        if (d.hit) {
            ++result_.hits;
            ++tally.hits;
        } else {
            ++result_.misses;
            ++tally.misses;
        }
        result_.decisions.push_back(std::move(d));
    }

    PointingResult result() const {
        PointingResult r = result_;
        const std::size_t n = r.hits + r.misses;
        r.accuracy = n ? static_cast<double>(r.hits) / static_cast<double>(n) : 0.0;
        return r;
    }

    bool include_difficult() const noexcept { return include_difficult_; }

private:
    double tolerance_;
    bool include_difficult_;
    PointingResult result_;
};

using MapKey = std::pair<std::string, std::string>; ///< (image_id, class_name)

/// Scores every (image, present class) pair of `gts` against `maps`.
inline PointingResult pointing_game(const std::map<MapKey, SaliencyMap>& maps, const std::vector<GroundTruth>& gts,
                                    double tolerance = 0.0, bool include_difficult = true) {
    PointingGame game(tolerance, include_difficult);
    for (const auto& gt : gts)
        for (const auto& cls : gt.present_classes(include_difficult)) {
            const auto it = maps.find({gt.image_id, cls});
            game.record(gt, cls, it == maps.end() ? nullptr : &it->second);
        }
    return game.result();
}

/// Pools repeated runs: counts are summed, accuracy is the mean over runs and
/// stddev the sample standard deviation of per-run accuracies.
inline PointingResult combine_repeats(const std::vector<PointingResult>& runs) {
    if (runs.empty()) return {};
    PointingResult out;
    out.repeats = runs.size();
    double mean = 0.0;
    for (const auto& r : runs) {
        out.hits += r.hits;
        out.misses += r.misses;
        out.config_errors += r.config_errors;
        for (const auto& [cls, t] : r.per_class) {
            out.per_class[cls].hits += t.hits;
            out.per_class[cls].misses += t.misses;
        }
        mean += r.accuracy;
    }
    mean /= static_cast<double>(runs.size());
    out.accuracy = mean;
    if (runs.size() > 1) {
        double ss = 0.0;
        for (const auto& r : runs) ss += (r.accuracy - mean) * (r.accuracy - mean);
        out.stddev = std::sqrt(ss / static_cast<double>(runs.size() - 1));
    }
    out.decisions = runs.back().decisions;
    return out;
}

inline nlohmann::json to_json(const PointingResult& r, const nlohmann::json& config = nlohmann::json::object()) {
    nlohmann::json per_class = nlohmann::json::object();
    for (const auto& [cls, t] : r.per_class)
        per_class[cls] = {{"hits", t.hits}, {"misses", t.misses}, {"accuracy", t.accuracy()}};
    return {{"overall",
             {{"hits", r.hits}, {"misses", r.misses}, {"accuracy", r.accuracy}, {"stddev", r.stddev}}},
            {"per_class", per_class},
            {"n", r.hits + r.misses},
            {"config_errors", r.config_errors},
            {"repeats", r.repeats},
            {"config", config}};
}

inline void write_decisions_csv(std::ostream& out, const std::vector<PointingDecision>& decisions) {
    out << "image_id,class,x,y,hit\n";
    for (const auto& d : decisions)
        out << d.image_id << ',' << d.class_name << ',' << d.x << ',' << d.y << ',' << (d.hit ? 1 : 0) << '\n';
}

// ---------------------------------------------------------------------------
// Timing

struct TimingReport {
    /// Mean over repeats of the per-sample wall-clock average, in seconds.
    double mean = 0.0;
    /// Sample standard deviation of the per-repeat averages.
    double stddev = 0.0;
    std::vector<double> per_repeat;
    /// Mean seconds per sample spent in each phase.
    PhaseTimes phases;
    std::size_t samples = 0;
    std::size_t repeats = 0;
    std::size_t n_masks = 0;
    /// "<repeat>/<sample>: <error>" for samples aborted by the predictor.
    std::vector<std::string> failures;
};

inline nlohmann::json to_json(const TimingReport& t) {
    return {{"mean_s", t.mean},
            {"stddev_s", t.stddev},
            {"per_repeat_s", t.per_repeat},
            {"phases_s",
             {{"segmentation", t.phases.segmentation},
              {"masking", t.phases.masking},
              {"inference", t.phases.inference},
              {"aggregation", t.phases.aggregation}}},
            {"samples", t.samples},
            {"repeats", t.repeats},
            {"n_masks", t.n_masks},
            {"failures", t.failures}};
}

/// Times the whole explanation of each sample, `repeats` times over.
inline TimingReport benchmark_time(const ExplainConfig& cfg, const Predictor& model, std::span<const Image> samples,
                                   int repeats) {
    if (samples.empty()) throw InvalidConfig("benchmark needs at least one sample");
    if (repeats < 1) throw InvalidConfig("repeats must be at least 1");
    TimingReport report;
    report.samples = samples.size();
    report.repeats = static_cast<std::size_t>(repeats);
    report.n_masks = static_cast<std::size_t>(cfg.pyramid.n_masks_total);
    std::size_t ok_total = 0;
    for (int r = 0; r < repeats; ++r) {
        double total = 0.0;
        std::size_t ok = 0;
        for (std::size_t s = 0; s < samples.size(); ++s) {
            PhaseTimes phases;
            const auto t0 = detail::Clock::now();
            try {
                (void)saliency(samples[s], model, cfg, &phases);
            } catch (const PredictorError& e) {
                report.failures.push_back(std::to_string(r) + "/" + std::to_string(s) + ": " + e.what());
                continue;
            }
            total += detail::seconds_since(t0);
            ++ok;
            report.phases.segmentation += phases.segmentation;
            report.phases.masking += phases.masking;
            report.phases.inference += phases.inference;
            report.phases.aggregation += phases.aggregation;
        }
        if (ok) report.per_repeat.push_back(total / static_cast<double>(ok));
        ok_total += ok;
    }
    if (ok_total) {
        const double inv = 1.0 / static_cast<double>(ok_total);
        report.phases.segmentation *= inv;
        report.phases.masking *= inv;
        report.phases.inference *= inv;
        report.phases.aggregation *= inv;
    }
    if (!report.per_repeat.empty()) {
        double sum = 0.0;
        for (double v : report.per_repeat) sum += v;
        report.mean = sum / static_cast<double>(report.per_repeat.size());
        if (report.per_repeat.size() > 1) {
            double ss = 0.0;
            for (double v : report.per_repeat) ss += (v - report.mean) * (v - report.mean);
            report.stddev = std::sqrt(ss / static_cast<double>(report.per_repeat.size() - 1));
        }
    }
    return report;
}

} // namespace mfpp
