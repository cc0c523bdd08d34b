#pragma once

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qrc/config.hpp"
#include "qrc/geometry.hpp"
#include "qrc/rng.hpp"
#include "qrc/tensor.hpp"

namespace qrc {

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct GenerationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace attr {
inline const std::vector<std::string> kColors = {"red",    "green", "blue", "yellow",
                                                 "purple", "orange", "cyan", "white"};
inline const std::vector<std::string> kShapes = {"square", "circle", "triangle",
                                                 "bar",    "cross",  "ring"};
inline const std::vector<std::string> kSizes = {"small", "medium", "large"};
} // namespace attr

// Closed token vocabulary: padding, attribute words, template glue.
class Vocab {
public:
    Vocab() {
        add("<pad>");
        for (const auto& w : attr::kColors) add(w);
        for (const auto& w : attr::kShapes) add(w);
        for (const auto& w : attr::kSizes) add(w);
        for (const auto& w : {"the", "a", "of", "size", "that", "is"}) add(w);
    }

    int id(const std::string& token) const {
        auto it = ids_.find(token);
        if (it == ids_.end()) throw DataError("token not in vocabulary: " + token);
        return it->second;
    }
    const std::string& token(int id) const {
        if (id < 0 || id >= static_cast<int>(tokens_.size()))
            throw DataError("token id out of range: " + std::to_string(id));
        return tokens_[id];
    }
    int size() const { return static_cast<int>(tokens_.size()); }

private:
    std::vector<std::string> tokens_;
    std::map<std::string, int> ids_;

    void add(const std::string& t) {
        ids_[t] = static_cast<int>(tokens_.size());
        tokens_.push_back(t);
    }
};

struct SceneObject {
    Box box;
    int color = 0; // index into attr::kColors
    int shape = 0;
    int size_class = 0;
};

struct Scene {
    std::uint64_t id = 0;
    int width = 128;
    int height = 128;
    std::vector<SceneObject> objects;
};

struct Phrase {
    std::vector<int> tokens;
    std::string text;
    Box gt_box;
    int object_index = -1; // which scene object the phrase refers to
};

// One training instance: a scene plus one phrase per object. All objects
// are mentioned, so every query has full context structure.
struct GroundingExample {
    Scene scene;
    std::vector<Phrase> phrases;
};

struct GenConfig {
    int image_size = 128;
    int min_objects = 2;
    int max_objects = 5;
    double max_pair_iou = 0.3;
    int max_tries = 1000;
    double border_margin = 2.0;
    // per size class: [min_side, max_side]
    std::array<std::array<double, 2>, 3> side_ranges = {{{24.0, 32.0}, {36.0, 44.0}, {50.0, 62.0}}};
    std::array<double, 2> aspect_range = {0.8, 1.25};
};

namespace detail {
// Anchor set used for the generation-time coverage check: every object must
// be coverable (IoU > 0.5) by at least one raw anchor of the standard grid.
inline const std::vector<Box>& coverage_anchors() {
    static const std::vector<Box> anchors = [] {
        TrainConfig c;
        return generate_anchors(c.grid, c.grid, c.stride(), c.scales, c.ratios);
    }();
    return anchors;
}

inline bool anchor_coverable(const Box& b) {
    for (const Box& a : coverage_anchors())
        if (iou(a, b) > 0.5) return true;
    return false;
}
} // namespace detail

// Rejection-sample a scene: 2-5 objects, pairwise IoU below 0.3, unique
// (color, shape) pairs, and every object coverable by the raw anchor set.
inline Scene generate_scene(Rng rng, const GenConfig& cfg, std::uint64_t scene_id) {
    Scene scene;
    scene.id = scene_id;
    scene.width = cfg.image_size;
    scene.height = cfg.image_size;
    int n_objects =
        cfg.min_objects + static_cast<int>(rng.uniform_int(cfg.max_objects - cfg.min_objects + 1));

    int tries = 0;
    while (static_cast<int>(scene.objects.size()) < n_objects) {
        if (++tries > cfg.max_tries)
            throw GenerationError("scene generation exceeded retry cap (config too dense)");
        SceneObject obj;
        obj.size_class = static_cast<int>(rng.uniform_int(3));
        double side = rng.uniform(cfg.side_ranges[obj.size_class][0], cfg.side_ranges[obj.size_class][1]);
        double aspect = rng.uniform(cfg.aspect_range[0], cfg.aspect_range[1]);
        double w = side * std::sqrt(aspect);
        double h = side / std::sqrt(aspect);
        double margin = cfg.border_margin;
        if (w + 2 * margin >= cfg.image_size || h + 2 * margin >= cfg.image_size) continue;
        double cx = rng.uniform(margin + w / 2, cfg.image_size - margin - w / 2);
        double cy = rng.uniform(margin + h / 2, cfg.image_size - margin - h / 2);
        obj.box = Box(cx, cy, w, h);
        obj.color = static_cast<int>(rng.uniform_int(attr::kColors.size()));
        obj.shape = static_cast<int>(rng.uniform_int(attr::kShapes.size()));

        bool ok = detail::anchor_coverable(obj.box);
        for (const auto& other : scene.objects) {
            if (!ok) break;
            if (iou(obj.box, other.box) >= cfg.max_pair_iou) ok = false;
            if (other.color == obj.color && other.shape == obj.shape) ok = false;
        }
        if (ok) scene.objects.push_back(obj);
    }
    return scene;
}

// Feature grid layout: 8 color one-hot + 6 shape + 3 size channels, then 7
// pure-noise channels (24 total). A cell carries an object's attribute
// encoding when the object covers at least half of it; every channel of
// every cell gets N(0, 0.1) noise on top.
template <typename T>
struct FeatureGrid {
    int grid_h = 0;
    int grid_w = 0;
    double stride = 0;
    int d = 0;
    Tensor<T> cells; // (grid_h * grid_w) x d, row-major over cells

    int cell_index(int gy, int gx) const { return gy * grid_w + gx; }
};

inline constexpr int kColorChannels = 8;
inline constexpr int kShapeChannels = 6;
inline constexpr int kSizeChannels = 3;
inline constexpr int kNoiseChannels = 7;
inline constexpr int kFeatChannels =
    kColorChannels + kShapeChannels + kSizeChannels + kNoiseChannels;
inline constexpr double kFeatureNoiseSigma = 0.1;

// The noise stream is derived from the scene id alone, so a grid is a
// pure function of its scene and identical across training and evaluation.
template <typename T>
FeatureGrid<T> featurize(const Scene& scene, double stride) {
    FeatureGrid<T> grid;
    grid.stride = stride;
    grid.grid_w = static_cast<int>(scene.width / stride);
    grid.grid_h = static_cast<int>(scene.height / stride);
    grid.d = kFeatChannels;
    grid.cells = Tensor<T>::zeros({grid.grid_h * grid.grid_w, grid.d});

    Rng rng = Rng(0x6665617473ull).split("featurize").split(scene.id);
    double cell_area = stride * stride;
    for (int gy = 0; gy < grid.grid_h; ++gy) {
        for (int gx = 0; gx < grid.grid_w; ++gx) {
            Box cell = Box::from_corners(gx * stride, gy * stride, (gx + 1) * stride, (gy + 1) * stride);
            // owner = object covering at least half this cell; if two
            // qualify (adjacent objects), the larger overlap wins.
            int owner = -1;
            double owner_cover = 0.0;
            for (std::size_t k = 0; k < scene.objects.size(); ++k) {
                const Box& b = scene.objects[k].box;
                double ix = std::min(cell.x2(), b.x2()) - std::max(cell.x1(), b.x1());
                double iy = std::min(cell.y2(), b.y2()) - std::max(cell.y1(), b.y1());
                double cover = (ix > 0 && iy > 0) ? ix * iy / cell_area : 0.0;
                if (cover >= 0.5 && cover > owner_cover) {
                    owner = static_cast<int>(k);
                    owner_cover = cover;
                }
            }
            int row = grid.cell_index(gy, gx);
            if (owner >= 0) {
                const auto& obj = scene.objects[owner];
                grid.cells.at(row, obj.color) = T(1);
                grid.cells.at(row, kColorChannels + obj.shape) = T(1);
                grid.cells.at(row, kColorChannels + kShapeChannels + obj.size_class) = T(1);
            }
            for (int c = 0; c < grid.d; ++c)
                grid.cells.at(row, c) += static_cast<T>(rng.normal(0.0, kFeatureNoiseSigma));
        }
    }
    return grid;
}

namespace detail {
struct Template {
    // words; attribute slots are the literals "<size>", "<color>", "<shape>"
    std::vector<std::string> words;
};

inline const std::vector<Template>& templates() {
    static const std::vector<Template> t = {
        {{"the", "<size>", "<color>", "<shape>"}},
        {{"a", "<size>", "<color>", "<shape>"}},
        {{"the", "<color>", "<shape>", "of", "<size>", "size"}},
        {{"the", "<color>", "<shape>", "that", "is", "<size>"}},
    };
    return t;
}
} // namespace detail

inline Phrase make_phrase(const Scene& scene, int object_index, int template_index,
                          const Vocab& vocab) {
    const auto& obj = scene.objects[object_index];
    const auto& tpl = detail::templates()[template_index];
    Phrase p;
    p.object_index = object_index;
    p.gt_box = obj.box;
    std::string text;
    for (const auto& w : tpl.words) {
        std::string word = w;
        if (w == "<size>") word = attr::kSizes[obj.size_class];
        else if (w == "<color>") word = attr::kColors[obj.color];
        else if (w == "<shape>") word = attr::kShapes[obj.shape];
        p.tokens.push_back(vocab.id(word));
        text += (text.empty() ? "" : " ") + word;
    }
    p.text = text;
    return p;
}

// One phrase per object, template chosen per phrase, phrase order shuffled.
inline std::vector<Phrase> render_description(const Scene& scene, Rng rng, const Vocab& vocab) {
    std::vector<Phrase> phrases;
    phrases.reserve(scene.objects.size());
    for (std::size_t k = 0; k < scene.objects.size(); ++k) {
        int tpl = static_cast<int>(rng.uniform_int(detail::templates().size()));
        phrases.push_back(make_phrase(scene, static_cast<int>(k), tpl, vocab));
    }
    for (std::size_t i = phrases.size(); i > 1; --i)
        std::swap(phrases[i - 1], phrases[rng.uniform_int(i)]);
    return phrases;
}

// Identify the object a phrase refers to from its attribute tokens alone.
// (color, shape) is unique within a scene by construction.
inline std::optional<int> parse_referenced_object(const Scene& scene,
                                                  const std::vector<int>& tokens,
                                                  const Vocab& vocab) {
    int color = -1, shape = -1;
    for (int t : tokens) {
        const std::string& w = vocab.token(t);
        for (std::size_t i = 0; i < attr::kColors.size(); ++i)
            if (w == attr::kColors[i]) color = static_cast<int>(i);
        for (std::size_t i = 0; i < attr::kShapes.size(); ++i)
            if (w == attr::kShapes[i]) shape = static_cast<int>(i);
    }
    for (std::size_t k = 0; k < scene.objects.size(); ++k)
        if (scene.objects[k].color == color && scene.objects[k].shape == shape)
            return static_cast<int>(k);
    return std::nullopt;
}

inline GroundingExample generate_example(Rng corpus_rng, std::uint64_t index, const GenConfig& cfg,
                                         const Vocab& vocab) {
    Rng scene_rng = corpus_rng.split("scene").split(index);
    Rng text_rng = corpus_rng.split("text").split(index);
    GroundingExample ex;
    ex.scene = generate_scene(scene_rng, cfg, index);
    ex.phrases = render_description(ex.scene, text_rng, vocab);
    return ex;
}

inline std::vector<GroundingExample> generate_corpus(std::uint64_t seed, int n,
                                                     const GenConfig& cfg, const Vocab& vocab) {
    Rng rng = Rng(seed).split("data");
    std::vector<GroundingExample> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) out.push_back(generate_example(rng, i, cfg, vocab));
    return out;
}

enum class Split { Train, Val, Test };

// 8:1:1 split keyed on a hash of the scene id, stable across runs.
inline Split split_of(std::uint64_t scene_id) {
    std::uint64_t h = Rng(scene_id).next_u64() % 10;
    if (h < 8) return Split::Train;
    return h == 8 ? Split::Val : Split::Test;
}

// --- JSONL corpus serialization ---------------------------------------

inline nlohmann::json box_to_json(const Box& b) {
    return nlohmann::json::array({b.x1(), b.y1(), b.x2(), b.y2()});
}

inline Box box_from_json(const nlohmann::json& j) {
    if (!j.is_array() || j.size() != 4) throw DataError("box must be [x1,y1,x2,y2]");
    return Box::from_corners(j[0].get<double>(), j[1].get<double>(), j[2].get<double>(),
                             j[3].get<double>());
}

inline nlohmann::json example_to_json(const GroundingExample& ex) {
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& o : ex.scene.objects)
        objs.push_back({{"box", box_to_json(o.box)},
                        {"color", attr::kColors[o.color]},
                        {"shape", attr::kShapes[o.shape]},
                        {"size", attr::kSizes[o.size_class]}});
    nlohmann::json phrases = nlohmann::json::array();
    for (const auto& p : ex.phrases)
        phrases.push_back(
            {{"tokens", p.tokens}, {"text", p.text}, {"gt_box", box_to_json(p.gt_box)}});
    return {{"scene",
             {{"id", ex.scene.id},
              {"dims", {ex.scene.width, ex.scene.height}},
              {"objects", objs}}},
            {"phrases", phrases}};
}

inline int attribute_index(const std::vector<std::string>& table, const std::string& word) {
    for (std::size_t i = 0; i < table.size(); ++i)
        if (table[i] == word) return static_cast<int>(i);
    throw DataError("unknown attribute word: " + word);
}

inline GroundingExample example_from_json(const nlohmann::json& j) {
    GroundingExample ex;
    const auto& scene = j.at("scene");
    ex.scene.id = scene.at("id").get<std::uint64_t>();
    ex.scene.width = scene.at("dims").at(0).get<int>();
    ex.scene.height = scene.at("dims").at(1).get<int>();
    for (const auto& o : scene.at("objects")) {
        SceneObject obj;
        obj.box = box_from_json(o.at("box"));
        obj.color = attribute_index(attr::kColors, o.at("color").get<std::string>());
        obj.shape = attribute_index(attr::kShapes, o.at("shape").get<std::string>());
        obj.size_class = attribute_index(attr::kSizes, o.at("size").get<std::string>());
        ex.scene.objects.push_back(obj);
    }
    for (const auto& p : j.at("phrases")) {
        Phrase ph;
        ph.tokens = p.at("tokens").get<std::vector<int>>();
        ph.text = p.at("text").get<std::string>();
        ph.gt_box = box_from_json(p.at("gt_box"));
        for (std::size_t k = 0; k < ex.scene.objects.size(); ++k)
            if (ex.scene.objects[k].box == ph.gt_box) ph.object_index = static_cast<int>(k);
        if (ph.object_index < 0) throw DataError("phrase gt_box matches no scene object");
        ex.phrases.push_back(ph);
    }
    return ex;
}

inline void write_corpus(const std::vector<GroundingExample>& examples, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path);
    for (const auto& ex : examples) out << example_to_json(ex).dump() << "\n";
}

inline std::vector<GroundingExample> read_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open corpus: " + path);
    std::vector<GroundingExample> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            out.push_back(example_from_json(nlohmann::json::parse(line)));
        } catch (const std::exception& e) {
            throw DataError("corpus parse error at line " + std::to_string(line_no) + ": " +
                            e.what());
        }
    }
    return out;
}

} // namespace qrc
