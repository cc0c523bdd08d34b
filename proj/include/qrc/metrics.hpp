#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "qrc/geometry.hpp"

namespace qrc {

struct MetricError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Fraction of predictions overlapping their ground truth by strictly more
// than `thresh` IoU. The threshold is strict everywhere in this project;
// an overlap of exactly 0.5 counts as a miss.
inline double accuracy_at_iou(const std::vector<Box>& predictions, const std::vector<Box>& gts,
                              double thresh = 0.5) {
    if (predictions.size() != gts.size()) throw DimensionError("prediction/gt length mismatch");
    if (predictions.empty()) throw MetricError("accuracy over zero queries is undefined");
    long hits = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i)
        if (iou(predictions[i], gts[i]) > thresh) ++hits;
    return static_cast<double>(hits) / predictions.size();
}

// Upper bound performance: the fraction of ground-truth objects covered
// (IoU > 0.5) by at least one proposal of their image. Retrieval-style
// grounding cannot exceed this number.
inline double ubp(const std::vector<std::vector<Box>>& proposals_per_image,
                  const std::vector<std::vector<Box>>& gts_per_image, double thresh = 0.5) {
    if (proposals_per_image.size() != gts_per_image.size())
        throw DimensionError("proposal/gt image count mismatch");
    long total = 0, covered = 0;
    for (std::size_t i = 0; i < gts_per_image.size(); ++i) {
        for (const Box& gt : gts_per_image[i]) {
            ++total;
            for (const Box& p : proposals_per_image[i]) {
                if (iou(p, gt) > thresh) {
                    ++covered;
                    break;
                }
            }
        }
    }
    if (total == 0) throw MetricError("ubp over zero ground-truth objects is undefined");
    return static_cast<double>(covered) / total;
}

// Mean number of proposals covering each ground-truth object.
inline double bpg(const std::vector<std::vector<Box>>& proposals_per_image,
                  const std::vector<std::vector<Box>>& gts_per_image, double thresh = 0.5) {
    if (proposals_per_image.size() != gts_per_image.size())
        throw DimensionError("proposal/gt image count mismatch");
    long total = 0;
    long boxes = 0;
    for (std::size_t i = 0; i < gts_per_image.size(); ++i) {
        for (const Box& gt : gts_per_image[i]) {
            ++total;
            for (const Box& p : proposals_per_image[i])
                if (iou(p, gt) > thresh) ++boxes;
        }
    }
    if (total == 0) throw MetricError("bpg over zero ground-truth objects is undefined");
    return static_cast<double>(boxes) / total;
}

struct CategoryStat {
    long n = 0;
    long correct = 0;
    double accuracy() const { return n ? static_cast<double>(correct) / n : 0.0; }
};

struct EvalReport {
    double accuracy = 0;
    double ubp = 0;
    double bpg = 0;
    std::map<std::string, CategoryStat> per_category; // keyed by shape attribute
    long n_queries = 0;
    nlohmann::json config_echo;
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
    nlohmann::json cats;
    for (const auto& [name, stat] : r.per_category)
        cats[name] = {{"n", stat.n}, {"correct", stat.correct}, {"accuracy", stat.accuracy()}};
    j = nlohmann::json{{"accuracy", r.accuracy},
                       {"ubp", r.ubp},
                       {"bpg", r.bpg},
                       {"per_category", cats},
                       {"n_queries", r.n_queries},
                       {"config", r.config_echo}};
}

} // namespace qrc
