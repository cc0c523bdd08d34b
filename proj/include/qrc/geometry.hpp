#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "qrc/tensor.hpp"

namespace qrc {

// Axis-aligned rectangle in pixel coordinates, stored corner-form so that
// the [x1,y1,x2,y2] serialization round-trips bit-exactly. Center-form
// accessors are derived. Invariant: x2 > x1 and y2 > y1.
struct Box {
    Box() : x1_(0), y1_(0), x2_(1), y2_(1) {}

    // center-form constructor (cx, cy, w, h)
    Box(double cx, double cy, double w, double h)
        : x1_(cx - 0.5 * w), y1_(cy - 0.5 * h), x2_(cx + 0.5 * w), y2_(cy + 0.5 * h) {
        if (!(w > 0) || !(h > 0)) throw ContractError("box with non-positive extent");
    }

    static Box from_corners(double x1, double y1, double x2, double y2) {
        if (!(x2 > x1) || !(y2 > y1)) throw ContractError("box with non-positive extent");
        Box b;
        b.x1_ = x1;
        b.y1_ = y1;
        b.x2_ = x2;
        b.y2_ = y2;
        return b;
    }

    double x1() const { return x1_; }
    double y1() const { return y1_; }
    double x2() const { return x2_; }
    double y2() const { return y2_; }
    double cx() const { return 0.5 * (x1_ + x2_); }
    double cy() const { return 0.5 * (y1_ + y2_); }
    double w() const { return x2_ - x1_; }
    double h() const { return y2_ - y1_; }
    double area() const { return w() * h(); }

    bool operator==(const Box& o) const {
        return x1_ == o.x1_ && y1_ == o.y1_ && x2_ == o.x2_ && y2_ == o.y2_;
    }

private:
    double x1_, y1_, x2_, y2_;
};

inline double iou(const Box& a, const Box& b) {
    double ix = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
    double iy = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
    if (ix <= 0 || iy <= 0) return 0.0;
    double inter = ix * iy;
    return inter / (a.area() + b.area() - inter);
}

// The 4-D offset relating an anchor (or proposal) to a target box:
// t = [(x-x_a)/w_a, (y-y_a)/h_a, log(w/w_a), log(h/h_a)].
using RegressionCode = std::array<double, 4>;

inline RegressionCode encode_regression(const Box& anchor, const Box& target) {
    return {(target.cx() - anchor.cx()) / anchor.w(), (target.cy() - anchor.cy()) / anchor.h(),
            std::log(target.w() / anchor.w()), std::log(target.h() / anchor.h())};
}

// Log-scale offsets are clamped to +-6 so an untrained regressor cannot
// produce astronomically sized boxes.
inline constexpr double kLogScaleClamp = 6.0;

inline Box decode_regression(const Box& anchor, const RegressionCode& t) {
    double dw = std::clamp(t[2], -kLogScaleClamp, kLogScaleClamp);
    double dh = std::clamp(t[3], -kLogScaleClamp, kLogScaleClamp);
    return Box(t[0] * anchor.w() + anchor.cx(), t[1] * anchor.h() + anchor.cy(),
               std::exp(dw) * anchor.w(), std::exp(dh) * anchor.h());
}

// Clip to [0, img_w] x [0, img_h], keeping at least a 1-pixel extent.
inline Box clip_to_image(const Box& b, double img_w, double img_h) {
    double x1 = std::clamp(b.x1(), 0.0, img_w - 1.0);
    double y1 = std::clamp(b.y1(), 0.0, img_h - 1.0);
    double x2 = std::clamp(b.x2(), x1 + 1.0, img_w);
    double y2 = std::clamp(b.y2(), y1 + 1.0, img_h);
    return Box::from_corners(x1, y1, x2, y2);
}

// One anchor per (cell, scale, ratio), row-major over cells, then scale,
// then ratio. Each anchor is centered on its cell and has area scale^2
// with w/h = ratio.
inline std::vector<Box> generate_anchors(int grid_h, int grid_w, double stride,
                                         const std::vector<double>& scales,
                                         const std::vector<double>& ratios) {
    if (scales.empty() || ratios.empty()) throw ContractError("anchors need scales and ratios");
    std::vector<Box> anchors;
    anchors.reserve(static_cast<std::size_t>(grid_h) * grid_w * scales.size() * ratios.size());
    for (int gy = 0; gy < grid_h; ++gy)
        for (int gx = 0; gx < grid_w; ++gx) {
            double cx = (gx + 0.5) * stride;
            double cy = (gy + 0.5) * stride;
            for (double s : scales)
                for (double r : ratios) {
                    double sr = std::sqrt(r);
                    anchors.emplace_back(cx, cy, s * sr, s / sr);
                }
        }
    return anchors;
}

struct AnchorLabel {
    enum class State { Positive, Negative, Ignore };
    State state = State::Negative;
    int gt_index = -1; // valid when positive

    bool positive() const { return state == State::Positive; }
    bool negative() const { return state == State::Negative; }
};

inline constexpr double kPositiveIou = 0.7;
inline constexpr double kNegativeIou = 0.3;

// IoU > 0.7 with some ground truth -> positive (against the argmax gt),
// max IoU < 0.3 -> negative, otherwise ignore. Additionally each gt's
// highest-IoU anchor is forced positive so no gt goes unmatched; ties
// break toward the lowest anchor index, and when two gts share a best
// anchor the later gt claims its next-best unclaimed one, so the
// one-positive-per-gt guarantee always holds.
inline std::vector<AnchorLabel> label_anchors(const std::vector<Box>& anchors,
                                              const std::vector<Box>& gt_boxes) {
    std::vector<AnchorLabel> labels(anchors.size());
    if (gt_boxes.empty()) return labels;
    if (anchors.size() < gt_boxes.size())
        throw ContractError("fewer anchors than ground-truth boxes");

    std::vector<std::vector<double>> overlap(gt_boxes.size(),
                                             std::vector<double>(anchors.size(), 0.0));
    std::vector<double> best_iou(anchors.size(), 0.0);
    std::vector<int> best_gt(anchors.size(), -1);
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
            double v = iou(anchors[a], gt_boxes[g]);
            overlap[g][a] = v;
            if (v > best_iou[a]) {
                best_iou[a] = v;
                best_gt[a] = static_cast<int>(g);
            }
        }
    }

    for (std::size_t a = 0; a < anchors.size(); ++a) {
        if (best_iou[a] > kPositiveIou)
            labels[a] = {AnchorLabel::State::Positive, best_gt[a]};
        else if (best_iou[a] < kNegativeIou)
            labels[a] = {AnchorLabel::State::Negative, -1};
        else
            labels[a] = {AnchorLabel::State::Ignore, -1};
    }

    std::vector<bool> claimed(anchors.size(), false);
    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
        int best = -1;
        for (std::size_t a = 0; a < anchors.size(); ++a) {
            if (claimed[a]) continue;
            if (best < 0 || overlap[g][a] > overlap[g][best]) best = static_cast<int>(a);
        }
        claimed[best] = true;
        labels[best] = {AnchorLabel::State::Positive, static_cast<int>(g)};
    }
    return labels;
}

enum class SpatialMode { FiveD, EightD };

// Normalized spatial descriptor of a box within the image.
//   FiveD:  [x1/W, y1/H, x2/W, y2/H, area/(W*H)]
//   EightD: [x1/W, y1/H, x2/W, y2/H, cx/W, cy/H, w/W, h/H]
inline std::vector<double> spatial_augment(const Box& box, double img_w, double img_h,
                                           SpatialMode mode) {
    Box b = clip_to_image(box, img_w, img_h);
    if (mode == SpatialMode::FiveD)
        return {b.x1() / img_w, b.y1() / img_h, b.x2() / img_w, b.y2() / img_h,
                b.area() / (img_w * img_h)};
    return {b.x1() / img_w, b.y1() / img_h, b.x2() / img_w, b.y2() / img_h,
            b.cx() / img_w, b.cy() / img_h, b.w() / img_w, b.h() / img_h};
}

inline constexpr int kSpatialDim = 5; // FiveD is the feature-vector default

} // namespace qrc
