#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "qrc/config.hpp"
#include "qrc/geometry.hpp"
#include "qrc/nn.hpp"
#include "qrc/params.hpp"
#include "qrc/rng.hpp"
#include "qrc/synthdata.hpp"
#include "qrc/tape.hpp"

namespace qrc {

// Candidate region handed to the query network.
template <typename T>
struct Proposal {
    Box box;
    double objectness = 0.0;
    int anchor_index = -1;
    Tensor<T> feature; // 1 x d_v: 2x2 pooled grid features + 5-D spatial tail
};

// Average the grid cells under each quadrant of the box, weighting by
// overlap area. Boxes thinner than one cell are snapped to a one-cell
// minimum around their center before pooling.
template <typename T>
Tensor<T> roi_pool(const FeatureGrid<T>& grid, const Box& box) {
    double s = grid.stride;
    double w = std::max(box.w(), s);
    double h = std::max(box.h(), s);
    double x1 = box.cx() - w / 2, y1 = box.cy() - h / 2;

    Tensor<T> out = Tensor<T>::zeros({1, 4 * grid.d});
    for (int sub = 0; sub < 4; ++sub) {
        int sx = sub % 2, sy = sub / 2;
        double bx1 = x1 + sx * w / 2, bx2 = x1 + (sx + 1) * w / 2;
        double by1 = y1 + sy * h / 2, by2 = y1 + (sy + 1) * h / 2;

        int gx0 = std::max(0, static_cast<int>(std::floor(bx1 / s)));
        int gx1 = std::min(grid.grid_w - 1, static_cast<int>(std::ceil(bx2 / s)) - 1);
        int gy0 = std::max(0, static_cast<int>(std::floor(by1 / s)));
        int gy1 = std::min(grid.grid_h - 1, static_cast<int>(std::ceil(by2 / s)) - 1);

        double total = 0.0;
        std::vector<double> acc(grid.d, 0.0);
        for (int gy = gy0; gy <= gy1; ++gy)
            for (int gx = gx0; gx <= gx1; ++gx) {
                double ix = std::min(bx2, (gx + 1) * s) - std::max(bx1, gx * s);
                double iy = std::min(by2, (gy + 1) * s) - std::max(by1, gy * s);
                if (ix <= 0 || iy <= 0) continue;
                double a = ix * iy;
                total += a;
                int row = grid.cell_index(gy, gx);
                for (int c = 0; c < grid.d; ++c) acc[c] += a * grid.cells.at(row, c);
            }
        if (total > 0)
            for (int c = 0; c < grid.d; ++c)
                out.at(0, sub * grid.d + c) = static_cast<T>(acc[c] / total);
    }
    return out;
}

template <typename T>
Tensor<T> proposal_feature(const FeatureGrid<T>& grid, const Box& box, double img_w, double img_h) {
    Tensor<T> pooled = roi_pool(grid, box);
    Tensor<T> out = Tensor<T>::zeros({1, 4 * grid.d + kSpatialDim});
    std::copy(pooled.data.begin(), pooled.data.end(), out.data.begin());
    auto sp = spatial_augment(box, img_w, img_h, SpatialMode::FiveD);
    for (int i = 0; i < kSpatialDim; ++i) out.at(0, 4 * grid.d + i) = static_cast<T>(sp[i]);
    return out;
}

template <typename T>
void init_pgn_params(ParamStore<T>& params, const TrainConfig& cfg, Rng rng) {
    int apc = cfg.anchors_per_cell();
    params.add("pgn.trunk.w",
               init_params<T>({9 * cfg.d_feat, cfg.pgn_hidden}, InitScheme::FanScaledNormal, rng));
    params.add("pgn.trunk.b", init_params<T>({1, cfg.pgn_hidden}, InitScheme::Zeros, rng));
    params.add("pgn.obj.w",
               init_params<T>({cfg.pgn_hidden, apc * 2}, InitScheme::FanScaledUniform, rng));
    params.add("pgn.obj.b", init_params<T>({1, apc * 2}, InitScheme::Zeros, rng));
    params.add("pgn.reg.w",
               init_params<T>({cfg.pgn_hidden, apc * 4}, InitScheme::FanScaledUniform, rng));
    params.add("pgn.reg.b", init_params<T>({1, apc * 4}, InitScheme::Zeros, rng));
}

// Each anchor's trunk input is its cell's 3x3 neighborhood patch
// (zero-padded at the borders); a lone cell cannot tell an object's center
// from its rim, the surrounding pattern can. Gradients never flow into the
// grid, so the patch matrix is assembled outside the tape.
template <typename T>
Tensor<T> neighborhood_patches(const FeatureGrid<T>& grid) {
    int cells = grid.grid_h * grid.grid_w;
    Tensor<T> out = Tensor<T>::zeros({cells, 9 * grid.d});
    for (int gy = 0; gy < grid.grid_h; ++gy)
        for (int gx = 0; gx < grid.grid_w; ++gx) {
            int row = grid.cell_index(gy, gx);
            int slot = 0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx, ++slot) {
                    int ny = gy + dy, nx = gx + dx;
                    if (ny < 0 || ny >= grid.grid_h || nx < 0 || nx >= grid.grid_w) continue;
                    int src = grid.cell_index(ny, nx);
                    for (int c = 0; c < grid.d; ++c)
                        out.at(row, slot * grid.d + c) = grid.cells.at(src, c);
                }
        }
    return out;
}

// Per-anchor outputs of the proposal head. Anchor order matches
// generate_anchors (row-major cell, then scale, then ratio).
template <typename T>
struct PgnForward {
    int obj_logits;   // A x 2 (background, object)
    int obj_log_prob; // A x 2 row-wise log-softmax
    int reg;          // A x 4
};

template <typename T>
PgnForward<T> pgn_forward(Tape<T>& tape, ParamBinding<T>& bind, const FeatureGrid<T>& grid,
                          const TrainConfig& cfg) {
    int apc = cfg.anchors_per_cell();
    int cells = cfg.grid * cfg.grid;
    if (grid.cells.rows() != cells || grid.cells.cols() != cfg.d_feat)
        throw DimensionError("pgn_forward grid shape mismatch");
    int patches = tape.constant(neighborhood_patches(grid));
    int hidden = tape.relu(tape.linear(patches, bind("pgn.trunk.w"), bind("pgn.trunk.b")));
    int obj = tape.linear(hidden, bind("pgn.obj.w"), bind("pgn.obj.b"));
    int reg = tape.linear(hidden, bind("pgn.reg.w"), bind("pgn.reg.b"));
    // (cells x apc*k) rows flatten to anchor index = cell * apc + slot
    int obj2 = tape.reshape(obj, {cells * apc, 2});
    int reg4 = tape.reshape(reg, {cells * apc, 4});
    return {obj2, tape.log_softmax_rows(obj2), reg4};
}

// Batched variant: all grids of a batch run through one trunk/head chain.
// Anchor rows of item b occupy [b*A, (b+1)*A).
template <typename T>
struct PgnBatchForward {
    int obj_log_prob = -1; // (B*A) x 2
    int reg = -1;          // (B*A) x 4
    int anchors_per_item = 0;
};

template <typename T>
PgnBatchForward<T> pgn_forward_batched(Tape<T>& tape, ParamBinding<T>& bind,
                                       const std::vector<const FeatureGrid<T>*>& grids,
                                       const TrainConfig& cfg) {
    int apc = cfg.anchors_per_cell();
    int cells = cfg.grid * cfg.grid;
    int b_count = static_cast<int>(grids.size());
    if (b_count == 0) throw ContractError("batched proposal forward over no grids");
    Tensor<T> patches = Tensor<T>::zeros({b_count * cells, 9 * cfg.d_feat});
    for (int b = 0; b < b_count; ++b) {
        if (grids[b]->cells.rows() != cells || grids[b]->cells.cols() != cfg.d_feat)
            throw DimensionError("pgn_forward grid shape mismatch");
        Tensor<T> p = neighborhood_patches(*grids[b]);
        std::copy(p.data.begin(), p.data.end(),
                  patches.data.begin() + static_cast<std::ptrdiff_t>(b) * cells * 9 * cfg.d_feat);
    }
    int hidden = tape.relu(tape.linear(tape.constant(std::move(patches)), bind("pgn.trunk.w"),
                                       bind("pgn.trunk.b")));
    int obj = tape.linear(hidden, bind("pgn.obj.w"), bind("pgn.obj.b"));
    int reg = tape.linear(hidden, bind("pgn.reg.w"), bind("pgn.reg.b"));
    int obj2 = tape.reshape(obj, {b_count * cells * apc, 2});
    int reg4 = tape.reshape(reg, {b_count * cells * apc, 4});
    return {tape.log_softmax_rows(obj2), reg4, cells * apc};
}

// Objectness probability per anchor, read out of the forward pass.
template <typename T>
std::vector<double> objectness_probs(const Tape<T>& tape, const PgnForward<T>& fwd) {
    const Tensor<T>& logp = tape.value(fwd.obj_log_prob);
    std::vector<double> p(logp.rows());
    for (int a = 0; a < logp.rows(); ++a) p[a] = std::exp(static_cast<double>(logp.at(a, 1)));
    return p;
}

struct AnchorSample {
    std::vector<int> positives; // sampled positive anchor indices
    std::vector<int> negatives; // sampled negative anchor indices
};

// Up to 128 positives, padded with negatives to 256 sampled anchors.
inline AnchorSample sample_anchors(const std::vector<AnchorLabel>& labels, Rng& rng,
                                   int max_per_class = 128) {
    AnchorSample s;
    std::vector<int> pos, neg;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i].positive()) pos.push_back(static_cast<int>(i));
        else if (labels[i].negative()) neg.push_back(static_cast<int>(i));
    }
    auto take = [&rng](std::vector<int>& from, int count) {
        std::vector<int> out;
        if (static_cast<int>(from.size()) <= count) return from;
        for (int i = 0; i < count; ++i) {
            std::size_t j = i + rng.uniform_int(from.size() - i);
            std::swap(from[i], from[j]);
            out.push_back(from[i]);
        }
        std::sort(out.begin(), out.end());
        return out;
    };
    s.positives = take(pos, max_per_class);
    int neg_quota = 2 * max_per_class - static_cast<int>(s.positives.size());
    s.negatives = take(neg, neg_quota);
    if (s.positives.empty() && s.negatives.empty())
        throw DegenerateBatchError("no anchors to sample for the generation loss");
    return s;
}

// Generation loss: cross-entropy over the sampled anchors plus smooth-L1
// on the positive anchors' offsets, normalized by the full anchor count.
template <typename T>
int gen_loss(Tape<T>& tape, const PgnForward<T>& fwd, const AnchorSample& sample,
             const std::vector<AnchorLabel>& labels, const std::vector<Box>& anchors,
             const std::vector<Box>& gt_boxes, double lambda_g) {
    std::vector<std::pair<int, int>> picks;
    for (int a : sample.positives) picks.emplace_back(a, 1);
    for (int a : sample.negatives) picks.emplace_back(a, 0);
    int n_cls = static_cast<int>(picks.size());
    int cls_term = tape.scale(tape.pick_sum(fwd.obj_log_prob, picks), -1.0 / n_cls);

    if (sample.positives.empty()) return cls_term;

    int n_reg = tape.value(fwd.reg).rows(); // all anchors
    Tensor<T> targets = Tensor<T>::zeros({static_cast<int>(sample.positives.size()), 4});
    for (std::size_t i = 0; i < sample.positives.size(); ++i) {
        int a = sample.positives[i];
        RegressionCode t = encode_regression(anchors[a], gt_boxes[labels[a].gt_index]);
        for (int j = 0; j < 4; ++j) targets.at(static_cast<int>(i), j) = static_cast<T>(t[j]);
    }
    int pred = tape.gather_rows(fwd.reg, sample.positives);
    int diff = tape.sub(pred, tape.constant(std::move(targets)));
    int reg_term = tape.scale(tape.sum(tape.smooth_l1(diff)), lambda_g / n_reg);
    return tape.add(cls_term, reg_term);
}

// Indices of the top-n anchors by objectness, descending, ties toward the
// lower anchor index.
inline std::vector<int> top_indices(const std::vector<double>& score, int n) {
    if (n > static_cast<int>(score.size())) throw ContractError("selection larger than candidate set");
    std::vector<int> order(score.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return score[a] > score[b]; });
    order.resize(n);
    return order;
}

template <typename T>
std::vector<Proposal<T>> select_top_proposals(const std::vector<double>& obj_prob,
                                              const Tensor<T>& reg, const std::vector<Box>& anchors,
                                              int n, const FeatureGrid<T>& grid, double img_w,
                                              double img_h, int reg_row_offset = 0) {
    std::vector<Proposal<T>> out;
    out.reserve(n);
    for (int a : top_indices(obj_prob, n)) {
        int r = reg_row_offset + a;
        RegressionCode t = {static_cast<double>(reg.at(r, 0)), static_cast<double>(reg.at(r, 1)),
                            static_cast<double>(reg.at(r, 2)), static_cast<double>(reg.at(r, 3))};
        Box box = clip_to_image(decode_regression(anchors[a], t), img_w, img_h);
        Proposal<T> p;
        p.box = box;
        p.objectness = obj_prob[a];
        p.anchor_index = a;
        p.feature = proposal_feature(grid, box, img_w, img_h);
        out.push_back(std::move(p));
    }
    return out;
}

// N x d_v matrix of proposal features, one row per proposal.
template <typename T>
Tensor<T> feature_matrix(const std::vector<Proposal<T>>& proposals) {
    if (proposals.empty()) throw ContractError("feature_matrix of empty proposal set");
    int d = proposals[0].feature.cols();
    Tensor<T> out = Tensor<T>::zeros({static_cast<int>(proposals.size()), d});
    for (std::size_t i = 0; i < proposals.size(); ++i)
        for (int c = 0; c < d; ++c) out.at(static_cast<int>(i), c) = proposals[i].feature.at(0, c);
    return out;
}

} // namespace qrc
