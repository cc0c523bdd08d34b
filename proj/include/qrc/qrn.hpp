#pragma once

#include <optional>
#include <vector>

#include "qrc/config.hpp"
#include "qrc/geometry.hpp"
#include "qrc/nn.hpp"
#include "qrc/params.hpp"
#include "qrc/pgn.hpp"
#include "qrc/synthdata.hpp"

namespace qrc {

template <typename T>
void init_qrn_params(ParamStore<T>& params, const TrainConfig& cfg, Rng rng,
                            int vocab_size) {
    params.add("qrn.embed",
               init_params<T>({vocab_size, cfg.embed_dim}, InitScheme::FanScaledUniform, rng));
    params.add("qrn.lstm.w", init_params<T>({cfg.embed_dim + cfg.d_q, 4 * cfg.d_q},
                                                InitScheme::FanScaledUniform, rng));
    params.add("qrn.lstm.b", init_params<T>({1, 4 * cfg.d_q}, InitScheme::Zeros, rng));
    params.add("qrn.fuse.w",
               init_params<T>({cfg.d_q + cfg.d_v(), cfg.m}, InitScheme::FanScaledNormal, rng));
    params.add("qrn.fuse.b", init_params<T>({1, cfg.m}, InitScheme::Zeros, rng));
    params.add("qrn.bn.gamma", Tensor<T>::full({1, cfg.m}, T(1)));
    params.add("qrn.bn.beta", init_params<T>({1, cfg.m}, InitScheme::Zeros, rng));
    params.add("qrn.bn.running_mean", Tensor<T>::zeros({1, cfg.m}), /*trainable=*/false);
    params.add("qrn.bn.running_var", Tensor<T>::zeros({1, cfg.m}), /*trainable=*/false);
    params.add("qrn.head.w", init_params<T>({cfg.m, 5}, InitScheme::FanScaledUniform, rng));
    params.add("qrn.head.b", init_params<T>({1, 5}, InitScheme::Zeros, rng));
}

// Run the LSTM over the embedded tokens from a zero state and return the
// last hidden state (1 x d_q).
template <typename T>
int encode_query(Tape<T>& tape, ParamBinding<T>& bind, const std::vector<int>& tokens,
                 const TrainConfig& cfg, int vocab_size) {
    if (tokens.empty()) throw ContractError("cannot encode an empty query");
    if (static_cast<int>(tokens.size()) > cfg.max_query_len)
        throw ContractError("query longer than max_query_len");
    for (int t : tokens)
        if (t < 0 || t >= vocab_size) throw DataError("token id outside the closed vocabulary");

    int embed = bind("qrn.embed");
    int w = bind("qrn.lstm.w");
    int b = bind("qrn.lstm.b");
    int h = tape.constant(Tensor<T>::zeros({1, cfg.d_q}));
    int c = tape.constant(Tensor<T>::zeros({1, cfg.d_q}));
    for (int t : tokens) {
        int x_t = tape.gather_rows(embed, {t});
        auto hc = lstm_step(tape, x_t, h, c, w, b, cfg.d_q);
        h = hc.h;
        c = hc.c;
    }
    return h;
}

// Multimodal fusion for one (query, proposal-set) pair: broadcast q over
// the N proposal feature rows, concatenate, project to the m-dimensional
// subspace, standardize and apply ReLU. Returns N x m.
//
// Training fuses all batch items through one shared standardization; this
// helper exists for single-query evaluation and the op-level contract.
template <typename T>
int fuse_rows(Tape<T>& tape, ParamBinding<T>& bind, int q, int features, BnMode mode,
              RunningStats<T>& stats) {
    int n = tape.value(features).rows();
    int x = tape.concat_cols(tape.repeat_row(q, n), features);
    int pre = tape.linear(x, bind("qrn.fuse.w"), bind("qrn.fuse.b"));
    int bn = batch_standardize(tape, pre, bind("qrn.bn.gamma"), bind("qrn.bn.beta"), mode, stats);
    return tape.relu(bn);
}

// Per-proposal 5-D prediction head over fused features.
template <typename T>
struct QrnPrediction {
    int scores;   // N x 5: [relevance logit, 4 regression params]
    int logits;   // 1 x N relevance logits
    int log_prob; // 1 x N log-softmax over the proposal set
    int reg;      // N x 4
};

template <typename T>
QrnPrediction<T> predict(Tape<T>& tape, ParamBinding<T>& bind, int fused) {
    int n = tape.value(fused).rows();
    if (n == 0) throw ContractError("predict over an empty proposal set");
    int scores = tape.linear(fused, bind("qrn.head.w"), bind("qrn.head.b"));
    int logits = tape.reshape(tape.slice_cols(scores, 0, 1), {1, n});
    return {scores, logits, tape.log_softmax_rows(logits), tape.slice_cols(scores, 1, 5)};
}

template <typename T>
std::vector<double> proposal_probs(const Tape<T>& tape, int log_prob) {
    const Tensor<T>& lp = tape.value(log_prob);
    std::vector<double> p(lp.cols());
    for (int i = 0; i < lp.cols(); ++i) p[i] = std::exp(static_cast<double>(lp.at(0, i)));
    return p;
}

// The positive proposal: overlaps the query's box most, provided that
// overlap exceeds 0.5 IoU (strict); ties toward the lower index. Empty
// when no proposal qualifies -- the caller skips this query's
// classification and regression losses.
template <typename T>
std::optional<int> positive_proposal(const std::vector<Proposal<T>>& proposals, const Box& gt) {
    int best = -1;
    double best_iou = 0.5;
    for (std::size_t i = 0; i < proposals.size(); ++i) {
        double v = iou(proposals[i].box, gt);
        if (v > best_iou) {
            best_iou = v;
            best = static_cast<int>(i);
        }
    }
    if (best < 0) return std::nullopt;
    return best;
}

template <typename T>
int cls_loss(Tape<T>& tape, int log_prob, int positive_index) {
    return tape.scale(tape.pick_sum(log_prob, {{0, positive_index}}), -1.0);
}

// Regression targets: each proposal encodes the query's box against itself.
template <typename T>
Tensor<T> regression_targets(const std::vector<Proposal<T>>& proposals, const Box& gt) {
    Tensor<T> out = Tensor<T>::zeros({static_cast<int>(proposals.size()), 4});
    for (std::size_t i = 0; i < proposals.size(); ++i) {
        RegressionCode t = encode_regression(proposals[i].box, gt);
        for (int j = 0; j < 4; ++j) out.at(static_cast<int>(i), j) = static_cast<T>(t[j]);
    }
    return out;
}

// Smooth-L1 over regression offsets, averaged over all N proposals (the
// positive_only variant restricts to proposals overlapping the target
// above 0.5 IoU and averages over those).
template <typename T>
int reg_loss(Tape<T>& tape, int reg, const std::vector<Proposal<T>>& proposals, const Box& gt,
             bool positive_only = false) {
    Tensor<T> targets = regression_targets(proposals, gt);
    int pred = reg;
    if (positive_only) {
        std::vector<int> rows;
        for (std::size_t i = 0; i < proposals.size(); ++i)
            if (iou(proposals[i].box, gt) > 0.5) rows.push_back(static_cast<int>(i));
        if (rows.empty()) return tape.constant(Tensor<T>::scalar(T(0)));
        Tensor<T> sel = Tensor<T>::zeros({static_cast<int>(rows.size()), 4});
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (int j = 0; j < 4; ++j) sel.at(static_cast<int>(i), j) = targets.at(rows[i], j);
        targets = std::move(sel);
        pred = tape.gather_rows(reg, rows);
    }
    int n = tape.value(pred).rows();
    int diff = tape.sub(pred, tape.constant(std::move(targets)));
    return tape.scale(tape.sum(tape.smooth_l1(diff)), 1.0 / (4.0 * n));
}

// Final grounding decision: the most relevant proposal, regressed by its
// own predicted offsets and clipped to the image.
template <typename T>
Box ground(const std::vector<Proposal<T>>& proposals, const std::vector<double>& probs,
           const Tensor<T>& reg_values, double img_w, double img_h, bool apply_regression = true) {
    if (proposals.empty()) throw ContractError("ground over an empty proposal set");
    int best = 0;
    for (std::size_t i = 1; i < proposals.size(); ++i)
        if (probs[i] > probs[best]) best = static_cast<int>(i);
    if (!apply_regression) return clip_to_image(proposals[best].box, img_w, img_h);
    RegressionCode t = {
        static_cast<double>(reg_values.at(best, 0)), static_cast<double>(reg_values.at(best, 1)),
        static_cast<double>(reg_values.at(best, 2)), static_cast<double>(reg_values.at(best, 3))};
    return clip_to_image(decode_regression(proposals[best].box, t), img_w, img_h);
}

} // namespace qrc
