#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "qrc/config.hpp"
#include "qrc/geometry.hpp"
#include "qrc/nn.hpp"
#include "qrc/params.hpp"
#include "qrc/pgn.hpp"

namespace qrc {

template <typename T>
void init_cpn_params(ParamStore<T>& params, const TrainConfig& cfg, Rng rng) {
    params.add("cpn.reward.w",
               init_params<T>({cfg.d_v() + cfg.d_q, 1}, InitScheme::FanScaledUniform, rng));
    params.add("cpn.reward.b", init_params<T>({1, 1}, InitScheme::Zeros, rng));
}

// Rank-based selection: the K most relevant proposals, descending
// probability, ties toward the lower index.
inline std::vector<int> select_top_k(const std::vector<double>& probs, int k) {
    return top_indices(probs, k);
}

// Sampled selection: K distinct proposals drawn from the relevance
// distribution via the Gumbel trick (key = log p + Gumbel noise, take the
// K largest keys). Sampling keeps low-ranked proposals reachable, which
// the score-function update needs in order to re-rank them.
inline std::vector<int> sample_top_k(const std::vector<double>& probs, int k, Rng& rng) {
    if (k > static_cast<int>(probs.size())) throw ContractError("selection larger than candidate set");
    std::vector<double> keys(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
        double u = std::max(rng.next_double(), 1e-300);
        keys[i] = std::log(std::max(probs[i], 1e-30)) - std::log(-std::log(u));
    }
    return top_indices(keys, k);
}

// The context structure behind the reward: proposals overlapping the
// query's object (S_q) and proposals overlapping no mentioned object at
// all (S_bg). Everything else overlaps some context object.
struct RewardContext {
    std::set<int> s_q;
    std::set<int> s_bg;
};

template <typename T>
RewardContext build_reward_context(const std::vector<Proposal<T>>& proposals, const Box& query_gt,
                                   const std::vector<Box>& mentioned_gts) {
    RewardContext ctx;
    for (std::size_t i = 0; i < proposals.size(); ++i) {
        if (iou(proposals[i].box, query_gt) > 0.5) ctx.s_q.insert(static_cast<int>(i));
        bool background = true;
        for (const Box& g : mentioned_gts)
            if (iou(proposals[i].box, g) >= 0.5) background = false;
        if (background) ctx.s_bg.insert(static_cast<int>(i));
    }
    return ctx;
}

// R = (1/K) sum_i [ d(i in S_q) + beta * d(i not in S_q u S_bg) ]
inline double reward_function(const std::vector<int>& top_k, const RewardContext& ctx, int k,
                              double beta) {
    double r = 0.0;
    for (int i : top_k) {
        if (ctx.s_q.count(i)) r += 1.0;
        else if (!ctx.s_bg.count(i)) r += beta;
    }
    return r / k;
}

// Predicted reward F = sigma(W_c (v_c || q) + b_c) in (0,1). v_c is the
// mean of the selected proposals' visual features; q is fed in detached,
// so gradients reach only the reward head.
template <typename T>
int predict_reward(Tape<T>& tape, ParamBinding<T>& bind, const Tensor<T>& features,
                   const std::vector<int>& top_k, int q_detached) {
    if (top_k.empty()) throw ContractError("predict_reward over an empty selection");
    Tensor<T> v_c = Tensor<T>::zeros({1, features.cols()});
    for (int i : top_k)
        for (int c = 0; c < features.cols(); ++c) v_c.at(0, c) += features.at(i, c);
    for (auto& v : v_c.data) v /= static_cast<T>(top_k.size());
    int x = tape.concat_cols(tape.constant(std::move(v_c)), q_detached);
    return tape.sigmoid(tape.linear(x, bind("cpn.reward.w"), bind("cpn.reward.b")));
}

// L_rwd = (F - R)^2; R is a constant of the environment.
template <typename T>
int reward_loss(Tape<T>& tape, int f, double r) {
    int d = tape.add_const(f, -r);
    return tape.mul(d, d);
}

// Score-function term for the selected set: -scale * sum_i log p_i, where
// scale is the (detached) predicted reward. Minimizing it maximizes the
// expected reward; gradients flow only through the relevance log-probs.
template <typename T>
int policy_term(Tape<T>& tape, int log_prob, const std::vector<int>& top_k, double scale) {
    std::vector<std::pair<int, int>> picks;
    picks.reserve(top_k.size());
    for (int i : top_k) picks.emplace_back(0, i);
    return tape.scale(tape.pick_sum(log_prob, picks), -scale);
}

} // namespace qrc
