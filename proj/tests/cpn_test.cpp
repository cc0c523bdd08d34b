#include <gtest/gtest.h>

#include <set>

#include "qrc/cpn.hpp"
#include "qrc/optim.hpp"

using namespace qrc;

namespace {

TrainConfig tiny_cfg() {
    TrainConfig cfg;
    cfg.d_q = 8;
    cfg.embed_dim = 6;
    cfg.m = 12;
    cfg.n_proposals = 4;
    cfg.top_k = 2;
    return cfg;
}

template <typename T>
ParamStore<T> cpn_params(const TrainConfig& cfg, std::uint64_t seed, bool zero = false) {
    ParamStore<T> p;
    Rng rng(seed);
    init_cpn_params(p, cfg, rng);
    if (zero)
        for (auto& e : p.entries())
            for (auto& v : e.value.data) v = T(0);
    return p;
}

template <typename T>
std::vector<Proposal<T>> proposals_at(const std::vector<Box>& boxes, int d_v) {
    std::vector<Proposal<T>> out;
    Rng rng(5);
    for (const auto& b : boxes) {
        Proposal<T> p;
        p.box = b;
        p.feature = Tensor<T>::zeros({1, d_v});
        for (auto& v : p.feature.data) v = static_cast<T>(rng.uniform(-1, 1));
        out.push_back(std::move(p));
    }
    return out;
}

// independent brute-force reward: recompute S_q and S_bg from raw boxes
// with plain loops, then evaluate the definition term by term
double reward_oracle(const std::vector<Box>& proposal_boxes, const std::vector<int>& top_k,
                     const Box& query_gt, const std::vector<Box>& mentioned, double beta, int k) {
    double total = 0;
    for (int i : top_k) {
        bool in_sq = iou(proposal_boxes[i], query_gt) > 0.5;
        bool in_sbg = true;
        for (const auto& g : mentioned)
            if (!(iou(proposal_boxes[i], g) < 0.5)) in_sbg = false;
        if (in_sq) total += 1.0;
        else if (!in_sbg) total += beta;
    }
    return total / k;
}

} // namespace

TEST(SelectTopK, FullRanking) {
    std::vector<double> p = {0.1, 0.6, 0.3};
    EXPECT_EQ(select_top_k(p, 3), (std::vector<int>{1, 2, 0}));
}

TEST(SelectTopK, TopTwo) {
    std::vector<double> p = {0.1, 0.6, 0.3};
    EXPECT_EQ(select_top_k(p, 2), (std::vector<int>{1, 2}));
}

TEST(SelectTopK, UniformTieBreaksByIndex) {
    std::vector<double> p = {0.25, 0.25, 0.25, 0.25};
    EXPECT_EQ(select_top_k(p, 2), (std::vector<int>{0, 1}));
}

TEST(SelectTopK, OverselectionThrows) {
    std::vector<double> p = {0.5, 0.5};
    EXPECT_THROW(select_top_k(p, 3), ContractError);
}

TEST(SampleTopK, DistinctDeterministicAndFollowsDistribution) {
    std::vector<double> p = {0.7, 0.2, 0.1};
    Rng a(9), b(9);
    auto s1 = sample_top_k(p, 2, a);
    auto s2 = sample_top_k(p, 2, b);
    EXPECT_EQ(s1, s2);
    std::set<int> uniq(s1.begin(), s1.end());
    EXPECT_EQ(uniq.size(), 2u);

    Rng rng(123);
    int first_is_argmax = 0;
    const int trials = 3000;
    for (int i = 0; i < trials; ++i)
        if (sample_top_k(p, 1, rng)[0] == 0) ++first_is_argmax;
    EXPECT_NEAR(first_is_argmax / static_cast<double>(trials), 0.7, 0.05);
}

TEST(PredictReward, ZeroParamsGiveHalf) {
    TrainConfig cfg = tiny_cfg();
    auto params = cpn_params<double>(cfg, 1, /*zero=*/true);
    Tape<double> t;
    ParamBinding<double> bind(t, params, {});
    Tensor<double> feats = Tensor<double>::full({4, cfg.d_v()}, 0.3);
    int q = t.constant(Tensor<double>::zeros({1, cfg.d_q}));
    int f = predict_reward(t, bind, feats, {0, 1}, q);
    EXPECT_NEAR(t.value(f).item(), 0.5, 1e-12);
}

TEST(PredictReward, StrictlyInsideUnitInterval) {
    TrainConfig cfg = tiny_cfg();
    auto params = cpn_params<double>(cfg, 2);
    for (auto& v : params["cpn.reward.w"].data) v *= 50.0; // exaggerate
    Tape<double> t;
    ParamBinding<double> bind(t, params, {});
    Rng rng(3);
    Tensor<double> feats = Tensor<double>::zeros({4, cfg.d_v()});
    for (auto& v : feats.data) v = rng.uniform(-5, 5);
    Tensor<double> qv = Tensor<double>::zeros({1, cfg.d_q});
    for (auto& v : qv.data) v = rng.uniform(-5, 5);
    int f = predict_reward(t, bind, feats, {0, 2, 3}, t.constant(qv));
    double val = t.value(f).item();
    EXPECT_GT(val, 0.0);
    EXPECT_LT(val, 1.0);
}

TEST(PredictReward, PermutingSelectionLeavesValueUnchanged) {
    TrainConfig cfg = tiny_cfg();
    auto params = cpn_params<double>(cfg, 4);
    Rng rng(6);
    Tensor<double> feats = Tensor<double>::zeros({4, cfg.d_v()});
    for (auto& v : feats.data) v = rng.uniform(-1, 1);
    Tensor<double> qv = Tensor<double>::zeros({1, cfg.d_q});
    for (auto& v : qv.data) v = rng.uniform(-1, 1);
    auto eval = [&](std::vector<int> sel) {
        Tape<double> t;
        ParamBinding<double> bind(t, params, {});
        return t.value(predict_reward(t, bind, feats, sel, t.constant(qv))).item();
    };
    EXPECT_NEAR(eval({0, 2, 3}), eval({3, 0, 2}), 1e-12);
}

TEST(PredictReward, EmptySelectionThrows) {
    TrainConfig cfg = tiny_cfg();
    auto params = cpn_params<double>(cfg, 5);
    Tape<double> t;
    ParamBinding<double> bind(t, params, {});
    Tensor<double> feats = Tensor<double>::zeros({4, cfg.d_v()});
    int q = t.constant(Tensor<double>::zeros({1, cfg.d_q}));
    EXPECT_THROW(predict_reward(t, bind, feats, {}, q), ContractError);
}

TEST(RewardFunction, AllInQuerySetGivesOne) {
    RewardContext ctx;
    ctx.s_q = {0, 1, 2};
    EXPECT_EQ(reward_function({0, 1}, ctx, 2, 0.2), 1.0);
}

TEST(RewardFunction, AllBackgroundGivesZero) {
    RewardContext ctx;
    ctx.s_bg = {0, 1, 2};
    EXPECT_EQ(reward_function({0, 1}, ctx, 2, 0.2), 0.0);
}

TEST(RewardFunction, WorkedExample) {
    // K=10: 4 in S_q, 2 in S_bg, 4 covering context objects, beta=0.2
    RewardContext ctx;
    ctx.s_q = {0, 1, 2, 3};
    ctx.s_bg = {4, 5};
    std::vector<int> top_k = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    EXPECT_NEAR(reward_function(top_k, ctx, 10, 0.2), 0.48, 1e-12);
}

TEST(RewardFunction, BoundedAndMaximalOnlyInsideQuerySet) {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        RewardContext ctx;
        int n = 8;
        for (int i = 0; i < n; ++i) {
            double u = rng.next_double();
            if (u < 0.3) ctx.s_q.insert(i);
            else if (u < 0.6) ctx.s_bg.insert(i);
        }
        std::vector<int> top_k;
        while (top_k.size() < 3) {
            int c = static_cast<int>(rng.uniform_int(n));
            if (std::find(top_k.begin(), top_k.end(), c) == top_k.end()) top_k.push_back(c);
        }
        double r = reward_function(top_k, ctx, 3, 0.2);
        EXPECT_GE(r, 0.0);
        EXPECT_LE(r, 1.0);
        bool all_sq = true;
        for (int i : top_k)
            if (!ctx.s_q.count(i)) all_sq = false;
        EXPECT_EQ(r == 1.0, all_sq);
    }
}

TEST(RewardFunction, MatchesBruteForceOracleOnRandomScenes) {
    Rng rng(11);
    TrainConfig cfg = tiny_cfg();
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<Box> boxes;
        int n = 6;
        for (int i = 0; i < n; ++i)
            boxes.push_back(Box(rng.uniform(15, 110), rng.uniform(15, 110), rng.uniform(8, 30),
                                rng.uniform(8, 30)));
        Box query_gt(rng.uniform(20, 100), rng.uniform(20, 100), 20, 22);
        std::vector<Box> mentioned = {query_gt,
                                      Box(rng.uniform(20, 100), rng.uniform(20, 100), 18, 16)};
        auto props = proposals_at<double>(boxes, cfg.d_v());
        for (std::size_t i = 0; i < boxes.size(); ++i) props[i].box = boxes[i];
        RewardContext ctx = build_reward_context(props, query_gt, mentioned);
        std::vector<int> top_k = {0, 2, 5};
        double fast = reward_function(top_k, ctx, 3, 0.2);
        double slow = reward_oracle(boxes, top_k, query_gt, mentioned, 0.2, 3);
        EXPECT_EQ(fast, slow);
    }
}

TEST(RewardLoss, ZeroWhenPredictionMatches) {
    Tape<double> t;
    int f = t.constant(Tensor<double>::scalar(0.37));
    EXPECT_NEAR(t.value(reward_loss(t, f, 0.37)).item(), 0.0, 1e-12);
}

TEST(RewardLoss, SquaredDifference) {
    Tape<double> t;
    int f = t.constant(Tensor<double>::scalar(0.6));
    EXPECT_NEAR(t.value(reward_loss(t, f, 0.48)).item(), 0.0144, 1e-9);
}

TEST(RewardLoss, SymmetricInSwap) {
    Tape<double> t;
    int f1 = t.constant(Tensor<double>::scalar(0.6));
    int f2 = t.constant(Tensor<double>::scalar(0.48));
    EXPECT_NEAR(t.value(reward_loss(t, f1, 0.48)).item(), t.value(reward_loss(t, f2, 0.6)).item(),
                1e-12);
}

TEST(PolicyTerm, ZeroScaleGivesZeroGradient) {
    Tape<double> t;
    int logits = t.leaf(Tensor<double>({1, 3}, {0.5, -0.2, 0.1}), true);
    int logp = t.log_softmax_rows(logits);
    auto grads = t.backward(policy_term(t, logp, {0, 1}, 0.0));
    if (grads[logits].numel() > 0)
        for (double v : grads[logits].data) EXPECT_EQ(v, 0.0);
}

TEST(PolicyTerm, SoftmaxLogGradIdentity) {
    // N=2, p=[0.7,0.3], K=1 on index 0, scale 0.5:
    // d(-0.5 log p0)/dz = -0.5 ([1,0] - p) = [-0.15, 0.15]
    Tape<double> t;
    Tensor<double> logits({1, 2}, {std::log(0.7), std::log(0.3)});
    int z = t.leaf(logits, true);
    int logp = t.log_softmax_rows(z);
    auto grads = t.backward(policy_term(t, logp, {0}, 0.5));
    EXPECT_NEAR(grads[z].data[0], -0.15, 1e-9);
    EXPECT_NEAR(grads[z].data[1], 0.15, 1e-9);
}

TEST(PolicyTerm, StepRaisesSelectedLogProbability) {
    // one Adam step in the policy direction raises sum of top-k log p
    ParamStore<double> params;
    params.add("qrn.logits", Tensor<double>({1, 3}, {0.2, -0.1, 0.05}));
    AdamState<double> opt;
    opt.lr = 1e-2;
    auto sum_topk_logp = [&](void) {
        Tape<double> t;
        int z = t.leaf(params["qrn.logits"], true);
        int logp = t.log_softmax_rows(z);
        return t.value(t.pick_sum(logp, {{0, 0}, {0, 2}})).item();
    };
    double before = sum_topk_logp();
    Tape<double> t;
    int z = t.leaf(params["qrn.logits"], true);
    int logp = t.log_softmax_rows(z);
    int loss = policy_term(t, logp, {0, 2}, 0.7);
    auto grads = t.backward(loss);
    GradMap<double> g{{"qrn.logits", grads[z]}};
    adam_step(params, g, opt);
    EXPECT_GT(sum_topk_logp(), before);
}
