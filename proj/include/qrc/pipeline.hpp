#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "qrc/checkpoint.hpp"
#include "qrc/config.hpp"
#include "qrc/cpn.hpp"
#include "qrc/metrics.hpp"
#include "qrc/optim.hpp"
#include "qrc/pgn.hpp"
#include "qrc/qrn.hpp"
#include "qrc/synthdata.hpp"

namespace qrc {

template <typename T = float>
struct TrainState {
    TrainConfig cfg;
    Vocab vocab;
    std::vector<Box> anchors;
    ParamStore<T> params;
    AdamState<T> opt_pgn, opt_qrn, opt_cpn;
    long epoch = 0;
    long step = 0;
    long skipped_queries = 0;
    long nan_steps = 0;
    Rng sample_rng; // anchor sampling, batch order, top-K sampling

    RunningStats<T> bn_stats_view() const {
        return {params["qrn.bn.running_mean"], params["qrn.bn.running_var"]};
    }
    void store_bn_stats(const RunningStats<T>& s) {
        params["qrn.bn.running_mean"] = s.mean;
        params["qrn.bn.running_var"] = s.var;
    }
};

template <typename T = float>
TrainState<T> build_state(const TrainConfig& cfg) {
    cfg.validate();
    TrainState<T> st;
    st.cfg = cfg;
    st.anchors = generate_anchors(cfg.grid, cfg.grid, cfg.stride(), cfg.scales, cfg.ratios);
    Rng init = Rng(cfg.seed).split("init");
    init_pgn_params(st.params, cfg, init.split("pgn"));
    init_qrn_params(st.params, cfg, init.split("qrn"), st.vocab.size());
    init_cpn_params(st.params, cfg, init.split("cpn"));
    st.opt_pgn.lr = st.opt_qrn.lr = st.opt_cpn.lr = cfg.lr;
    st.sample_rng = Rng(cfg.seed).split("sampling");
    return st;
}

// What one training phase trains and computes.
struct PhaseOpts {
    std::string name;
    std::vector<std::string> live; // parameter-name prefixes being trained
    bool pgn_loss = false;         // generation loss on the tape
    bool qrn_loss = false;         // classification/regression losses
    bool cpn_on = false;           // reward prediction + policy term
};

inline PhaseOpts phase_opts(char phase, const TrainConfig& cfg) {
    PhaseOpts o;
    o.name = std::string(1, phase);
    bool pgn_trainable = !cfg.pgn_frozen_at_init;
    switch (phase) {
        case 'A':
            o.live = {"pgn."};
            o.pgn_loss = true;
            break;
        case 'B':
            o.live = {"qrn."};
            o.qrn_loss = true;
            o.cpn_on = !cfg.disable_cpn;
            if (o.cpn_on) o.live.push_back("cpn.");
            break;
        case 'C':
            o.live = {"qrn."};
            o.qrn_loss = true;
            o.cpn_on = !cfg.disable_cpn;
            if (o.cpn_on) o.live.push_back("cpn.");
            if (pgn_trainable && cfg.pgn_joint) {
                o.live.push_back("pgn.");
                o.pgn_loss = true;
            }
            break;
        default:
            throw ContractError("unknown phase");
    }
    return o;
}

using BatchItem = std::pair<const GroundingExample*, int>; // example, phrase index

// Everything non-differentiable about one batch item, fixed before the
// tape is built: the feature grid, anchor labels and samples, the selected
// proposals with their features, the positive proposal and reward context.
template <typename T>
struct ItemPlan {
    const GroundingExample* ex = nullptr;
    const Phrase* phrase = nullptr;
    FeatureGrid<T> grid;
    std::vector<Box> mentioned;
    std::vector<AnchorLabel> labels;
    AnchorSample anchor_sample;
    std::vector<Proposal<T>> proposals;
    Tensor<T> features; // N x d_v
    std::optional<int> positive;
    RewardContext ctx;
};

template <typename T>
struct BatchPlan {
    PhaseOpts opts;
    const std::vector<Box>* anchors = nullptr;
    int vocab_size = 0;
    double gen_value = 0.0; // logged generation loss when it is off-tape
    std::vector<ItemPlan<T>> items;
};

// Mean generation loss for the whole batch on one tape, built from the
// batched forward's global anchor rows.
template <typename T>
int gen_loss_batched(Tape<T>& tape, const PgnBatchForward<T>& fwd, const BatchPlan<T>& plan,
                     double lambda_g) {
    int a_per = fwd.anchors_per_item;
    int b_count = static_cast<int>(plan.items.size());
    std::vector<int> cls_terms;
    std::vector<int> pos_rows;
    std::vector<T> target_data;
    for (int i = 0; i < b_count; ++i) {
        const auto& item = plan.items[i];
        int off = i * a_per;
        std::vector<std::pair<int, int>> picks;
        for (int a : item.anchor_sample.positives) picks.emplace_back(off + a, 1);
        for (int a : item.anchor_sample.negatives) picks.emplace_back(off + a, 0);
        cls_terms.push_back(tape.scale(tape.pick_sum(fwd.obj_log_prob, picks),
                                       -1.0 / static_cast<double>(picks.size())));
        for (int a : item.anchor_sample.positives) {
            pos_rows.push_back(off + a);
            RegressionCode t =
                encode_regression((*plan.anchors)[a], item.mentioned[item.labels[a].gt_index]);
            for (int j = 0; j < 4; ++j) target_data.push_back(static_cast<T>(t[j]));
        }
    }
    int loss = tape.scale(tape.add_n(cls_terms), 1.0 / b_count);
    if (!pos_rows.empty()) {
        Tensor<T> targets({static_cast<int>(pos_rows.size()), 4}, std::move(target_data));
        int diff = tape.sub(tape.gather_rows(fwd.reg, pos_rows), tape.constant(std::move(targets)));
        int reg_term = tape.scale(tape.sum(tape.smooth_l1(diff)),
                                  lambda_g / (static_cast<double>(a_per) * b_count));
        loss = tape.add(loss, reg_term);
    }
    return loss;
}

template <typename T>
BatchPlan<T> prepare_batch(TrainState<T>& state, const std::vector<BatchItem>& batch,
                           const PhaseOpts& opts) {
    const TrainConfig& cfg = state.cfg;
    BatchPlan<T> plan;
    plan.opts = opts;
    plan.anchors = &state.anchors;
    plan.vocab_size = state.vocab.size();
    plan.items.reserve(batch.size());
    bool need_proposals = opts.qrn_loss || opts.cpn_on;

    for (const auto& [ex, phrase_idx] : batch) {
        ItemPlan<T> item;
        item.ex = ex;
        item.phrase = &ex->phrases[phrase_idx];
        item.grid = featurize<T>(ex->scene, cfg.stride());
        for (const auto& p : ex->phrases) item.mentioned.push_back(p.gt_box);
        item.labels = label_anchors(state.anchors, item.mentioned);
        item.anchor_sample = sample_anchors(item.labels, state.sample_rng);
        plan.items.push_back(std::move(item));
    }

    if (need_proposals) {
        // value-only batched forward to select proposals (and log L_gen)
        Tape<T> scratch;
        ParamBinding<T> bind(scratch, state.params, {});
        std::vector<const FeatureGrid<T>*> grids;
        for (const auto& item : plan.items) grids.push_back(&item.grid);
        auto fwd = pgn_forward_batched(scratch, bind, grids, cfg);
        const Tensor<T>& logp = scratch.value(fwd.obj_log_prob);
        const Tensor<T>& regv = scratch.value(fwd.reg);
        int a_per = fwd.anchors_per_item;
        for (std::size_t i = 0; i < plan.items.size(); ++i) {
            auto& item = plan.items[i];
            int off = static_cast<int>(i) * a_per;
            std::vector<double> probs(a_per);
            for (int a = 0; a < a_per; ++a)
                probs[a] = std::exp(static_cast<double>(logp.at(off + a, 1)));
            item.proposals = select_top_proposals(probs, regv, state.anchors, cfg.n_proposals,
                                                  item.grid, cfg.image_size, cfg.image_size, off);
            item.features = feature_matrix(item.proposals);
            item.positive = positive_proposal(item.proposals, item.phrase->gt_box);
            item.ctx = build_reward_context(item.proposals, item.phrase->gt_box, item.mentioned);
        }
        plan.gen_value =
            static_cast<double>(scratch.value(gen_loss_batched(scratch, fwd, plan, cfg.lambda_g)).item());
    }
    return plan;
}

// Values captured at a base point so a finite-difference probe sees the
// same function the tape differentiates: the selected top-K sets, the
// query encodings fed (detached) to the reward head, and the policy
// scale factors.
template <typename T>
struct ForwardPins {
    std::vector<std::vector<int>> top_k;
    std::vector<Tensor<T>> q_values;
    std::vector<double> scales;
};

template <typename T>
struct LossNodes {
    int total = -1;
    int l_gen = -1, l_cls = -1, l_reg = -1, l_rwd = -1, policy = -1;
    double l_gen_value = 0; // always available, even when off-tape
    int skipped = 0;
    bool have_bn = false;
    Tensor<T> bn_mean, bn_var; // pending running-stat update (train mode)
    double f_mean = 0, r_mean = 0;
};

template <typename T>
LossNodes<T> forward_losses(Tape<T>& tape, ParamBinding<T>& bind, const BatchPlan<T>& plan,
                            const TrainConfig& cfg, BnMode bn_mode, RunningStats<T>& bn_stats,
                            Rng* sample_rng, ForwardPins<T>* capture = nullptr,
                            const ForwardPins<T>* pins = nullptr) {
    LossNodes<T> out;
    const int B = static_cast<int>(plan.items.size());
    const PhaseOpts& opts = plan.opts;

    // generation loss
    if (opts.pgn_loss) {
        std::vector<const FeatureGrid<T>*> grids;
        for (const auto& item : plan.items) grids.push_back(&item.grid);
        auto fwd = pgn_forward_batched(tape, bind, grids, cfg);
        out.l_gen = gen_loss_batched(tape, fwd, plan, cfg.lambda_g);
        out.l_gen_value = static_cast<double>(tape.value(out.l_gen).item());
    } else {
        out.l_gen_value = plan.gen_value;
    }

    if (!opts.qrn_loss && !opts.cpn_on) {
        out.total = out.l_gen;
        return out;
    }

    // query encodings, LSTM-stepped in lockstep groups of equal token count
    std::vector<int> q_nodes(B, -1);
    {
        std::map<int, std::vector<int>> by_len;
        for (int i = 0; i < B; ++i) {
            const auto& tokens = plan.items[i].phrase->tokens;
            if (tokens.empty()) throw ContractError("cannot encode an empty query");
            if (static_cast<int>(tokens.size()) > cfg.max_query_len)
                throw ContractError("query longer than max_query_len");
            for (int t : tokens)
                if (t < 0 || t >= plan.vocab_size)
                    throw DataError("token id outside the closed vocabulary");
            by_len[static_cast<int>(tokens.size())].push_back(i);
        }
        int embed = bind("qrn.embed");
        int w = bind("qrn.lstm.w");
        int b = bind("qrn.lstm.b");
        for (const auto& [len, group] : by_len) {
            int g_count = static_cast<int>(group.size());
            int h = tape.constant(Tensor<T>::zeros({g_count, cfg.d_q}));
            int c = tape.constant(Tensor<T>::zeros({g_count, cfg.d_q}));
            for (int t = 0; t < len; ++t) {
                std::vector<int> rows;
                rows.reserve(group.size());
                for (int i : group) rows.push_back(plan.items[i].phrase->tokens[t]);
                auto hc = lstm_step(tape, tape.gather_rows(embed, rows), h, c, w, b, cfg.d_q);
                h = hc.h;
                c = hc.c;
            }
            for (int gi = 0; gi < g_count; ++gi)
                q_nodes[group[gi]] = tape.slice_rows(h, gi, gi + 1);
        }
    }

    // fused feature rows, one block per item
    std::vector<int> blocks;
    for (int i = 0; i < B; ++i) {
        const auto& item = plan.items[i];
        int v = tape.constant(item.features);
        blocks.push_back(tape.concat_cols(tape.repeat_row(q_nodes[i], item.features.rows()), v));
    }
    int x = tape.vstack(blocks);
    int pre = tape.linear(x, bind("qrn.fuse.w"), bind("qrn.fuse.b"));
    int bn = tape.batch_norm(pre, bind("qrn.bn.gamma"), bind("qrn.bn.beta"), bn_mode,
                             bn_stats.mean, bn_stats.var, kBnEps,
                             bn_mode == BnMode::Train ? &out.bn_mean : nullptr,
                             bn_mode == BnMode::Train ? &out.bn_var : nullptr);
    out.have_bn = bn_mode == BnMode::Train;
    int fused = tape.relu(bn);
    int scores = tape.linear(fused, bind("qrn.head.w"), bind("qrn.head.b"));

    std::vector<int> cls_nodes, reg_nodes, rwd_nodes, policy_nodes;
    if (capture) {
        capture->top_k.clear();
        capture->q_values.clear();
        capture->scales.clear();
    }
    int offset = 0;
    double f_sum = 0, r_sum = 0;
    int cpn_items = 0;
    for (int i = 0; i < B; ++i) {
        const auto& item = plan.items[i];
        int n = item.features.rows();
        int s_i = tape.slice_rows(scores, offset, offset + n);
        offset += n;
        int logits = tape.reshape(tape.slice_cols(s_i, 0, 1), {1, n});
        int logp = tape.log_softmax_rows(logits);
        int reg = tape.slice_cols(s_i, 1, 5);

        if (opts.qrn_loss) {
            if (item.positive) {
                cls_nodes.push_back(cls_loss(tape, logp, *item.positive));
                if (!cfg.disable_regression)
                    reg_nodes.push_back(reg_loss(tape, reg, item.proposals, item.phrase->gt_box,
                                                 cfg.reg_positive_only));
            } else {
                ++out.skipped;
            }
        }

        if (opts.cpn_on) {
            auto probs = proposal_probs(tape, logp);
            std::vector<int> top_k;
            if (pins) top_k = pins->top_k[i];
            else if (cfg.cpn_selection == "rank") top_k = select_top_k(probs, cfg.top_k);
            else top_k = sample_top_k(probs, cfg.top_k, *sample_rng);

            double r = reward_function(top_k, item.ctx, cfg.top_k, cfg.beta);
            int q_det = pins ? tape.constant(pins->q_values[i]) : tape.detach(q_nodes[i]);
            int f = predict_reward(tape, bind, item.features, top_k, q_det);
            rwd_nodes.push_back(reward_loss(tape, f, r));

            double f_val = static_cast<double>(tape.value(f).item());
            double scale = pins ? pins->scales[i] : (cfg.use_raw_reward ? r : f_val);
            policy_nodes.push_back(policy_term(tape, logp, top_k, scale));

            f_sum += f_val;
            r_sum += r;
            ++cpn_items;
            if (capture) {
                capture->top_k.push_back(top_k);
                capture->q_values.push_back(tape.value(q_nodes[i]));
                capture->scales.push_back(scale);
            }
        }
    }

    std::vector<int> components;
    if (out.l_gen >= 0) components.push_back(out.l_gen);
    if (!cls_nodes.empty()) {
        out.l_cls = tape.scale(tape.add_n(cls_nodes), 1.0 / B);
        components.push_back(out.l_cls);
    }
    if (!reg_nodes.empty()) {
        out.l_reg = tape.scale(tape.add_n(reg_nodes), 1.0 / B);
        components.push_back(tape.scale(out.l_reg, cfg.lambda));
    }
    if (!rwd_nodes.empty()) {
        out.l_rwd = tape.scale(tape.add_n(rwd_nodes), 1.0 / B);
        components.push_back(out.l_rwd);
        out.policy = tape.scale(tape.add_n(policy_nodes), 1.0 / B);
        components.push_back(out.policy);
        out.f_mean = f_sum / cpn_items;
        out.r_mean = r_sum / cpn_items;
    }
    // a batch can end up with no trainable term (every query skipped in a
    // retrieval-only phase); total stays -1 and the step applies no update
    if (!components.empty())
        out.total = components.size() == 1 ? components[0] : tape.add_n(components);
    return out;
}

struct StepLosses {
    double total = 0, l_gen = 0, l_cls = 0, l_reg = 0, l_rwd = 0, policy = 0;
    double f_mean = 0, r_mean = 0;
    double grad_norm = 0;
    int skipped = 0;
    bool aborted = false;
};

template <typename T>
inline double node_value(const Tape<T>& tape, int id) {
    return id >= 0 ? static_cast<double>(tape.value(id).item()) : 0.0;
}

// Largest gradient magnitude a loss term puts on parameters of a group.
// The routing contract demands exact zeros across groups: the reward loss
// reaches only cpn.*, the policy term only qrn.*, the generation loss only
// pgn.*, classification/regression only qrn.* .
template <typename T>
double cross_group_gradient(const Tape<T>& tape, const ParamBinding<T>& bind, int loss,
                            const std::string& group_prefix) {
    if (loss < 0) return 0.0;
    auto grads = tape.backward(loss);
    double worst = 0.0;
    for (const auto& [name, id] : bind.nodes()) {
        if (name.rfind(group_prefix, 0) != 0) continue;
        if (static_cast<std::size_t>(id) < grads.size() && grads[id].numel() > 0)
            for (T v : grads[id].data) worst = std::max(worst, std::abs(static_cast<double>(v)));
    }
    return worst;
}

template <typename T>
void assert_gradient_routing(const Tape<T>& tape, const ParamBinding<T>& bind,
                             const LossNodes<T>& nodes) {
    auto check = [&](int loss, const char* prefix) {
        if (cross_group_gradient(tape, bind, loss, prefix) != 0.0)
            throw ContractError(std::string("gradient routing violated for prefix ") + prefix);
    };
    check(nodes.l_rwd, "qrn.");
    check(nodes.l_rwd, "pgn.");
    check(nodes.policy, "cpn.");
    check(nodes.policy, "pgn.");
    check(nodes.l_gen, "qrn.");
    check(nodes.l_gen, "cpn.");
    check(nodes.l_cls, "pgn.");
    check(nodes.l_reg, "pgn.");
}

template <typename T>
StepLosses joint_step(TrainState<T>& state, const std::vector<BatchItem>& batch,
                      const PhaseOpts& opts) {
    const TrainConfig& cfg = state.cfg;
    BatchPlan<T> plan = prepare_batch(state, batch, opts);

    Tape<T> tape;
    ParamBinding<T> bind(tape, state.params, opts.live);
    RunningStats<T> stats = state.bn_stats_view();
    auto nodes = forward_losses(tape, bind, plan, cfg, BnMode::Train, stats, &state.sample_rng);

    StepLosses losses;
    losses.total = node_value(tape, nodes.total);
    losses.l_gen = nodes.l_gen_value;
    losses.l_cls = node_value(tape, nodes.l_cls);
    losses.l_reg = node_value(tape, nodes.l_reg);
    losses.l_rwd = node_value(tape, nodes.l_rwd);
    losses.policy = node_value(tape, nodes.policy);
    losses.f_mean = nodes.f_mean;
    losses.r_mean = nodes.r_mean;
    losses.skipped = nodes.skipped;

    if (nodes.total < 0) {
        state.skipped_queries += nodes.skipped;
        ++state.step;
        return losses;
    }
    if (!std::isfinite(losses.total)) {
        ++state.nan_steps;
        losses.aborted = true;
        return losses;
    }

#ifndef NDEBUG
    assert_gradient_routing(tape, bind, nodes);
#endif

    auto grads = bind.extract(tape.backward(nodes.total));
    losses.grad_norm = clip_global_norm(grads, cfg.clip_norm);

    GradMap<T> g_pgn, g_qrn, g_cpn;
    for (auto& [name, g] : grads) {
        if (name.rfind("pgn.", 0) == 0) g_pgn.emplace(name, std::move(g));
        else if (name.rfind("qrn.", 0) == 0) g_qrn.emplace(name, std::move(g));
        else if (name.rfind("cpn.", 0) == 0) g_cpn.emplace(name, std::move(g));
    }
    adam_step(state.params, g_pgn, state.opt_pgn);
    adam_step(state.params, g_qrn, state.opt_qrn);
    adam_step(state.params, g_cpn, state.opt_cpn);

    if (nodes.have_bn) {
        for (std::size_t i = 0; i < stats.mean.data.size(); ++i) {
            stats.mean.data[i] = static_cast<T>(kBnMomentum * stats.mean.data[i] +
                                                (1.0 - kBnMomentum) * nodes.bn_mean.data[i]);
            stats.var.data[i] = static_cast<T>(kBnMomentum * stats.var.data[i] +
                                               (1.0 - kBnMomentum) * nodes.bn_var.data[i]);
        }
        state.store_bn_stats(stats);
    }

    state.skipped_queries += nodes.skipped;
    ++state.step;
    return losses;
}

struct StepLog {
    long step = 0;
    std::string phase;
    StepLosses losses;
};

using LogCallback = std::function<void(const StepLog&)>;

// One A -> B -> C cycle (per config possibly repeated): train the proposal
// network alone, then the query/context networks against frozen proposals,
// then fine-tune everything jointly.
template <typename T>
void alternating_schedule(TrainState<T>& state, const std::vector<GroundingExample>& corpus,
                          const LogCallback& log = {}) {
    const TrainConfig& cfg = state.cfg;
    std::vector<BatchItem> pairs;
    for (const auto& ex : corpus) {
        if (split_of(ex.scene.id) != Split::Train) continue;
        for (std::size_t p = 0; p < ex.phrases.size(); ++p)
            pairs.emplace_back(&ex, static_cast<int>(p));
    }
    if (pairs.empty()) throw DataError("empty training corpus");

    auto run_phase = [&](char phase, int epochs) {
        if (epochs <= 0) return;
        PhaseOpts opts = phase_opts(phase, cfg);
        for (int e = 0; e < epochs; ++e) {
            // deterministic shuffle from the sampling stream
            for (std::size_t i = pairs.size(); i > 1; --i)
                std::swap(pairs[i - 1], pairs[state.sample_rng.uniform_int(i)]);
            for (std::size_t start = 0; start < pairs.size(); start += cfg.batch_size) {
                std::size_t end = std::min(start + cfg.batch_size, pairs.size());
                std::vector<BatchItem> batch(pairs.begin() + start, pairs.begin() + end);
                if (static_cast<int>(batch.size()) * cfg.n_proposals < 2 && phase != 'A') continue;
                StepLosses losses = joint_step(state, batch, opts);
                if (log) log({state.step, opts.name, losses});
            }
            ++state.epoch;
        }
    };

    for (int cycle = 0; cycle < cfg.cycles; ++cycle) {
        if (!cfg.pgn_frozen_at_init) run_phase('A', cfg.epochs_a);
        run_phase('B', cfg.epochs_b);
        run_phase('C', cfg.epochs_c);
    }
}

// --- evaluation --------------------------------------------------------

struct QueryPrediction {
    std::string text;
    Box proposal_box;  // the selected proposal before regression
    Box regressed_box; // the grounding result
    Box gt_box;
    std::string category; // shape attribute of the referenced object
};

template <typename T>
QueryPrediction predict_query(const TrainState<T>& state, const GroundingExample& ex,
                              const std::vector<Proposal<T>>& proposals, const Tensor<T>& features,
                              const Phrase& phrase) {
    const TrainConfig& cfg = state.cfg;
    Tape<T> tape;
    ParamBinding<T> bind(tape, state.params, {});
    RunningStats<T> stats = state.bn_stats_view();

    int q = encode_query(tape, bind, phrase.tokens, cfg, state.vocab.size());
    int v = tape.constant(features);
    int fused = tape.relu(tape.batch_norm(
        tape.linear(tape.concat_cols(tape.repeat_row(q, features.rows()), v), bind("qrn.fuse.w"),
                    bind("qrn.fuse.b")),
        bind("qrn.bn.gamma"), bind("qrn.bn.beta"), BnMode::Eval, stats.mean, stats.var, kBnEps));
    auto pred = predict(tape, bind, fused);
    auto probs = proposal_probs(tape, pred.log_prob);

    int best = 0;
    for (std::size_t i = 1; i < probs.size(); ++i)
        if (probs[i] > probs[best]) best = static_cast<int>(i);

    QueryPrediction out;
    out.text = phrase.text;
    out.proposal_box = proposals[best].box;
    out.regressed_box = ground(proposals, probs, tape.value(pred.reg), cfg.image_size,
                               cfg.image_size, !cfg.disable_regression);
    out.gt_box = phrase.gt_box;
    out.category = attr::kShapes[ex.scene.objects[phrase.object_index].shape];
    return out;
}

// Proposals for one example under the current parameters (query-independent).
template <typename T>
std::vector<Proposal<T>> propose(const TrainState<T>& state, const GroundingExample& ex) {
    const TrainConfig& cfg = state.cfg;
    FeatureGrid<T> grid = featurize<T>(ex.scene, cfg.stride());
    Tape<T> tape;
    ParamBinding<T> bind(tape, state.params, {});
    auto fwd = pgn_forward(tape, bind, grid, cfg);
    auto probs = objectness_probs(tape, fwd);
    return select_top_proposals(probs, tape.value(fwd.reg), state.anchors, cfg.n_proposals, grid,
                                cfg.image_size, cfg.image_size);
}

template <typename T>
EvalReport evaluate(const TrainState<T>& state, const std::vector<GroundingExample>& corpus,
                    Split split, std::vector<QueryPrediction>* predictions = nullptr) {
    std::vector<Box> pred_boxes, gt_boxes;
    std::vector<std::vector<Box>> proposals_per_image, gts_per_image;
    EvalReport report;

    for (const auto& ex : corpus) {
        if (split_of(ex.scene.id) != split) continue;
        auto proposals = propose(state, ex);
        Tensor<T> features = feature_matrix(proposals);

        std::vector<Box> prop_boxes;
        for (const auto& p : proposals) prop_boxes.push_back(p.box);
        proposals_per_image.push_back(prop_boxes);
        std::vector<Box> gts;
        for (const auto& p : ex.phrases) gts.push_back(p.gt_box);
        gts_per_image.push_back(gts);

        for (const auto& phrase : ex.phrases) {
            QueryPrediction qp = predict_query(state, ex, proposals, features, phrase);
            pred_boxes.push_back(qp.regressed_box);
            gt_boxes.push_back(qp.gt_box);
            auto& cat = report.per_category[qp.category];
            ++cat.n;
            if (iou(qp.regressed_box, qp.gt_box) > 0.5) ++cat.correct;
            if (predictions) predictions->push_back(qp);
        }
    }
    if (pred_boxes.empty()) throw DataError("no queries in the requested split");
    report.accuracy = accuracy_at_iou(pred_boxes, gt_boxes);
    report.ubp = ubp(proposals_per_image, gts_per_image);
    report.bpg = bpg(proposals_per_image, gts_per_image);
    report.n_queries = static_cast<long>(pred_boxes.size());
    report.config_echo = nlohmann::json(state.cfg);
    return report;
}

// --- checkpointing ------------------------------------------------------

template <typename T>
void save_checkpoint(const TrainState<T>& state, const std::string& path) {
    static_assert(std::is_same_v<T, float>, "checkpoints are float32");
    std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
    for (const auto& e : state.params.entries()) tensors.emplace_back(e.name, &e.value);
    auto add_opt = [&](const char* group, const AdamState<T>& opt) {
        for (const auto& [name, t] : opt.m)
            tensors.emplace_back(std::string("opt.") + group + ".m." + name, &t);
        for (const auto& [name, t] : opt.v)
            tensors.emplace_back(std::string("opt.") + group + ".v." + name, &t);
    };
    add_opt("pgn", state.opt_pgn);
    add_opt("qrn", state.opt_qrn);
    add_opt("cpn", state.opt_cpn);
    save_tensors(tensors, path);

    nlohmann::json side = {{"epoch", state.epoch},
                           {"step", state.step},
                           {"skipped_queries", state.skipped_queries},
                           {"nan_steps", state.nan_steps},
                           {"adam_t",
                            {{"pgn", state.opt_pgn.t}, {"qrn", state.opt_qrn.t}, {"cpn", state.opt_cpn.t}}},
                           {"config", state.cfg}};
    std::ofstream out(path + ".state.json");
    if (!out) throw CheckpointError("cannot write training-state sidecar");
    out << side.dump(2) << "\n";
}

// Load a checkpoint. When cfg_override is given, the stored parameters are
// loaded into a model built from that config; groups missing from the file
// (e.g. cpn.* from a disable_cpn run) keep their fresh initialization and
// are reported in `warnings`.
template <typename T>
TrainState<T> load_checkpoint(const std::string& path,
                              std::vector<std::string>* warnings = nullptr,
                              const TrainConfig* cfg_override = nullptr) {
    static_assert(std::is_same_v<T, float>, "checkpoints are float32");
    std::ifstream side_in(path + ".state.json");
    if (!side_in) throw CheckpointError("missing training-state sidecar for " + path);
    nlohmann::json side = nlohmann::json::parse(side_in);
    TrainConfig cfg = side.at("config").get<TrainConfig>();
    if (cfg_override) cfg = *cfg_override;

    TrainState<T> state = build_state<T>(cfg);
    state.epoch = side.value("epoch", 0L);
    state.step = side.value("step", 0L);
    state.skipped_queries = side.value("skipped_queries", 0L);
    state.nan_steps = side.value("nan_steps", 0L);
    state.opt_pgn.t = side.at("adam_t").value("pgn", 0L);
    state.opt_qrn.t = side.at("adam_t").value("qrn", 0L);
    state.opt_cpn.t = side.at("adam_t").value("cpn", 0L);

    auto tensors = load_tensors(path);
    for (auto& e : state.params.entries()) {
        auto it = tensors.find(e.name);
        if (it == tensors.end()) {
            if (warnings)
                warnings->push_back("checkpoint is missing " + e.name + "; keeping fresh init");
            continue;
        }
        if (it->second.shape != e.value.shape)
            throw CheckpointError("shape mismatch for " + e.name);
        e.value = std::move(it->second);
        tensors.erase(it);
    }
    auto restore_opt = [&](const char* group, AdamState<T>& opt) {
        std::string mp = std::string("opt.") + group + ".m.";
        std::string vp = std::string("opt.") + group + ".v.";
        for (auto it = tensors.begin(); it != tensors.end();) {
            if (it->first.rfind(mp, 0) == 0) {
                opt.m[it->first.substr(mp.size())] = std::move(it->second);
                it = tensors.erase(it);
            } else if (it->first.rfind(vp, 0) == 0) {
                opt.v[it->first.substr(vp.size())] = std::move(it->second);
                it = tensors.erase(it);
            } else {
                ++it;
            }
        }
    };
    restore_opt("pgn", state.opt_pgn);
    restore_opt("qrn", state.opt_qrn);
    restore_opt("cpn", state.opt_cpn);
    if (!tensors.empty())
        throw CheckpointError("unknown tensor name in checkpoint: " + tensors.begin()->first);
    for (const auto& [pname, t] : state.opt_pgn.m)
        if (!state.params.has(pname)) throw CheckpointError("optimizer state for unknown parameter " + pname);
    return state;
}

} // namespace qrc
