#pragma once

#include <functional>
#include <string>
#include <vector>

#include "qrc/gradcheck.hpp"
#include "qrc/pipeline.hpp"

namespace qrc {

struct OpGradReport {
    std::string op;
    double max_rel_err = 0.0;
    int points = 0;
};

namespace gradsuite {

using D = double;

// Builds a node from leaf inputs; the harness reduces whatever comes out
// to a scalar through a fixed random weighting so every output coordinate
// carries gradient.
using OpBuilder = std::function<int(Tape<D>&, const std::vector<int>&)>;

inline double check_op(const OpBuilder& build, const std::vector<std::vector<int>>& shapes,
                       Rng rng, int points, double eps = 1e-5, double margin = 0.0) {
    double worst = 0.0;
    for (int pt = 0; pt < points; ++pt) {
        std::vector<Tensor<D>> inputs;
        for (const auto& s : shapes) {
            Tensor<D> t = Tensor<D>::zeros(s);
            for (auto& v : t.data) {
                v = rng.uniform(-2.0, 2.0);
                // keep clear of a kink when the op has one at zero
                if (margin > 0 && std::abs(v) < margin) v = v < 0 ? v - margin : v + margin;
            }
            inputs.push_back(std::move(t));
        }
        Tensor<D> w; // fixed output weighting, sized on first build
        auto loss_of = [&](const std::vector<Tensor<D>>& ins) {
            Tape<D> tape;
            std::vector<int> ids;
            for (const auto& t : ins) ids.push_back(tape.leaf(t, true));
            int out = build(tape, ids);
            if (w.numel() == 0) {
                w = Tensor<D>::zeros(tape.value(out).shape);
                Rng wr = rng.split("weights");
                for (auto& v : w.data) v = wr.uniform(-1.0, 1.0);
            }
            int scalar = tape.sum(tape.mul(out, tape.constant(w)));
            return std::pair<Tape<D>, int>(std::move(tape), scalar);
        };

        auto [tape, loss] = loss_of(inputs);
        auto grads = tape.backward(loss);

        for (std::size_t i = 0; i < inputs.size(); ++i) {
            Tensor<D> fd = finite_diff_grad(
                [&](const Tensor<D>& x) {
                    std::vector<Tensor<D>> probe = inputs;
                    probe[i] = x;
                    auto [t2, l2] = loss_of(probe);
                    return t2.value(l2).item();
                },
                inputs[i], eps);
            const Tensor<D>& ad = grads[i].numel() ? grads[i] : Tensor<D>::zeros(inputs[i].shape);
            worst = std::max(worst, max_rel_error(fd, ad));
        }
    }
    return worst;
}

inline std::vector<OpGradReport> run_op_suite(std::uint64_t seed, int points = 50) {
    Rng rng(seed);
    std::vector<OpGradReport> reports;
    auto add = [&](const std::string& name, const OpBuilder& b,
                   const std::vector<std::vector<int>>& shapes, double margin = 0.0) {
        reports.push_back({name, check_op(b, shapes, rng.split(name), points, 1e-5, margin), points});
    };

    add("linear", [](Tape<D>& t, const std::vector<int>& in) { return t.linear(in[0], in[1], in[2]); },
        {{2, 3}, {3, 4}, {1, 4}});
    add("matmul", [](Tape<D>& t, const std::vector<int>& in) { return t.matmul(in[0], in[1]); },
        {{3, 4}, {4, 2}});
    add("add", [](Tape<D>& t, const std::vector<int>& in) { return t.add(in[0], in[1]); },
        {{2, 3}, {2, 3}});
    add("add_n",
        [](Tape<D>& t, const std::vector<int>& in) { return t.add_n({in[0], in[1], in[2]}); },
        {{2, 2}, {2, 2}, {2, 2}});
    add("sub", [](Tape<D>& t, const std::vector<int>& in) { return t.sub(in[0], in[1]); },
        {{2, 3}, {2, 3}});
    add("mul", [](Tape<D>& t, const std::vector<int>& in) { return t.mul(in[0], in[1]); },
        {{2, 3}, {2, 3}});
    add("scale", [](Tape<D>& t, const std::vector<int>& in) { return t.scale(in[0], -1.7); }, {{2, 3}});
    add("add_const", [](Tape<D>& t, const std::vector<int>& in) { return t.add_const(in[0], 0.4); },
        {{2, 3}});
    add("add_row", [](Tape<D>& t, const std::vector<int>& in) { return t.add_row(in[0], in[1]); },
        {{3, 4}, {1, 4}});
    add("relu", [](Tape<D>& t, const std::vector<int>& in) { return t.relu(in[0]); }, {{3, 4}},
        /*margin=*/1e-3);
    add("sigmoid", [](Tape<D>& t, const std::vector<int>& in) { return t.sigmoid(in[0]); }, {{3, 4}});
    add("tanh", [](Tape<D>& t, const std::vector<int>& in) { return t.tanh_(in[0]); }, {{3, 4}});
    add("softmax",
        [](Tape<D>& t, const std::vector<int>& in) { return t.softmax_rows(in[0]); }, {{3, 5}});
    add("log_softmax",
        [](Tape<D>& t, const std::vector<int>& in) { return t.log_softmax_rows(in[0]); }, {{3, 5}});
    add("smooth_l1", [](Tape<D>& t, const std::vector<int>& in) { return t.smooth_l1(in[0]); },
        {{3, 4}});
    add("sum", [](Tape<D>& t, const std::vector<int>& in) { return t.sum(in[0]); }, {{3, 4}});
    add("concat_cols",
        [](Tape<D>& t, const std::vector<int>& in) { return t.concat_cols(in[0], in[1]); },
        {{3, 2}, {3, 4}});
    add("vstack",
        [](Tape<D>& t, const std::vector<int>& in) { return t.vstack({in[0], in[1]}); },
        {{2, 3}, {4, 3}});
    add("repeat_row", [](Tape<D>& t, const std::vector<int>& in) { return t.repeat_row(in[0], 4); },
        {{1, 3}});
    add("slice_rows",
        [](Tape<D>& t, const std::vector<int>& in) { return t.slice_rows(in[0], 1, 3); }, {{4, 3}});
    add("slice_cols",
        [](Tape<D>& t, const std::vector<int>& in) { return t.slice_cols(in[0], 1, 4); }, {{3, 5}});
    add("gather_rows",
        [](Tape<D>& t, const std::vector<int>& in) { return t.gather_rows(in[0], {2, 0, 2}); },
        {{4, 3}});
    add("pick_sum",
        [](Tape<D>& t, const std::vector<int>& in) {
            return t.pick_sum(in[0], {{0, 1}, {2, 2}, {0, 1}});
        },
        {{3, 4}});
    add("reshape",
        [](Tape<D>& t, const std::vector<int>& in) { return t.reshape(in[0], {2, 6}); }, {{3, 4}});
    add("batch_norm_train",
        [](Tape<D>& t, const std::vector<int>& in) {
            Tensor<D> rm = Tensor<D>::zeros({1, 4});
            Tensor<D> rv = Tensor<D>::zeros({1, 4});
            return t.batch_norm(in[0], in[1], in[2], BnMode::Train, rm, rv, kBnEps);
        },
        {{5, 4}, {1, 4}, {1, 4}});
    add("batch_norm_eval",
        [](Tape<D>& t, const std::vector<int>& in) {
            Tensor<D> rm = Tensor<D>::full({1, 4}, 0.3);
            Tensor<D> rv = Tensor<D>::full({1, 4}, 1.5);
            return t.batch_norm(in[0], in[1], in[2], BnMode::Eval, rm, rv, kBnEps);
        },
        {{5, 4}, {1, 4}, {1, 4}});
    add("lstm_step",
        [](Tape<D>& t, const std::vector<int>& in) {
            auto hc = lstm_step(t, in[0], in[1], in[2], in[3], in[4], 3);
            return t.concat_cols(hc.h, hc.c);
        },
        {{1, 2}, {1, 3}, {1, 3}, {5, 12}, {1, 12}});
    return reports;
}

// A miniature joint-objective instance: one scene, two phrases, four
// proposals. Returns the tiny config and a hand-built example.
inline std::pair<TrainConfig, GroundingExample> tiny_instance() {
    TrainConfig cfg;
    cfg.image_size = 32;
    cfg.grid = 4;
    cfg.scales = {10.0, 16.0};
    cfg.ratios = {1.0, 2.0};
    cfg.pgn_hidden = 8;
    cfg.n_proposals = 4;
    cfg.top_k = 2;
    cfg.d_q = 8;
    cfg.embed_dim = 6;
    cfg.m = 10;
    cfg.batch_size = 2;

    Vocab vocab;
    Scene scene;
    scene.id = 4242;
    scene.width = scene.height = 32;
    SceneObject a;
    a.box = Box(10, 12, 12, 10);
    a.color = 0;
    a.shape = 1;
    a.size_class = 0;
    SceneObject b;
    b.box = Box(23, 22, 11, 13);
    b.color = 2;
    b.shape = 3;
    b.size_class = 0;
    scene.objects = {a, b};
    GroundingExample ex;
    ex.scene = scene;
    ex.phrases = {make_phrase(scene, 0, 0, vocab), make_phrase(scene, 1, 0, vocab)};
    return {cfg, ex};
}

struct CompositeReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    int coords = 0;
};

// Finite differences against the full joint objective (generation +
// classification + weighted regression + reward + policy terms) over every
// trainable parameter. The non-differentiable outer decisions (proposal
// selection, positives, top-K sets, detached policy scales) are pinned at
// the base point so both sides differentiate the same function.
inline CompositeReport composite_grad_check(std::uint64_t seed, double eps = 1e-6) {
    auto [cfg, ex] = tiny_instance();

    for (std::uint64_t attempt = 0; attempt < 500; ++attempt) {
        cfg.seed = seed + attempt;
        TrainState<D> state = build_state<D>(cfg);
        std::vector<BatchItem> batch = {{&ex, 0}, {&ex, 1}};
        PhaseOpts opts = phase_opts('C', cfg);
        BatchPlan<D> plan = prepare_batch(state, batch, opts);

        Tape<D> tape;
        ParamBinding<D> bind(tape, state.params, opts.live);
        RunningStats<D> stats = state.bn_stats_view();
        ForwardPins<D> pins;
        Rng fwd_rng = state.sample_rng;
        auto nodes =
            forward_losses<D>(tape, bind, plan, cfg, BnMode::Train, stats, &fwd_rng, &pins, nullptr);
        // every joint-objective term must be present for full coverage
        if (nodes.total < 0 || nodes.l_cls < 0 || nodes.l_reg < 0 || nodes.l_rwd < 0) continue;

        // ReLU kinks break central differences; reseed if any activation
        // input sits inside the probe band.
        bool near_kink = false;
        for (int id = 0; id < tape.size() && !near_kink; ++id) {
            if (tape.node(id).op != Tape<D>::Op::Relu) continue;
            for (D v : tape.value(tape.node(id).inputs[0]).data)
                if (std::abs(v) < 1e-3) near_kink = true;
        }
        if (near_kink) continue;

        auto auto_grads = bind.extract(tape.backward(nodes.total));

        CompositeReport report;
        for (const auto& [name, ag] : auto_grads) {
            Tensor<D> base = state.params[name];
            Tensor<D> fd = finite_diff_grad(
                [&](const Tensor<D>& x) {
                    TrainState<D>& st = state;
                    Tensor<D> saved = st.params[name];
                    st.params[name] = x;
                    Tape<D> t2;
                    ParamBinding<D> b2(t2, st.params, opts.live);
                    RunningStats<D> s2 = st.bn_stats_view();
                    auto n2 = forward_losses<D>(t2, b2, plan, cfg, BnMode::Train, s2, nullptr,
                                                nullptr, &pins);
                    st.params[name] = saved;
                    return t2.value(n2.total).item();
                },
                base, eps);
            double err = max_rel_error(fd, ag);
            report.coords += static_cast<int>(base.numel());
            if (err > report.max_rel_err) {
                report.max_rel_err = err;
                report.worst_param = name;
            }
        }
        return report;
    }
    throw NumericError("could not build a kink-free joint-objective instance");
}

} // namespace gradsuite
} // namespace qrc
