#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "qrc/tensor.hpp"

namespace qrc {

// Run configuration. The desk-scale defaults below train in minutes on one
// CPU core; full_scale() restores the original system's dimensions
// (N=100, K=10, d_q=1000).
struct TrainConfig {
    // image / proposal geometry
    int image_size = 128;
    int grid = 16; // feature grid is grid x grid; stride = image_size / grid
    int d_feat = 24;
    std::vector<double> scales{16.0, 32.0, 48.0};
    std::vector<double> ratios{0.5, 1.0, 2.0};
    int pgn_hidden = 64;

    // model dimensions
    int n_proposals = 32; // N
    int top_k = 5;        // K
    int d_q = 128;
    int embed_dim = 64;
    int m = 512;
    int max_query_len = 19;

    // objective weights
    double lambda = 1.0;   // regression loss weight in the joint objective
    double lambda_g = 1.0; // regression weight inside the generation loss
    double beta = 0.2;     // context reward

    // optimization
    int batch_size = 40;
    double lr = 1e-4;
    int epochs_a = 2;
    int epochs_b = 4;
    int epochs_c = 2;
    int cycles = 1;
    double clip_norm = 10.0;
    std::uint64_t seed = 0;

    // ablation flags
    bool reg_positive_only = false;
    bool use_raw_reward = false;
    bool disable_cpn = false;
    bool disable_regression = false;
    bool pgn_frozen_at_init = false; // keep the proposal network at its random init
    bool pgn_joint = true; // when false, the proposal network is frozen after its own phase
    std::string cpn_selection = "sample"; // "sample" or "rank"

    double stride() const { return static_cast<double>(image_size) / grid; }
    int anchors_per_cell() const { return static_cast<int>(scales.size() * ratios.size()); }
    int num_anchors() const { return grid * grid * anchors_per_cell(); }
    int d_v() const { return 4 * d_feat + 5; } // 2x2 pooled cells + 5-D spatial tail

    void validate() const {
        if (lambda < 0 || lambda_g < 0) throw ContractError("negative regression weight");
        if (beta <= 0 || beta >= 1) throw ContractError("beta must be in (0,1)");
        if (image_size <= 0 || grid <= 0 || d_feat <= 0 || m <= 0 || d_q <= 0 || embed_dim <= 0)
            throw ContractError("non-positive dimension in config");
        if (n_proposals <= 0 || top_k <= 0 || top_k > n_proposals)
            throw ContractError("need 0 < K <= N");
        if (image_size % grid != 0) throw ContractError("image size must be a multiple of grid");
        if (cpn_selection != "sample" && cpn_selection != "rank")
            throw ContractError("cpn_selection must be 'sample' or 'rank'");
    }

    static TrainConfig full_scale() {
        TrainConfig c;
        c.n_proposals = 100;
        c.top_k = 10;
        c.d_q = 1000;
        return c;
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"image_size", c.image_size},
                       {"grid", c.grid},
                       {"d_feat", c.d_feat},
                       {"scales", c.scales},
                       {"ratios", c.ratios},
                       {"pgn_hidden", c.pgn_hidden},
                       {"n_proposals", c.n_proposals},
                       {"top_k", c.top_k},
                       {"d_q", c.d_q},
                       {"embed_dim", c.embed_dim},
                       {"m", c.m},
                       {"max_query_len", c.max_query_len},
                       {"lambda", c.lambda},
                       {"lambda_g", c.lambda_g},
                       {"beta", c.beta},
                       {"batch_size", c.batch_size},
                       {"lr", c.lr},
                       {"epochs_a", c.epochs_a},
                       {"epochs_b", c.epochs_b},
                       {"epochs_c", c.epochs_c},
                       {"cycles", c.cycles},
                       {"clip_norm", c.clip_norm},
                       {"seed", c.seed},
                       {"reg_positive_only", c.reg_positive_only},
                       {"use_raw_reward", c.use_raw_reward},
                       {"disable_cpn", c.disable_cpn},
                       {"disable_regression", c.disable_regression},
                       {"pgn_frozen_at_init", c.pgn_frozen_at_init},
                       {"pgn_joint", c.pgn_joint},
                       {"cpn_selection", c.cpn_selection}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig defaults;
    auto get = [&](const char* key, auto& field, const auto& fallback) {
        field = j.value(key, fallback);
    };
    get("image_size", c.image_size, defaults.image_size);
    get("grid", c.grid, defaults.grid);
    get("d_feat", c.d_feat, defaults.d_feat);
    get("scales", c.scales, defaults.scales);
    get("ratios", c.ratios, defaults.ratios);
    get("pgn_hidden", c.pgn_hidden, defaults.pgn_hidden);
    get("n_proposals", c.n_proposals, defaults.n_proposals);
    get("top_k", c.top_k, defaults.top_k);
    get("d_q", c.d_q, defaults.d_q);
    get("embed_dim", c.embed_dim, defaults.embed_dim);
    get("m", c.m, defaults.m);
    get("max_query_len", c.max_query_len, defaults.max_query_len);
    get("lambda", c.lambda, defaults.lambda);
    get("lambda_g", c.lambda_g, defaults.lambda_g);
    get("beta", c.beta, defaults.beta);
    get("batch_size", c.batch_size, defaults.batch_size);
    get("lr", c.lr, defaults.lr);
    get("epochs_a", c.epochs_a, defaults.epochs_a);
    get("epochs_b", c.epochs_b, defaults.epochs_b);
    get("epochs_c", c.epochs_c, defaults.epochs_c);
    get("cycles", c.cycles, defaults.cycles);
    get("clip_norm", c.clip_norm, defaults.clip_norm);
    get("seed", c.seed, defaults.seed);
    get("reg_positive_only", c.reg_positive_only, defaults.reg_positive_only);
    get("use_raw_reward", c.use_raw_reward, defaults.use_raw_reward);
    get("disable_cpn", c.disable_cpn, defaults.disable_cpn);
    get("disable_regression", c.disable_regression, defaults.disable_regression);
    get("pgn_frozen_at_init", c.pgn_frozen_at_init, defaults.pgn_frozen_at_init);
    get("pgn_joint", c.pgn_joint, defaults.pgn_joint);
    get("cpn_selection", c.cpn_selection, defaults.cpn_selection);
}

} // namespace qrc
