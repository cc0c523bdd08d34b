#pragma once

#include <cmath>
#include <utility>

#include "qrc/rng.hpp"
#include "qrc/tape.hpp"

namespace qrc {

// Single LSTM cell step. Gate weights are packed in one matrix applied to
// the concatenated [x_t || h] input; column blocks are ordered
// [input, forget, output, candidate], each hidden_dim wide.
//
//   W: (e + d) x 4d,  b: 1 x 4d
template <typename T>
struct LstmOut {
    int h;
    int c;
};

template <typename T>
LstmOut<T> lstm_step(Tape<T>& tape, int x_t, int h, int c, int w, int b, int hidden_dim) {
    int z = tape.concat_cols(x_t, h);
    int a = tape.linear(z, w, b);
    int gi = tape.sigmoid(tape.slice_cols(a, 0, hidden_dim));
    int gf = tape.sigmoid(tape.slice_cols(a, hidden_dim, 2 * hidden_dim));
    int go = tape.sigmoid(tape.slice_cols(a, 2 * hidden_dim, 3 * hidden_dim));
    int gc = tape.tanh_(tape.slice_cols(a, 3 * hidden_dim, 4 * hidden_dim));
    int c_next = tape.add(tape.mul(gf, c), tape.mul(gi, gc));
    int h_next = tape.mul(go, tape.tanh_(c_next));
    return {h_next, c_next};
}

// Exponential-moving-average statistics for batch standardization.
template <typename T>
struct RunningStats {
    Tensor<T> mean;
    Tensor<T> var;

    static RunningStats zeros(int width) {
        return {Tensor<T>::zeros({1, width}), Tensor<T>::zeros({1, width})};
    }
};

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.9;

// Standardize per feature with batch statistics (train) or the running
// statistics (eval), then scale/shift. In train mode the running stats are
// updated in place with momentum 0.9.
template <typename T>
int batch_standardize(Tape<T>& tape, int x, int gamma, int beta, BnMode mode,
                      RunningStats<T>& stats, double eps = kBnEps,
                      double momentum = kBnMomentum) {
    Tensor<T> bm, bv;
    int out = tape.batch_norm(x, gamma, beta, mode, stats.mean, stats.var, eps, &bm, &bv);
    if (mode == BnMode::Train) {
        for (std::size_t i = 0; i < stats.mean.data.size(); ++i) {
            stats.mean.data[i] = static_cast<T>(momentum * stats.mean.data[i] + (1.0 - momentum) * bm.data[i]);
            stats.var.data[i] = static_cast<T>(momentum * stats.var.data[i] + (1.0 - momentum) * bv.data[i]);
        }
    }
    return out;
}

enum class InitScheme { FanScaledNormal, FanScaledUniform, Zeros };

// Weight initialization. fan_in/fan_out follow the y = xW convention for a
// (fan_in x fan_out) matrix:
//   FanScaledNormal  — N(0, sqrt(2/fan_in)), for layers feeding ReLU
//   FanScaledUniform — U(-r, r), r = sqrt(6/(fan_in+fan_out)), plain layers
//   Zeros            — biases
template <typename T>
Tensor<T> init_params(const std::vector<int>& shape, InitScheme scheme, Rng& rng) {
    Tensor<T> out = Tensor<T>::zeros(shape);
    if (scheme == InitScheme::Zeros) return out;
    int fan_in = out.rows();
    int fan_out = out.cols();
    if (shape.size() == 1) {
        fan_in = shape[0];
        fan_out = shape[0];
    }
    if (scheme == InitScheme::FanScaledNormal) {
        double std = std::sqrt(2.0 / fan_in);
        for (auto& v : out.data) v = static_cast<T>(rng.normal(0.0, std));
    } else {
        double bound = std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& v : out.data) v = static_cast<T>(rng.uniform(-bound, bound));
    }
    return out;
}

} // namespace qrc
