#pragma once

// Minimal reverse-mode differentiation over NCHW tensors. Each op builds a
// Node; when none of its inputs require gradients the node keeps no parents,
// so inference graphs are released as soon as intermediate Vars go out of
// scope.

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "tcupgan/tensor.hpp"

namespace tcupgan::nn {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    Tensor& ensure_grad();
};

using Var = std::shared_ptr<Node>;

/// A value that never receives gradients.
Var constant(Tensor value);
/// A graph leaf; gradients accumulate into `grad` when `requires_grad`.
Var leaf(Tensor value, bool requires_grad);

/// 2D cross-correlation. weight: (Cout, Cin, k, k); bias: (Cout, 1, 1, 1) or null.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding);
Var add(const Var& a, const Var& b);
Var sigmoid(const Var& x);
Var leaky_relu(const Var& x, float slope);
/// Per-sample normalization over (C, H, W) with per-channel affine (C, 1, 1, 1).
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps);
Var concat_channels(std::span<const Var> parts);
Var concat_channels(std::initializer_list<Var> parts);
Var concat_batch(std::span<const Var> parts);
Var slice_channels(const Var& x, int begin, int count);
Var upsample_nearest2x(const Var& x);

/// Fused LSTM cell nonlinearity. `gates` holds pre-activations ordered
/// [input, forget, output, candidate], each C channels; `c_prev` may be null
/// (zero state). Returns the channel concatenation [h | c] with 2C channels.
Var lstm_cell(const Var& gates, const Var& c_prev);

/// Runs reverse accumulation from each (node, upstream gradient) seed.
void backward(std::span<const std::pair<Var, Tensor>> seeds);

}  // namespace tcupgan::nn
