#pragma once

// Networks: a ConvLSTM U-Net generator that walks the depth axis of
// an image cube, and a patch discriminator built from depth-1 convolutions so
// every slice is scored independently.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tcupgan/autograd.hpp"
#include "tcupgan/cube.hpp"
#include "tcupgan/tensor.hpp"

namespace tcupgan {

using ParameterSet = std::map<std::string, Tensor>;

struct GeneratorConfig {
    /// Encoder ConvLSTM widths, one per level; each level halves H and W.
    std::vector<int> encoder_widths{16, 32, 64, 128};
    int bottleneck_width = 128;
    int kernel = 3;

    int levels() const { return static_cast<int>(encoder_widths.size()); }
    int required_divisor() const { return 1 << levels(); }
    void validate() const;
    nlohmann::json to_json() const;
    static GeneratorConfig from_json(const nlohmann::json& j);
    bool operator==(const GeneratorConfig&) const = default;
};

struct DiscriminatorConfig {
    /// Output widths of the stride-2 stages; the last must be 1.
    std::vector<int> widths{32, 64, 128, 256, 1};
    int kernel = 3;
    float leaky_slope = 0.2f;
    float norm_eps = 1e-5f;

    int required_divisor() const { return 1 << static_cast<int>(widths.size()); }
    void validate() const;
    nlohmann::json to_json() const;
    static DiscriminatorConfig from_json(const nlohmann::json& j);
    bool operator==(const DiscriminatorConfig&) const = default;
};

struct GeneratorParams {
    GeneratorConfig config;
    ParameterSet tensors;

    /// Throws ValidationError when a tensor is missing or mis-shaped for `config`.
    void validate() const;
};

struct DiscriminatorParams {
    DiscriminatorConfig config;
    ParameterSet tensors;

    void validate() const;
};

/// Expected tensor shapes for an architecture, keyed by parameter name.
std::map<std::string, Shape> generator_layout(const GeneratorConfig& config);
std::map<std::string, Shape> discriminator_layout(const DiscriminatorConfig& config);

GeneratorParams init_generator(const GeneratorConfig& config, std::uint64_t seed);
DiscriminatorParams init_discriminator(const DiscriminatorConfig& config, std::uint64_t seed);

/// Hidden and cell state of one ConvLSTM layer at the current depth step.
struct LevelState {
    Tensor h;
    Tensor c;
};

/// One LevelState per ConvLSTM layer, ordered encoder, bottleneck, decoder.
struct RecurrentState {
    std::vector<std::string> names;
    std::vector<LevelState> levels;
};

struct ConvLstmWeights {
    Tensor input_kernel;   // (4C, Cin, k, k)
    Tensor hidden_kernel;  // (4C, C, k, k)
    Tensor bias;           // (4C, 1, 1, 1)
    int stride = 1;

    int hidden() const { return input_kernel.shape().n / 4; }
};

/// One ConvLSTM update. Gates are convolutions over the input (with `stride`)
/// plus convolutions over the previous hidden state; an empty `state` is the
/// all-zero initial state. Returns (h, state') with h == state'.h.
std::pair<Tensor, LevelState> conv_lstm_step(const Tensor& x, const ConvLstmWeights& weights,
                                             const LevelState& state);

struct GeneratorOutput {
    PredictionCube prediction;
    RecurrentState final_state;
};

GeneratorOutput generator_forward(const GeneratorParams& params, const ImageCube& cube);

PatchScoreGrid discriminator_forward(const DiscriminatorParams& params, const ImageCube& cube,
                                     const Volume& mask);

// Graph-level entry points used by training.

using ParamVars = std::map<std::string, nn::Var>;

ParamVars bind_parameters(const ParameterSet& tensors, bool requires_grad);

struct GeneratorGraph {
    /// One (N, 1, H, W) sigmoid output per depth step.
    std::vector<nn::Var> predictions;
    RecurrentState final_state;
};

/// `steps[t]` is the (N, 1, H, W) batch of slice t.
GeneratorGraph generator_graph(const GeneratorConfig& config, const ParamVars& params,
                               std::span<const Tensor> steps);

/// (B, 2, H, W) image+mask slices -> (B, 1, H/2^S, W/2^S) patch probabilities.
nn::Var discriminator_graph(const DiscriminatorConfig& config, const ParamVars& params,
                            const nn::Var& input);

}  // namespace tcupgan
