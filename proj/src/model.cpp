#include "tcupgan/model.hpp"

#include <cmath>
#include <random>

namespace tcupgan {

namespace {

std::string enc_name(int level) { return "enc" + std::to_string(level); }
std::string dec_name(int level) { return "dec" + std::to_string(level); }
std::string stage_name(std::size_t i) { return "stage" + std::to_string(i); }

struct LstmSpec {
    std::string name;
    int in_channels;
    int hidden;
    int stride;
};

std::vector<LstmSpec> generator_layers(const GeneratorConfig& cfg) {
    const auto& w = cfg.encoder_widths;
    const int levels = cfg.levels();
    std::vector<LstmSpec> layers;
    for (int k = 1; k <= levels; ++k) {
        layers.push_back({enc_name(k), k == 1 ? 1 : w[k - 2], w[k - 1], 2});
    }
    layers.push_back({"bottleneck", 2 * w[levels - 1], cfg.bottleneck_width, 1});
    int prev = cfg.bottleneck_width;
    for (int r = levels - 1; r >= 1; --r) {
        layers.push_back({dec_name(r), prev + 2 * w[r - 1], w[r - 1], 1});
        prev = w[r - 1];
    }
    layers.push_back({dec_name(0), prev + 1, w[0], 1});
    return layers;
}

void check_layout(const ParameterSet& tensors, const std::map<std::string, Shape>& layout,
                  const char* what) {
    for (const auto& [name, shape] : layout) {
        auto it = tensors.find(name);
        if (it == tensors.end()) {
            throw ValidationError(std::string(what) + " parameter '" + name + "' is missing");
        }
        if (!(it->second.shape() == shape)) {
            throw ValidationError(std::string(what) + " parameter '" + name + "' has shape " +
                                  it->second.shape().str() + ", architecture expects " +
                                  shape.str());
        }
    }
    if (tensors.size() != layout.size()) {
        throw ValidationError(std::string(what) + " parameter set has unexpected entries");
    }
}

Tensor uniform_tensor(Shape shape, float bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<float> dist(-bound, bound);
    Tensor t(shape);
    for (float& v : t.values()) v = dist(rng);
    return t;
}

const nn::Var& param(const ParamVars& vars, const std::string& name) {
    auto it = vars.find(name);
    if (it == vars.end()) throw ValidationError("parameter '" + name + "' not bound");
    return it->second;
}

struct LayerVars {
    nn::Var h;
    nn::Var c;
};

nn::Var lstm_layer(const ParamVars& vars, const std::string& name, const nn::Var& input,
                   const LayerVars& prev, int stride, int kernel) {
    const int pad = kernel / 2;
    nn::Var gates = nn::conv2d(input, param(vars, name + ".wx"), param(vars, name + ".b"), stride,
                               pad);
    if (prev.h) {
        gates = nn::add(gates, nn::conv2d(prev.h, param(vars, name + ".wh"), nullptr, 1, pad));
    }
    return nn::lstm_cell(gates, prev.c);
}

}  // namespace

void GeneratorConfig::validate() const {
    if (encoder_widths.empty()) throw ValidationError("generator needs at least one level");
    for (int w : encoder_widths) {
        if (w <= 0) throw ValidationError("generator widths must be positive");
    }
    if (bottleneck_width <= 0) throw ValidationError("bottleneck width must be positive");
    if (kernel <= 0 || kernel % 2 == 0) throw ValidationError("kernel size must be odd");
}

nlohmann::json GeneratorConfig::to_json() const {
    return {{"encoder_widths", encoder_widths},
            {"bottleneck_width", bottleneck_width},
            {"kernel", kernel}};
}

GeneratorConfig GeneratorConfig::from_json(const nlohmann::json& j) {
    GeneratorConfig cfg;
    cfg.encoder_widths = j.value("encoder_widths", cfg.encoder_widths);
    cfg.bottleneck_width = j.value("bottleneck_width", cfg.bottleneck_width);
    cfg.kernel = j.value("kernel", cfg.kernel);
    cfg.validate();
    return cfg;
}

void DiscriminatorConfig::validate() const {
    if (widths.empty() || widths.back() != 1) {
        throw ValidationError("discriminator must end in a single-channel stage");
    }
    for (int w : widths) {
        if (w <= 0) throw ValidationError("discriminator widths must be positive");
    }
    if (kernel <= 0 || kernel % 2 == 0) throw ValidationError("kernel size must be odd");
    if (!(leaky_slope >= 0.0f) || !(norm_eps > 0.0f)) {
        throw ValidationError("invalid discriminator activation or normalization settings");
    }
}

nlohmann::json DiscriminatorConfig::to_json() const {
    return {{"widths", widths},
            {"kernel", kernel},
            {"leaky_slope", leaky_slope},
            {"norm_eps", norm_eps}};
}

DiscriminatorConfig DiscriminatorConfig::from_json(const nlohmann::json& j) {
    DiscriminatorConfig cfg;
    cfg.widths = j.value("widths", cfg.widths);
    cfg.kernel = j.value("kernel", cfg.kernel);
    cfg.leaky_slope = j.value("leaky_slope", cfg.leaky_slope);
    cfg.norm_eps = j.value("norm_eps", cfg.norm_eps);
    cfg.validate();
    return cfg;
}

std::map<std::string, Shape> generator_layout(const GeneratorConfig& cfg) {
    cfg.validate();
    std::map<std::string, Shape> layout;
    const int k = cfg.kernel;
    for (const auto& l : generator_layers(cfg)) {
        layout[l.name + ".wx"] = {4 * l.hidden, l.in_channels, k, k};
        layout[l.name + ".wh"] = {4 * l.hidden, l.hidden, k, k};
        layout[l.name + ".b"] = {4 * l.hidden, 1, 1, 1};
    }
    layout["head.w"] = {1, cfg.encoder_widths.front(), 1, 1};
    layout["head.b"] = {1, 1, 1, 1};
    return layout;
}

std::map<std::string, Shape> discriminator_layout(const DiscriminatorConfig& cfg) {
    cfg.validate();
    std::map<std::string, Shape> layout;
    int in = 2;
    for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
        const int out = cfg.widths[i];
        layout[stage_name(i) + ".w"] = {out, in, cfg.kernel, cfg.kernel};
        layout[stage_name(i) + ".b"] = {out, 1, 1, 1};
        if (i + 1 < cfg.widths.size()) {
            layout[stage_name(i) + ".ln_gamma"] = {out, 1, 1, 1};
            layout[stage_name(i) + ".ln_beta"] = {out, 1, 1, 1};
        }
        in = out;
    }
    return layout;
}

void GeneratorParams::validate() const { check_layout(tensors, generator_layout(config), "generator"); }

void DiscriminatorParams::validate() const {
    check_layout(tensors, discriminator_layout(config), "discriminator");
}

GeneratorParams init_generator(const GeneratorConfig& config, std::uint64_t seed) {
    GeneratorParams params{config, {}};
    std::mt19937_64 rng(seed);
    const int k = config.kernel;
    for (const auto& l : generator_layers(config)) {
        const float bound =
            1.0f / std::sqrt(static_cast<float>((l.in_channels + l.hidden) * k * k));
        params.tensors[l.name + ".wx"] = uniform_tensor({4 * l.hidden, l.in_channels, k, k}, bound, rng);
        params.tensors[l.name + ".wh"] = uniform_tensor({4 * l.hidden, l.hidden, k, k}, bound, rng);
        Tensor bias({4 * l.hidden, 1, 1, 1});
        // Forget-gate bias of 1 keeps the cell state flowing along depth early in training.
        for (int i = l.hidden; i < 2 * l.hidden; ++i) bias.data()[i] = 1.0f;
        params.tensors[l.name + ".b"] = std::move(bias);
    }
    const float head_bound = 1.0f / std::sqrt(static_cast<float>(config.encoder_widths.front()));
    params.tensors["head.w"] = uniform_tensor({1, config.encoder_widths.front(), 1, 1}, head_bound, rng);
    params.tensors["head.b"] = Tensor({1, 1, 1, 1});
    params.validate();
    return params;
}

DiscriminatorParams init_discriminator(const DiscriminatorConfig& config, std::uint64_t seed) {
    DiscriminatorParams params{config, {}};
    std::mt19937_64 rng(seed);
    for (const auto& [name, shape] : discriminator_layout(config)) {
        if (name.ends_with(".w")) {
            const float bound = 1.0f / std::sqrt(static_cast<float>(shape.c * shape.h * shape.w));
            params.tensors[name] = uniform_tensor(shape, bound, rng);
        } else if (name.ends_with(".ln_gamma")) {
            params.tensors[name] = Tensor(shape, 1.0f);
        } else {
            params.tensors[name] = Tensor(shape);
        }
    }
    params.validate();
    return params;
}

ParamVars bind_parameters(const ParameterSet& tensors, bool requires_grad) {
    ParamVars vars;
    for (const auto& [name, t] : tensors) vars.emplace(name, nn::leaf(t, requires_grad));
    return vars;
}

std::pair<Tensor, LevelState> conv_lstm_step(const Tensor& x, const ConvLstmWeights& weights,
                                             const LevelState& state) {
    const Shape xs = x.shape();
    const int hidden = weights.hidden();
    const int k = weights.input_kernel.shape().h;
    if (weights.input_kernel.shape().c != xs.c) {
        throw ShapeError("conv_lstm_step: input has " + std::to_string(xs.c) +
                         " channels, kernel expects " +
                         std::to_string(weights.input_kernel.shape().c));
    }
    if (!(weights.hidden_kernel.shape() == Shape{4 * hidden, hidden, k, k}) ||
        weights.bias.size() != static_cast<std::size_t>(4 * hidden)) {
        throw ShapeError("conv_lstm_step: inconsistent gate parameter shapes");
    }
    if (xs.h % weights.stride != 0 || xs.w % weights.stride != 0) {
        throw ShapeError("conv_lstm_step: input " + xs.str() + " not divisible by stride " +
                         std::to_string(weights.stride));
    }
    const Shape expected{xs.n, hidden, xs.h / weights.stride, xs.w / weights.stride};
    const bool zero_state = state.h.empty() && state.c.empty();
    if (!zero_state && (!(state.h.shape() == expected) || !(state.c.shape() == expected))) {
        throw ShapeError("conv_lstm_step: state " + state.h.shape().str() + "/" +
                         state.c.shape().str() + " does not match expected " + expected.str() +
                         " for input " + xs.str());
    }
    ParamVars vars{{"cell.wx", nn::constant(weights.input_kernel)},
                   {"cell.wh", nn::constant(weights.hidden_kernel)},
                   {"cell.b", nn::constant(weights.bias)}};
    LayerVars prev;
    if (!zero_state) {
        prev.h = nn::constant(state.h);
        prev.c = nn::constant(state.c);
    }
    nn::Var hc = lstm_layer(vars, "cell", nn::constant(x), prev, weights.stride, k);
    LevelState next{nn::slice_channels(hc, 0, hidden)->value,
                    nn::slice_channels(hc, hidden, hidden)->value};
    Tensor h = next.h;
    return {std::move(h), std::move(next)};
}

namespace {

// Zero mean, unit variance per sample of one depth step.
Tensor standardize_slice(const Tensor& step) {
    Tensor out = step;
    for (int n = 0; n < step.shape().n; ++n) {
        auto v = out.sample(n);
        double sum = 0.0;
        double sq = 0.0;
        for (float x : v) {
            sum += x;
            sq += static_cast<double>(x) * x;
        }
        const double mean = sum / v.size();
        const double var = std::max(0.0, sq / v.size() - mean * mean);
        const double inv = 1.0 / std::sqrt(var + 1e-6);
        for (float& x : v) x = static_cast<float>((x - mean) * inv);
    }
    return out;
}

}  // namespace

GeneratorGraph generator_graph(const GeneratorConfig& cfg, const ParamVars& vars,
                               std::span<const Tensor> steps) {
    const auto layers = generator_layers(cfg);
    const int levels = cfg.levels();
    std::vector<LayerVars> state(layers.size());
    GeneratorGraph out;
    out.predictions.reserve(steps.size());

    for (const Tensor& step : steps) {
        const Shape s = step.shape();
        if (s.c != 1) throw ShapeError("generator input must have one channel, got " + s.str());
        if (s.h % cfg.required_divisor() != 0 || s.w % cfg.required_divisor() != 0) {
            throw ValidationError("generator input " + std::to_string(s.h) + "x" +
                                  std::to_string(s.w) + " must be divisible by " +
                                  std::to_string(cfg.required_divisor()) + " (2^levels)");
        }
        const nn::Var x = nn::constant(standardize_slice(step));
        std::vector<nn::Var> skips(levels + 1);
        nn::Var current = x;
        std::size_t li = 0;
        auto advance = [&](const nn::Var& input) {
            const auto& spec = layers[li];
            nn::Var hc = lstm_layer(vars, spec.name, input, state[li], spec.stride, cfg.kernel);
            state[li] = {nn::slice_channels(hc, 0, spec.hidden),
                         nn::slice_channels(hc, spec.hidden, spec.hidden)};
            ++li;
            return hc;
        };
        for (int k = 1; k <= levels; ++k) {
            skips[k] = advance(current);
            current = state[li - 1].h;
        }
        // The deepest encoder level hands its full (h, c) to the bottleneck.
        advance(skips[levels]);
        current = state[li - 1].h;
        for (int r = levels - 1; r >= 1; --r) {
            advance(nn::concat_channels({nn::upsample_nearest2x(current), skips[r]}));
            current = state[li - 1].h;
        }
        advance(nn::concat_channels({nn::upsample_nearest2x(current), x}));
        current = state[li - 1].h;
        nn::Var logits = nn::conv2d(current, param(vars, "head.w"), param(vars, "head.b"), 1, 0);
        out.predictions.push_back(nn::sigmoid(logits));
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
        out.final_state.names.push_back(layers[i].name);
        LevelState ls;
        if (state[i].h) {
            ls.h = state[i].h->value;
            ls.c = state[i].c->value;
        }
        out.final_state.levels.push_back(std::move(ls));
    }
    return out;
}

nn::Var discriminator_graph(const DiscriminatorConfig& cfg, const ParamVars& vars,
                            const nn::Var& input) {
    const Shape s = input->value.shape();
    if (s.c != 2) throw ShapeError("discriminator input must have 2 channels, got " + s.str());
    if (s.h % cfg.required_divisor() != 0 || s.w % cfg.required_divisor() != 0) {
        throw ValidationError("discriminator input must be divisible by " +
                              std::to_string(cfg.required_divisor()));
    }
    nn::Var x = input;
    const int pad = cfg.kernel / 2;
    for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
        const std::string name = stage_name(i);
        x = nn::conv2d(x, param(vars, name + ".w"), param(vars, name + ".b"), 2, pad);
        if (i + 1 < cfg.widths.size()) {
            x = nn::layer_norm(x, param(vars, name + ".ln_gamma"), param(vars, name + ".ln_beta"),
                               cfg.norm_eps);
            x = nn::leaky_relu(x, cfg.leaky_slope);
        }
    }
    return nn::sigmoid(x);
}

GeneratorOutput generator_forward(const GeneratorParams& params, const ImageCube& cube) {
    cube.validate();
    const Volume& v = cube.volume;
    std::vector<Tensor> steps;
    steps.reserve(v.depth);
    for (int d = 0; d < v.depth; ++d) {
        auto sl = v.slice(d);
        steps.emplace_back(Shape{1, 1, v.height, v.width}, std::vector<float>(sl.begin(), sl.end()));
    }
    const ParamVars vars = bind_parameters(params.tensors, false);
    GeneratorGraph graph = generator_graph(params.config, vars, steps);
    GeneratorOutput out;
    out.prediction.volume = Volume(v.depth, v.height, v.width);
    for (int d = 0; d < v.depth; ++d) {
        const Tensor& p = graph.predictions[d]->value;
        std::copy(p.data(), p.data() + p.size(), out.prediction.volume.slice(d).begin());
    }
    out.final_state = std::move(graph.final_state);
    return out;
}

PatchScoreGrid discriminator_forward(const DiscriminatorParams& params, const ImageCube& cube,
                                     const Volume& mask) {
    cube.validate();
    const Volume& v = cube.volume;
    if (!mask.same_shape(v)) {
        throw ShapeError("discriminator: mask " + mask.shape_str() + " does not match image " +
                         v.shape_str());
    }
    Tensor input({v.depth, 2, v.height, v.width});
    for (int d = 0; d < v.depth; ++d) {
        auto dst = input.sample(d);
        auto img = v.slice(d);
        auto msk = mask.slice(d);
        std::copy(img.begin(), img.end(), dst.begin());
        std::copy(msk.begin(), msk.end(), dst.begin() + v.slice_size());
    }
    const ParamVars vars = bind_parameters(params.tensors, false);
    nn::Var out = discriminator_graph(params.config, vars, nn::constant(std::move(input)));
    const Shape os = out->value.shape();
    PatchScoreGrid grid{v.depth, os.h, os.w, {}};
    grid.scores.assign(out->value.data(), out->value.data() + out->value.size());
    return grid;
}

}  // namespace tcupgan
