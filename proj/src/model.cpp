#include "produce/model.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "produce/base64.hpp"
#include "produce/error.hpp"
#include "produce/rng.hpp"

namespace produce {

namespace {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

constexpr int kFormatVersion = 1;

LayerSpec conv_layer(std::string name, LayerKind kind, std::size_t k, std::size_t stride,
                     std::size_t cin, std::size_t cout) {
    LayerSpec l;
    l.name = std::move(name);
    l.kind = kind;
    l.kernel_h = k;
    l.kernel_w = k;
    l.stride = stride;
    l.padding = Padding::same;
    l.in_channels = cin;
    l.out_channels = cout;
    return l;
}

LayerSpec plain_layer(std::string name, LayerKind kind) {
    LayerSpec l;
    l.name = std::move(name);
    l.kind = kind;
    return l;
}

LayerSpec dense_layer(std::string name, std::size_t inputs, std::size_t outputs) {
    LayerSpec l;
    l.name = std::move(name);
    l.kind = LayerKind::dense;
    l.in_channels = inputs;
    l.out_channels = outputs;
    return l;
}

ConvKernel to_kernel(const LayerSpec& layer, const std::vector<float>& weights) {
    switch (layer.kind) {
    case LayerKind::conv_depthwise:
        return ConvKernel::depthwise(layer.kernel_h, layer.kernel_w, layer.in_channels, weights,
                                     layer.stride, layer.padding);
    case LayerKind::conv_pointwise:
        return ConvKernel::pointwise(layer.in_channels, layer.out_channels, weights);
    default:
        return ConvKernel::standard(layer.kernel_h, layer.kernel_w, layer.in_channels,
                                    layer.out_channels, weights, layer.stride, layer.padding);
    }
}

struct FanInOut {
    double in;
    double out;
};

FanInOut fans(const LayerSpec& l) {
    const auto area = static_cast<double>(l.kernel_h * l.kernel_w);
    switch (l.kind) {
    case LayerKind::conv_standard:
        return {area * static_cast<double>(l.in_channels), area * static_cast<double>(l.out_channels)};
    case LayerKind::conv_depthwise:
        return {area, area};
    case LayerKind::conv_pointwise:
    case LayerKind::dense:
        return {static_cast<double>(l.in_channels), static_cast<double>(l.out_channels)};
    default:
        return {0.0, 0.0};
    }
}

// Offset of a quoted token in the raw document, for error reporting.
std::size_t locate(const std::string& text, const std::string& token) {
    const auto pos = text.find('"' + token + '"');
    return pos == std::string::npos ? 0 : pos;
}

std::string encode_floats(const std::vector<float>& values) {
    std::vector<std::uint8_t> bytes(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto bits = std::bit_cast<std::uint32_t>(values[i]);
        bytes[4 * i + 0] = static_cast<std::uint8_t>(bits);
        bytes[4 * i + 1] = static_cast<std::uint8_t>(bits >> 8);
        bytes[4 * i + 2] = static_cast<std::uint8_t>(bits >> 16);
        bytes[4 * i + 3] = static_cast<std::uint8_t>(bits >> 24);
    }
    return base64::encode(bytes);
}

std::vector<float> decode_floats(const std::string& text, const std::string& b64,
                                 const std::string& layer, const char* field,
                                 std::size_t expected) {
    std::vector<std::uint8_t> bytes;
    try {
        bytes = base64::decode(b64);
    } catch (const ParseError& e) {
        const auto base = text.find(b64);
        const std::size_t at = (base == std::string::npos ? 0 : base) + e.offset();
        throw ParseError(fmt::format("layer '{}': {} is not valid base64", layer, field), at);
    }
    if (bytes.size() % 4 != 0) {
        throw IntegrityError(fmt::format("layer '{}': {} holds {} bytes, not a whole number of floats",
                                         layer, field, bytes.size()));
    }
    if (bytes.size() / 4 != expected) {
        throw IntegrityError(fmt::format("layer '{}': {} holds {} floats, geometry needs {}", layer,
                                         field, bytes.size() / 4, expected));
    }
    std::vector<float> values(expected);
    for (std::size_t i = 0; i < expected; ++i) {
        const std::uint32_t bits = static_cast<std::uint32_t>(bytes[4 * i]) |
                                   (static_cast<std::uint32_t>(bytes[4 * i + 1]) << 8) |
                                   (static_cast<std::uint32_t>(bytes[4 * i + 2]) << 16) |
                                   (static_cast<std::uint32_t>(bytes[4 * i + 3]) << 24);
        values[i] = std::bit_cast<float>(bits);
    }
    return values;
}

} // namespace

const char* to_string(LayerKind kind) noexcept {
    switch (kind) {
    case LayerKind::conv_standard:
        return "conv_standard";
    case LayerKind::conv_depthwise:
        return "conv_depthwise";
    case LayerKind::conv_pointwise:
        return "conv_pointwise";
    case LayerKind::relu:
        return "relu";
    case LayerKind::global_avg_pool:
        return "global_avg_pool";
    case LayerKind::dense:
        return "dense";
    case LayerKind::softmax:
        return "softmax";
    }
    return "unknown";
}

LayerKind layer_kind_from_string(const std::string& name) {
    for (auto kind : {LayerKind::conv_standard, LayerKind::conv_depthwise, LayerKind::conv_pointwise,
                      LayerKind::relu, LayerKind::global_avg_pool, LayerKind::dense,
                      LayerKind::softmax}) {
        if (name == to_string(kind)) {
            return kind;
        }
    }
    throw InvalidArgument(fmt::format("unknown layer kind '{}'", name));
}

bool is_conv(LayerKind kind) noexcept {
    return kind == LayerKind::conv_standard || kind == LayerKind::conv_depthwise ||
           kind == LayerKind::conv_pointwise;
}

bool has_parameters(LayerKind kind) noexcept {
    return is_conv(kind) || kind == LayerKind::dense;
}

std::size_t kernel_size(const LayerSpec& l) noexcept {
    switch (l.kind) {
    case LayerKind::conv_standard:
        return l.kernel_h * l.kernel_w * l.in_channels * l.out_channels;
    case LayerKind::conv_depthwise:
        return l.kernel_h * l.kernel_w * l.in_channels;
    case LayerKind::conv_pointwise:
    case LayerKind::dense:
        return l.in_channels * l.out_channels;
    default:
        return 0;
    }
}

std::size_t bias_size(const LayerSpec& l) noexcept {
    return l.kind == LayerKind::dense ? l.out_channels : 0;
}

std::vector<std::vector<std::size_t>> validate_spec(const ModelSpec& spec) {
    const Shape3& in = spec.input_shape;
    if (in.height == 0 || in.width == 0 || in.channels == 0) {
        throw InvalidArgument("model input shape must have positive dimensions");
    }
    if (spec.layers.empty()) {
        throw InvalidArgument("model has no layers");
    }
    std::vector<std::size_t> shape{in.height, in.width, in.channels};
    std::vector<std::vector<std::size_t>> shapes;
    std::set<std::string> names;
    bool saw_conv = false;

    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        auto fail = [&](const std::string& why) {
            return InvalidArgument(fmt::format("layer {} '{}' ({}): {}", i, l.name, to_string(l.kind), why));
        };
        if (l.name.empty()) {
            throw fail("layer name is empty");
        }
        if (!names.insert(l.name).second) {
            throw fail("duplicate layer name");
        }
        if (is_conv(l.kind)) {
            saw_conv = true;
            if (shape.size() != 3) {
                throw fail("convolution needs a rank-3 input");
            }
            if (l.kernel_h == 0 || l.kernel_w == 0 || l.stride == 0) {
                throw fail("kernel extent and stride must be positive");
            }
            if (l.in_channels != shape[2]) {
                throw fail(fmt::format("in_channels {} but incoming tensor has {} channels",
                                       l.in_channels, shape[2]));
            }
            if (l.out_channels == 0) {
                throw fail("out_channels must be positive");
            }
            if (l.kind == LayerKind::conv_depthwise && l.out_channels != l.in_channels) {
                throw fail("depthwise out_channels must equal in_channels");
            }
            if (l.kind == LayerKind::conv_pointwise &&
                (l.kernel_h != 1 || l.kernel_w != 1 || l.stride != 1)) {
                throw fail("pointwise convolution must be 1x1 with stride 1");
            }
            std::size_t h = 0;
            std::size_t w = 0;
            try {
                h = conv_output_extent(shape[0], l.kernel_h, l.stride, l.padding);
                w = conv_output_extent(shape[1], l.kernel_w, l.stride, l.padding);
            } catch (const InvalidArgument& e) {
                throw fail(e.what());
            }
            shape = {h, w, l.out_channels};
        } else if (l.kind == LayerKind::global_avg_pool) {
            if (shape.size() != 3) {
                throw fail("global_avg_pool needs a rank-3 input");
            }
            shape = {shape[2]};
        } else if (l.kind == LayerKind::dense) {
            if (shape.size() != 1) {
                throw fail("dense needs a rank-1 input");
            }
            if (l.in_channels != shape[0]) {
                throw fail(fmt::format("expects {} inputs but incoming vector has {}", l.in_channels,
                                       shape[0]));
            }
            if (l.out_channels == 0) {
                throw fail("dense needs at least one output");
            }
            shape = {l.out_channels};
        } else if (l.kind == LayerKind::softmax) {
            if (shape.size() != 1) {
                throw fail("softmax needs a rank-1 input");
            }
            if (i + 1 != spec.layers.size()) {
                throw fail("softmax must be the final layer");
            }
        }
        shapes.push_back(shape);
    }

    if (!saw_conv) {
        throw InvalidArgument("model must contain at least one convolution");
    }
    if (spec.layers.back().kind != LayerKind::softmax) {
        throw InvalidArgument("final layer must be softmax");
    }
    if (shape.size() != 1 || shape[0] != spec.class_names.size()) {
        throw InvalidArgument(fmt::format("softmax produces {} outputs but the model names {} classes",
                                          shape.size() == 1 ? shape[0] : 0, spec.class_names.size()));
    }
    return shapes;
}

std::size_t weighted_layer_count(const ModelSpec& spec) {
    return static_cast<std::size_t>(std::count_if(spec.layers.begin(), spec.layers.end(),
                                                  [](const LayerSpec& l) { return has_parameters(l.kind); }));
}

ordered_json spec_to_json(const ModelSpec& spec) {
    ordered_json layers = ordered_json::array();
    for (const LayerSpec& l : spec.layers) {
        ordered_json j;
        j["name"] = l.name;
        j["kind"] = to_string(l.kind);
        if (is_conv(l.kind)) {
            j["kernel"] = {l.kernel_h, l.kernel_w};
            j["stride"] = l.stride;
            j["padding"] = to_string(l.padding);
            j["in_channels"] = l.in_channels;
            j["out_channels"] = l.out_channels;
        } else if (l.kind == LayerKind::dense) {
            j["inputs"] = l.in_channels;
            j["outputs"] = l.out_channels;
        }
        layers.push_back(std::move(j));
    }
    ordered_json j;
    j["name"] = spec.name;
    j["input_shape"] = {spec.input_shape.height, spec.input_shape.width, spec.input_shape.channels};
    j["layers"] = std::move(layers);
    return j;
}

ModelSpec spec_from_json(const json& j) {
    ModelSpec spec;
    spec.name = j.value("name", std::string{});
    const auto& shape = j.at("input_shape");
    if (!shape.is_array() || shape.size() != 3) {
        throw InvalidArgument("input_shape must be [height, width, channels]");
    }
    spec.input_shape = {shape[0].get<std::size_t>(), shape[1].get<std::size_t>(),
                        shape[2].get<std::size_t>()};
    for (const auto& lj : j.at("layers")) {
        LayerSpec l;
        l.name = lj.at("name").get<std::string>();
        l.kind = layer_kind_from_string(lj.at("kind").get<std::string>());
        if (is_conv(l.kind)) {
            const auto& k = lj.at("kernel");
            l.kernel_h = k.at(0).get<std::size_t>();
            l.kernel_w = k.at(1).get<std::size_t>();
            l.stride = lj.value("stride", std::size_t{1});
            const auto padding = lj.value("padding", std::string{"same"});
            if (padding != "same" && padding != "valid") {
                throw InvalidArgument(fmt::format("layer '{}': unknown padding '{}'", l.name, padding));
            }
            l.padding = padding == "same" ? Padding::same : Padding::valid;
            l.in_channels = lj.at("in_channels").get<std::size_t>();
            l.out_channels = lj.at("out_channels").get<std::size_t>();
        } else if (l.kind == LayerKind::dense) {
            l.in_channels = lj.at("inputs").get<std::size_t>();
            l.out_channels = lj.at("outputs").get<std::size_t>();
        }
        spec.layers.push_back(std::move(l));
    }
    if (j.contains("class_names")) {
        spec.class_names = j.at("class_names").get<std::vector<std::string>>();
    } else if (j.contains("num_classes")) {
        spec.class_names = placeholder_class_names(j.at("num_classes").get<std::size_t>());
    }
    validate_spec(spec);
    return spec;
}

ModelSpec load_spec(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError(fmt::format("cannot open spec file {}", path.string()));
    }
    try {
        return spec_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
        throw ParseError(fmt::format("{}: {}", path.string(), e.what()), e.byte);
    } catch (const json::exception& e) {
        throw InvalidArgument(fmt::format("{}: {}", path.string(), e.what()));
    }
}

Model::Model(ModelSpec spec, std::map<std::string, LayerWeights> weights, std::uint64_t seed)
    : spec_(std::move(spec)), weights_(std::move(weights)), seed_(seed) {
    shapes_ = validate_spec(spec_);
    std::size_t bound = 0;
    for (const LayerSpec& l : spec_.layers) {
        if (!has_parameters(l.kind)) {
            continue;
        }
        const auto it = weights_.find(l.name);
        if (it == weights_.end()) {
            throw IntegrityError(fmt::format("layer '{}' has no weights", l.name));
        }
        if (it->second.kernel.size() != kernel_size(l)) {
            throw IntegrityError(fmt::format("layer '{}': kernel has {} values, geometry needs {}",
                                             l.name, it->second.kernel.size(), kernel_size(l)));
        }
        if (it->second.bias.size() != bias_size(l)) {
            throw IntegrityError(fmt::format("layer '{}': bias has {} values, geometry needs {}", l.name,
                                             it->second.bias.size(), bias_size(l)));
        }
        auto finite = [](float v) { return std::isfinite(v); };
        if (!std::all_of(it->second.kernel.begin(), it->second.kernel.end(), finite) ||
            !std::all_of(it->second.bias.begin(), it->second.bias.end(), finite)) {
            throw IntegrityError(fmt::format("layer '{}' has non-finite weights", l.name));
        }
        ++bound;
    }
    if (bound != weights_.size()) {
        throw IntegrityError("weights present for layers that do not take parameters");
    }
}

const LayerWeights& Model::weights_for(const std::string& layer) const {
    const auto it = weights_.find(layer);
    if (it == weights_.end()) {
        throw InvalidArgument(fmt::format("no weights for layer '{}'", layer));
    }
    return it->second;
}

const LayerSpec& Model::head_layer() const {
    for (auto it = spec_.layers.rbegin(); it != spec_.layers.rend(); ++it) {
        if (it->kind == LayerKind::dense) {
            return *it;
        }
    }
    throw InvalidArgument("model has no dense head");
}

Model initialize_model(ModelSpec spec, std::uint64_t seed) {
    validate_spec(spec);
    SplitMix64 rng(seed);
    std::map<std::string, LayerWeights> weights;
    for (const LayerSpec& l : spec.layers) {
        if (!has_parameters(l.kind)) {
            continue;
        }
        const FanInOut f = fans(l);
        const double r = std::sqrt(6.0 / (f.in + f.out));
        LayerWeights w;
        w.kernel.resize(kernel_size(l));
        for (float& v : w.kernel) {
            v = static_cast<float>((2.0 * rng.uniform() - 1.0) * r);
        }
        w.bias.assign(bias_size(l), 0.0f);
        weights.emplace(l.name, std::move(w));
    }
    return Model(std::move(spec), std::move(weights), seed);
}

std::vector<std::string> placeholder_class_names(std::size_t count) {
    std::vector<std::string> names;
    names.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        names.push_back(fmt::format("class_{}", i));
    }
    return names;
}

ModelSpec micro_mobilenet_spec(std::vector<std::string> class_names) {
    ModelSpec s;
    s.name = "MicroMobileNet";
    s.input_shape = {32, 32, 3};
    s.layers.push_back(conv_layer("conv0", LayerKind::conv_standard, 3, 1, 3, 8));
    s.layers.push_back(plain_layer("relu0", LayerKind::relu));
    std::size_t channels = 8;
    const std::size_t widths[] = {16, 32, 64};
    for (std::size_t b = 0; b < 3; ++b) {
        const auto id = std::to_string(b + 1);
        s.layers.push_back(conv_layer("block" + id + "_dw", LayerKind::conv_depthwise, 3, 2, channels, channels));
        s.layers.push_back(plain_layer("block" + id + "_dw_relu", LayerKind::relu));
        s.layers.push_back(conv_layer("block" + id + "_pw", LayerKind::conv_pointwise, 1, 1, channels, widths[b]));
        s.layers.push_back(plain_layer("block" + id + "_pw_relu", LayerKind::relu));
        channels = widths[b];
    }
    s.layers.push_back(plain_layer("pool", LayerKind::global_avg_pool));
    s.layers.push_back(dense_layer("head", channels, class_names.size()));
    s.layers.push_back(plain_layer("softmax", LayerKind::softmax));
    s.class_names = std::move(class_names);
    return s;
}

ModelSpec micro_standardnet_spec(std::vector<std::string> class_names) {
    ModelSpec s;
    s.name = "MicroStandardNet";
    s.input_shape = {32, 32, 3};
    s.layers.push_back(conv_layer("conv0", LayerKind::conv_standard, 3, 1, 3, 8));
    s.layers.push_back(plain_layer("relu0", LayerKind::relu));
    std::size_t channels = 8;
    const std::size_t widths[] = {16, 32, 64};
    for (std::size_t b = 0; b < 3; ++b) {
        const auto id = std::to_string(b + 1);
        s.layers.push_back(conv_layer("block" + id + "_conv", LayerKind::conv_standard, 3, 2, channels, widths[b]));
        s.layers.push_back(plain_layer("block" + id + "_relu", LayerKind::relu));
        channels = widths[b];
    }
    s.layers.push_back(plain_layer("pool", LayerKind::global_avg_pool));
    s.layers.push_back(dense_layer("head", channels, class_names.size()));
    s.layers.push_back(plain_layer("softmax", LayerKind::softmax));
    s.class_names = std::move(class_names);
    return s;
}

Model build_micro_mobilenet(std::size_t num_classes, std::uint64_t seed) {
    if (num_classes < 2) {
        throw InvalidArgument(fmt::format("num_classes must be >= 2, got {}", num_classes));
    }
    return build_micro_mobilenet(placeholder_class_names(num_classes), seed);
}

Model build_micro_mobilenet(std::vector<std::string> class_names, std::uint64_t seed) {
    if (class_names.size() < 2) {
        throw InvalidArgument(fmt::format("num_classes must be >= 2, got {}", class_names.size()));
    }
    return initialize_model(micro_mobilenet_spec(std::move(class_names)), seed);
}

Model build_micro_standardnet(std::size_t num_classes, std::uint64_t seed) {
    if (num_classes < 2) {
        throw InvalidArgument(fmt::format("num_classes must be >= 2, got {}", num_classes));
    }
    return build_micro_standardnet(placeholder_class_names(num_classes), seed);
}

Model build_micro_standardnet(std::vector<std::string> class_names, std::uint64_t seed) {
    if (class_names.size() < 2) {
        throw InvalidArgument(fmt::format("num_classes must be >= 2, got {}", class_names.size()));
    }
    return initialize_model(micro_standardnet_spec(std::move(class_names)), seed);
}

std::vector<ScoredClass> rank_scores(std::span<const float> scores) {
    std::vector<ScoredClass> ranking(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        ranking[i] = {i, scores[i]};
    }
    std::stable_sort(ranking.begin(), ranking.end(),
                     [](const ScoredClass& a, const ScoredClass& b) { return a.score > b.score; });
    return ranking;
}

namespace {

// Runs layers [0, stop) over the image.
Tensor run_layers(const Model& model, const Tensor& image, std::size_t stop, OpCounter* counter) {
    const Shape3& in = model.spec().input_shape;
    if (image.rank() != 3 || image.height() != in.height || image.width() != in.width ||
        image.channels() != in.channels) {
        throw InvalidArgument(fmt::format("image shape {} does not match model input {}x{}x{}",
                                          image.shape_string(), in.height, in.width, in.channels));
    }
    Tensor x = image;
    for (std::size_t i = 0; i < stop; ++i) {
        const LayerSpec& l = model.spec().layers[i];
        switch (l.kind) {
        case LayerKind::conv_standard:
            x = conv2d(x, to_kernel(l, model.weights_for(l.name).kernel), counter);
            break;
        case LayerKind::conv_depthwise:
            x = depthwise_conv2d(x, to_kernel(l, model.weights_for(l.name).kernel), counter);
            break;
        case LayerKind::conv_pointwise:
            x = pointwise_conv2d(x, to_kernel(l, model.weights_for(l.name).kernel), counter);
            break;
        case LayerKind::relu:
            x = relu(x);
            break;
        case LayerKind::global_avg_pool:
            x = global_avg_pool(x);
            break;
        case LayerKind::dense: {
            const LayerWeights& w = model.weights_for(l.name);
            x = dense(x, Matrix(l.out_channels, l.in_channels, w.kernel), Tensor::vector(w.bias), counter);
            break;
        }
        case LayerKind::softmax:
            x = softmax(x);
            break;
        }
    }
    return x;
}

} // namespace

Tensor forward_scores(const Model& model, const Tensor& image, OpCounter* counter) {
    return run_layers(model, image, model.spec().layers.size(), counter);
}

Tensor forward_features(const Model& model, const Tensor& image) {
    const auto& layers = model.spec().layers;
    const auto pool = std::find_if(layers.begin(), layers.end(),
                                   [](const LayerSpec& l) { return l.kind == LayerKind::global_avg_pool; });
    if (pool == layers.end()) {
        throw InvalidArgument("model has no global_avg_pool layer");
    }
    return run_layers(model, image, static_cast<std::size_t>(pool - layers.begin()) + 1, nullptr);
}

ClassificationResult forward(const Model& model, const Tensor& image) {
    const auto start = std::chrono::steady_clock::now();
    const Tensor scores = forward_scores(model, image);
    ClassificationResult result;
    result.ranking = rank_scores(scores.data());
    result.latency_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return result;
}

std::uint64_t CostBreakdown::of(LayerKind kind) const noexcept {
    switch (kind) {
    case LayerKind::conv_standard:
        return standard;
    case LayerKind::conv_depthwise:
        return depthwise;
    case LayerKind::conv_pointwise:
        return pointwise;
    case LayerKind::dense:
        return dense;
    default:
        return 0;
    }
}

double CostBreakdown::fraction(LayerKind kind) const noexcept {
    return total == 0 ? 0.0 : static_cast<double>(of(kind)) / static_cast<double>(total);
}

namespace {

void add_cost(CostBreakdown& c, const LayerSpec& l, std::uint64_t value) {
    switch (l.kind) {
    case LayerKind::conv_standard:
        c.standard += value;
        break;
    case LayerKind::conv_depthwise:
        c.depthwise += value;
        break;
    case LayerKind::conv_pointwise:
        c.pointwise += value;
        break;
    case LayerKind::dense:
        c.dense += value;
        break;
    default:
        return;
    }
    c.total += value;
    c.per_layer.emplace_back(l.name, value);
}

} // namespace

CostBreakdown param_count(const ModelSpec& spec) {
    validate_spec(spec);
    CostBreakdown c;
    for (const LayerSpec& l : spec.layers) {
        if (has_parameters(l.kind)) {
            add_cost(c, l, kernel_size(l) + bias_size(l));
        }
    }
    return c;
}

CostBreakdown mult_add_count(const ModelSpec& spec, const Shape3& input_shape) {
    ModelSpec resized = spec;
    resized.input_shape = input_shape;
    const auto shapes = validate_spec(resized);
    CostBreakdown c;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        if (!has_parameters(l.kind)) {
            continue;
        }
        std::uint64_t spatial = 1;
        if (is_conv(l.kind)) {
            spatial = shapes[i][0] * shapes[i][1];
        }
        // Dense has no bias multiply, so kernel_size covers every layer kind.
        add_cost(c, l, spatial * kernel_size(l));
    }
    return c;
}

ordered_json model_to_json(const Model& model) {
    ordered_json weights = ordered_json::object();
    for (const LayerSpec& l : model.spec().layers) {
        if (!has_parameters(l.kind)) {
            continue;
        }
        const LayerWeights& w = model.weights_for(l.name);
        ordered_json entry;
        entry["kernel"] = encode_floats(w.kernel);
        if (!w.bias.empty()) {
            entry["bias"] = encode_floats(w.bias);
        }
        weights[l.name] = std::move(entry);
    }
    ordered_json j;
    j["format_version"] = kFormatVersion;
    j["spec"] = spec_to_json(model.spec());
    j["class_names"] = model.spec().class_names;
    j["seed"] = model.seed();
    j["weights"] = std::move(weights);
    return j;
}

std::string serialize_model(const Model& model) {
    return model_to_json(model).dump(2) + "\n";
}

Model model_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        if (e.byte >= text.size()) {
            throw IntegrityError(fmt::format("model document truncated at byte {}", text.size()));
        }
        throw ParseError("malformed model document", e.byte);
    }
    if (!j.is_object()) {
        throw ParseError("model document is not a JSON object", 0);
    }
    try {
        const int version = j.at("format_version").get<int>();
        if (version != kFormatVersion) {
            throw UnsupportedFormat(fmt::format("unsupported model format_version {}", version));
        }
        json spec_json = j.at("spec");
        spec_json["class_names"] = j.at("class_names");
        ModelSpec spec = spec_from_json(spec_json);
        const auto seed = j.at("seed").get<std::uint64_t>();
        const json& wj = j.at("weights");
        std::map<std::string, LayerWeights> weights;
        for (const LayerSpec& l : spec.layers) {
            if (!has_parameters(l.kind)) {
                continue;
            }
            if (!wj.contains(l.name)) {
                throw IntegrityError(fmt::format("layer '{}' has no weights", l.name));
            }
            const json& entry = wj.at(l.name);
            LayerWeights w;
            w.kernel = decode_floats(text, entry.at("kernel").get<std::string>(), l.name, "kernel",
                                     kernel_size(l));
            if (bias_size(l) > 0) {
                if (!entry.contains("bias")) {
                    throw IntegrityError(fmt::format("layer '{}' has no bias", l.name));
                }
                w.bias = decode_floats(text, entry.at("bias").get<std::string>(), l.name, "bias",
                                       bias_size(l));
            }
            weights.emplace(l.name, std::move(w));
        }
        for (const auto& [name, _] : wj.items()) {
            if (weights.find(name) == weights.end()) {
                throw IntegrityError(fmt::format("weights for unknown layer '{}'", name));
            }
        }
        return Model(std::move(spec), std::move(weights), seed);
    } catch (const json::exception& e) {
        throw ParseError(fmt::format("malformed model document: {}", e.what()), 0);
    } catch (const InvalidArgument& e) {
        throw ParseError(fmt::format("invalid model spec: {}", e.what()), locate(text, "spec"));
    }
}

void save_model(const Model& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError(fmt::format("cannot write model file {}", path.string()));
    }
    const std::string text = serialize_model(model);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) {
        throw IoError(fmt::format("failed writing model file {}", path.string()));
    }
}

Model load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError(fmt::format("cannot open model file {}", path.string()));
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return model_from_json(buffer.str());
}

} // namespace produce
