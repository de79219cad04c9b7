#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "produce/tensor.hpp"

namespace produce {

enum class LayerKind {
    conv_standard,
    conv_depthwise,
    conv_pointwise,
    relu,
    global_avg_pool,
    dense,
    softmax,
};

const char* to_string(LayerKind kind) noexcept;
LayerKind layer_kind_from_string(const std::string& name);

bool is_conv(LayerKind kind) noexcept;
bool has_parameters(LayerKind kind) noexcept;

struct Shape3 {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;

    friend bool operator==(const Shape3&, const Shape3&) = default;
};

/// One entry of a model's layer list. Geometry fields are ignored for kinds
/// they do not apply to. For dense layers `in_channels` is the input length
/// and `out_channels` the number of outputs.
struct LayerSpec {
    std::string name;
    LayerKind kind = LayerKind::relu;
    std::size_t kernel_h = 0;
    std::size_t kernel_w = 0;
    std::size_t stride = 1;
    Padding padding = Padding::same;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ModelSpec {
    std::string name;
    Shape3 input_shape;
    std::vector<LayerSpec> layers;
    std::vector<std::string> class_names;

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Checks every ModelSpec invariant and returns the output shape of each layer.
/// Throws InvalidArgument naming the first offending layer.
std::vector<std::vector<std::size_t>> validate_spec(const ModelSpec& spec);

// Conv, depthwise, pointwise and dense entries ("MobileNet has 28 layers"
// counts depthwise and pointwise separately, plus the classifier).
std::size_t weighted_layer_count(const ModelSpec& spec);

nlohmann::ordered_json spec_to_json(const ModelSpec& spec);
// Accepts either "class_names" or "num_classes" (placeholder names class_0..).
ModelSpec spec_from_json(const nlohmann::json& j);
ModelSpec load_spec(const std::filesystem::path& path);

struct LayerWeights {
    std::vector<float> kernel;
    std::vector<float> bias; // dense only

    friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

/// A spec with weights bound to every parameterized layer. Immutable once
/// constructed; the constructor enforces all size and finiteness invariants.
class Model {
public:
    Model(ModelSpec spec, std::map<std::string, LayerWeights> weights, std::uint64_t seed);

    const ModelSpec& spec() const noexcept { return spec_; }
    const std::map<std::string, LayerWeights>& weights() const noexcept { return weights_; }
    const LayerWeights& weights_for(const std::string& layer) const;
    std::uint64_t seed() const noexcept { return seed_; }
    std::size_t num_classes() const noexcept { return spec_.class_names.size(); }
    const std::vector<std::vector<std::size_t>>& layer_shapes() const noexcept { return shapes_; }

    // Name of the dense classifier layer and its input length.
    const LayerSpec& head_layer() const;

private:
    ModelSpec spec_;
    std::map<std::string, LayerWeights> weights_;
    std::uint64_t seed_;
    std::vector<std::vector<std::size_t>> shapes_;
};

// Kernel/bias element counts a layer needs.
std::size_t kernel_size(const LayerSpec& layer) noexcept;
std::size_t bias_size(const LayerSpec& layer) noexcept;

/// Builds a model with Glorot-uniform weights in [-r, r],
/// r = sqrt(6 / (fan_in + fan_out)), drawn in layer order from one SplitMix64
/// stream: w = (2u - 1) * r with u = uniform(). Biases start at zero.
Model initialize_model(ModelSpec spec, std::uint64_t seed);

ModelSpec micro_mobilenet_spec(std::vector<std::string> class_names);
ModelSpec micro_standardnet_spec(std::vector<std::string> class_names);

std::vector<std::string> placeholder_class_names(std::size_t count);

Model build_micro_mobilenet(std::size_t num_classes, std::uint64_t seed);
Model build_micro_mobilenet(std::vector<std::string> class_names, std::uint64_t seed);
Model build_micro_standardnet(std::size_t num_classes, std::uint64_t seed);
Model build_micro_standardnet(std::vector<std::string> class_names, std::uint64_t seed);

struct ScoredClass {
    std::size_t class_index = 0;
    float score = 0.0f;

    friend bool operator==(const ScoredClass&, const ScoredClass&) = default;
};

struct ClassificationResult {
    std::vector<ScoredClass> ranking; // descending score, ties by ascending index
    double latency_ms = 0.0;

    std::size_t top_class() const { return ranking.front().class_index; }
};

std::vector<ScoredClass> rank_scores(std::span<const float> scores);

// Runs every layer and returns the softmax output.
Tensor forward_scores(const Model& model, const Tensor& image, OpCounter* counter = nullptr);

// Runs layers up to and including global_avg_pool.
Tensor forward_features(const Model& model, const Tensor& image);

ClassificationResult forward(const Model& model, const Tensor& image);

/// Exact per-kind totals plus the per-layer values they sum.
struct CostBreakdown {
    std::uint64_t standard = 0;
    std::uint64_t depthwise = 0;
    std::uint64_t pointwise = 0;
    std::uint64_t dense = 0;
    std::uint64_t total = 0;
    std::vector<std::pair<std::string, std::uint64_t>> per_layer;

    std::uint64_t of(LayerKind kind) const noexcept;
    double fraction(LayerKind kind) const noexcept;
};

CostBreakdown param_count(const ModelSpec& spec);
CostBreakdown mult_add_count(const ModelSpec& spec, const Shape3& input_shape);

nlohmann::ordered_json model_to_json(const Model& model);
Model model_from_json(const std::string& text);
std::string serialize_model(const Model& model);

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

} // namespace produce
