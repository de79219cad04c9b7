#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "produce/model.hpp"
#include "produce/tensor.hpp"

namespace produce {

/// Pooled activations of a frozen feature extractor, one row per sample.
struct FeatureSet {
    Matrix features; // M x N
    std::vector<std::size_t> labels;
    std::vector<std::string> class_names;

    std::size_t samples() const noexcept { return features.rows; }
    std::size_t dims() const noexcept { return features.cols; }

    // Throws InvalidArgument on any broken invariant.
    void validate() const;
};

struct TrainConfig {
    std::size_t epochs = 300;
    double learning_rate = 0.05;
    std::size_t batch_size = 32;
    std::uint64_t seed = 7;
    double l2 = 1e-4;
    // Train on per-feature standardized inputs and fold the affine map back
    // into the returned head.
    bool standardize = true;
};

/// Dense + softmax classifier head, K x N weights in row-major order. Kept in
/// double precision while training; narrowed to float by attach_head.
struct DenseHead {
    std::size_t classes = 0;
    std::size_t inputs = 0;
    std::vector<double> weights;
    std::vector<double> bias;

    DenseHead() = default;
    DenseHead(std::size_t k, std::size_t n) : classes(k), inputs(n), weights(k * n, 0.0), bias(k, 0.0) {}

    double& w(std::size_t k, std::size_t n) noexcept { return weights[k * inputs + n]; }
    double w(std::size_t k, std::size_t n) const noexcept { return weights[k * inputs + n]; }

    friend bool operator==(const DenseHead&, const DenseHead&) = default;
};

struct LossAndGrad {
    double loss = 0.0;
    std::vector<double> grad_weights;
    std::vector<double> grad_bias;
};

FeatureSet extract_features(const Model& model, std::span<const Tensor> images,
                            std::vector<std::size_t> labels);

/// Mean softmax cross-entropy over the rows in `batch` plus l2/2 * |W|^2
/// (bias is not regularized), with analytic gradients.
LossAndGrad head_loss_and_grad(const DenseHead& head, const FeatureSet& data,
                               std::span<const std::size_t> batch, double l2);

// Loss over every sample.
double head_loss(const DenseHead& head, const FeatureSet& data, double l2);

struct TrainResult {
    DenseHead head;
    std::vector<double> loss_history; // full-data training objective after each epoch
};

/// Per-feature shift and scale applied before training: x' = (x - mean) * inv_std.
/// Features that are constant on the training set get inv_std = 0.
struct Standardizer {
    std::vector<double> mean;
    std::vector<double> inv_std;
};

Standardizer fit_standardizer(const FeatureSet& data);
FeatureSet apply_standardizer(const Standardizer& s, const FeatureSet& data);

// Head on raw features equivalent to `head` applied after `s`.
DenseHead fold_standardizer(const DenseHead& head, const Standardizer& s);

/// Plain mini-batch SGD from a zero head. Sample order is reshuffled every
/// epoch by a SplitMix64 stream seeded from config.seed. With
/// config.standardize the loss history is measured in the standardized space
/// and the returned head already includes the folded standardizer.
TrainResult train_head(const FeatureSet& features, const TrainConfig& config);

// Fraction of rows whose argmax prediction matches the label.
double head_accuracy(const DenseHead& head, const FeatureSet& data);

/// Copy of `model` with its dense classifier replaced. Convolution weights are
/// carried over untouched.
Model attach_head(const Model& model, const DenseHead& head);

// Reads the classifier of a model back into a DenseHead.
DenseHead head_of(const Model& model);

} // namespace produce
