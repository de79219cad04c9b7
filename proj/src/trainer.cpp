#include "produce/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "produce/error.hpp"
#include "produce/rng.hpp"

namespace produce {

namespace {

void check_head(const DenseHead& head, const FeatureSet& data) {
    if (head.inputs != data.dims()) {
        throw InvalidArgument(fmt::format("head expects {} features, data has {}", head.inputs, data.dims()));
    }
    if (head.classes != data.class_names.size()) {
        throw InvalidArgument(
            fmt::format("head has {} classes, data names {}", head.classes, data.class_names.size()));
    }
    if (head.weights.size() != head.classes * head.inputs || head.bias.size() != head.classes) {
        throw InvalidArgument("head weight arrays do not match its declared shape");
    }
}

// Logits for one row into `out`; returns log-sum-exp of them.
double logits_row(const DenseHead& head, const FeatureSet& data, std::size_t row, std::vector<double>& out) {
    const float* x = &data.features.data[row * data.dims()];
    double peak = -INFINITY;
    for (std::size_t k = 0; k < head.classes; ++k) {
        double z = head.bias[k];
        const double* w = &head.weights[k * head.inputs];
        for (std::size_t n = 0; n < head.inputs; ++n) {
            z += w[n] * static_cast<double>(x[n]);
        }
        out[k] = z;
        peak = std::max(peak, z);
    }
    double sum = 0.0;
    for (std::size_t k = 0; k < head.classes; ++k) {
        sum += std::exp(out[k] - peak);
    }
    return peak + std::log(sum);
}

double l2_term(const DenseHead& head, double l2) {
    if (l2 == 0.0) {
        return 0.0;
    }
    double sq = 0.0;
    for (double w : head.weights) {
        sq += w * w;
    }
    return 0.5 * l2 * sq;
}

} // namespace

void FeatureSet::validate() const {
    if (features.rows == 0) {
        throw InvalidArgument("feature set is empty");
    }
    if (features.data.size() != features.rows * features.cols) {
        throw InvalidArgument("feature matrix storage does not match its shape");
    }
    if (labels.size() != features.rows) {
        throw InvalidArgument(fmt::format("{} labels for {} feature rows", labels.size(), features.rows));
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= class_names.size()) {
            throw InvalidArgument(
                fmt::format("label {} of sample {} is outside {} classes", labels[i], i, class_names.size()));
        }
    }
    if (!std::all_of(features.data.begin(), features.data.end(), [](float v) { return std::isfinite(v); })) {
        throw InvalidArgument("feature set contains non-finite values");
    }
}

FeatureSet extract_features(const Model& model, std::span<const Tensor> images,
                            std::vector<std::size_t> labels) {
    if (labels.size() != images.size()) {
        throw InvalidArgument(fmt::format("{} labels for {} images", labels.size(), images.size()));
    }
    FeatureSet set;
    set.class_names = model.spec().class_names;
    set.labels = std::move(labels);
    std::size_t dims = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const Tensor pooled = forward_features(model, images[i]);
        if (i == 0) {
            dims = pooled.size();
            set.features = Matrix(images.size(), dims);
        }
        std::copy(pooled.data().begin(), pooled.data().end(), set.features.data.begin() + static_cast<std::ptrdiff_t>(i * dims));
    }
    return set;
}

LossAndGrad head_loss_and_grad(const DenseHead& head, const FeatureSet& data,
                               std::span<const std::size_t> batch, double l2) {
    if (batch.empty()) {
        throw InvalidArgument("head_loss_and_grad: empty batch");
    }
    check_head(head, data);
    LossAndGrad out;
    out.grad_weights.assign(head.weights.size(), 0.0);
    out.grad_bias.assign(head.classes, 0.0);
    std::vector<double> z(head.classes);
    const double scale = 1.0 / static_cast<double>(batch.size());
    double total = 0.0;
    for (std::size_t row : batch) {
        if (row >= data.samples()) {
            throw InvalidArgument(fmt::format("batch row {} outside {} samples", row, data.samples()));
        }
        const std::size_t label = data.labels[row];
        const double lse = logits_row(head, data, row, z);
        total += lse - z[label];
        const float* x = &data.features.data[row * data.dims()];
        for (std::size_t k = 0; k < head.classes; ++k) {
            // d/dz_k of cross-entropy = p_k - [k == label]
            const double delta = (std::exp(z[k] - lse) - (k == label ? 1.0 : 0.0)) * scale;
            out.grad_bias[k] += delta;
            double* g = &out.grad_weights[k * head.inputs];
            for (std::size_t n = 0; n < head.inputs; ++n) {
                g[n] += delta * static_cast<double>(x[n]);
            }
        }
    }
    out.loss = total * scale + l2_term(head, l2);
    if (l2 != 0.0) {
        for (std::size_t i = 0; i < head.weights.size(); ++i) {
            out.grad_weights[i] += l2 * head.weights[i];
        }
    }
    return out;
}

double head_loss(const DenseHead& head, const FeatureSet& data, double l2) {
    check_head(head, data);
    std::vector<double> z(head.classes);
    double total = 0.0;
    for (std::size_t row = 0; row < data.samples(); ++row) {
        total += logits_row(head, data, row, z) - z[data.labels[row]];
    }
    return total / static_cast<double>(data.samples()) + l2_term(head, l2);
}

Standardizer fit_standardizer(const FeatureSet& data) {
    data.validate();
    const std::size_t dims = data.dims();
    const auto m = static_cast<double>(data.samples());
    Standardizer s{std::vector<double>(dims, 0.0), std::vector<double>(dims, 0.0)};
    for (std::size_t n = 0; n < dims; ++n) {
        double sum = 0.0;
        for (std::size_t i = 0; i < data.samples(); ++i) {
            sum += data.features.at(i, n);
        }
        const double mean = sum / m;
        double sq = 0.0;
        double scale = 0.0;
        for (std::size_t i = 0; i < data.samples(); ++i) {
            const double d = data.features.at(i, n) - mean;
            sq += d * d;
            scale = std::max(scale, std::fabs(static_cast<double>(data.features.at(i, n))));
        }
        const double sd = std::sqrt(sq / m);
        s.mean[n] = mean;
        // relative floor so float rounding noise on a constant column is not amplified
        s.inv_std[n] = sd > 1e-6 * std::max(scale, 1e-30) ? 1.0 / sd : 0.0;
    }
    return s;
}

FeatureSet apply_standardizer(const Standardizer& s, const FeatureSet& data) {
    if (s.mean.size() != data.dims() || s.inv_std.size() != data.dims()) {
        throw InvalidArgument(
            fmt::format("standardizer has {} features, data has {}", s.mean.size(), data.dims()));
    }
    FeatureSet out = data;
    for (std::size_t i = 0; i < out.samples(); ++i) {
        for (std::size_t n = 0; n < out.dims(); ++n) {
            float& v = out.features.at(i, n);
            v = static_cast<float>((static_cast<double>(v) - s.mean[n]) * s.inv_std[n]);
        }
    }
    return out;
}

DenseHead fold_standardizer(const DenseHead& head, const Standardizer& s) {
    if (s.mean.size() != head.inputs || s.inv_std.size() != head.inputs) {
        throw InvalidArgument(
            fmt::format("standardizer has {} features, head takes {}", s.mean.size(), head.inputs));
    }
    DenseHead out = head;
    for (std::size_t k = 0; k < head.classes; ++k) {
        double shift = 0.0;
        for (std::size_t n = 0; n < head.inputs; ++n) {
            out.w(k, n) = head.w(k, n) * s.inv_std[n];
            shift += out.w(k, n) * s.mean[n];
        }
        out.bias[k] = head.bias[k] - shift;
    }
    return out;
}

TrainResult train_head(const FeatureSet& raw, const TrainConfig& config) {
    raw.validate();
    if (config.epochs == 0 || config.batch_size == 0 || !(config.learning_rate > 0.0) || config.l2 < 0.0) {
        throw InvalidArgument("train config needs epochs >= 1, batch_size >= 1, learning_rate > 0, l2 >= 0");
    }
    std::vector<std::size_t> per_class(raw.class_names.size(), 0);
    for (std::size_t label : raw.labels) {
        ++per_class[label];
    }
    std::vector<std::string> missing;
    for (std::size_t k = 0; k < per_class.size(); ++k) {
        if (per_class[k] == 0) {
            missing.push_back(raw.class_names[k]);
        }
    }
    if (!missing.empty()) {
        throw InvalidArgument(fmt::format("no training samples for class(es): {}", fmt::join(missing, ", ")));
    }
    std::optional<Standardizer> standardizer;
    if (config.standardize) {
        standardizer = fit_standardizer(raw);
    }
    const FeatureSet features = standardizer ? apply_standardizer(*standardizer, raw) : raw;

    TrainResult result{DenseHead(features.class_names.size(), features.dims()), {}};
    DenseHead& head = result.head;
    SplitMix64 rng(config.seed);
    std::vector<std::size_t> order(features.samples());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(std::span<std::size_t>(order));
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            const auto batch = std::span<const std::size_t>(order).subspan(start, end - start);
            const LossAndGrad g = head_loss_and_grad(head, features, batch, config.l2);
            for (std::size_t i = 0; i < head.weights.size(); ++i) {
                head.weights[i] -= config.learning_rate * g.grad_weights[i];
            }
            for (std::size_t k = 0; k < head.classes; ++k) {
                head.bias[k] -= config.learning_rate * g.grad_bias[k];
            }
        }
        result.loss_history.push_back(head_loss(head, features, config.l2));
    }
    if (standardizer) {
        head = fold_standardizer(head, *standardizer);
    }
    return result;
}

double head_accuracy(const DenseHead& head, const FeatureSet& data) {
    check_head(head, data);
    std::vector<double> z(head.classes);
    std::size_t hits = 0;
    for (std::size_t row = 0; row < data.samples(); ++row) {
        logits_row(head, data, row, z);
        const auto best = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
        hits += best == data.labels[row] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(data.samples());
}

Model attach_head(const Model& model, const DenseHead& head) {
    const LayerSpec& layer = model.head_layer();
    if (head.inputs != layer.in_channels) {
        throw InvalidArgument(fmt::format("head takes {} inputs but the pooled feature length is {}",
                                          head.inputs, layer.in_channels));
    }
    if (head.classes != model.num_classes()) {
        throw InvalidArgument(
            fmt::format("head has {} classes but the model names {}", head.classes, model.num_classes()));
    }
    if (head.weights.size() != head.classes * head.inputs || head.bias.size() != head.classes) {
        throw InvalidArgument("head weight arrays do not match its declared shape");
    }
    auto weights = model.weights();
    LayerWeights& w = weights.at(layer.name);
    w.kernel.assign(head.weights.begin(), head.weights.end());
    w.bias.assign(head.bias.begin(), head.bias.end());
    return Model(model.spec(), std::move(weights), model.seed());
}

DenseHead head_of(const Model& model) {
    const LayerSpec& layer = model.head_layer();
    const LayerWeights& w = model.weights_for(layer.name);
    DenseHead head(layer.out_channels, layer.in_channels);
    head.weights.assign(w.kernel.begin(), w.kernel.end());
    head.bias.assign(w.bias.begin(), w.bias.end());
    return head;
}

} // namespace produce
