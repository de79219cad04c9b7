#include "produce/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "produce/error.hpp"

namespace produce {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void check_shape(const std::vector<std::size_t>& shape) {
    if (shape.size() != 1 && shape.size() != 3) {
        throw InvalidArgument(fmt::format("tensor rank must be 1 or 3, got {}", shape.size()));
    }
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == 0) {
            throw InvalidArgument(fmt::format("tensor dimension {} is zero", i));
        }
    }
}

void require_rank3(const Tensor& t, const char* op) {
    if (t.rank() != 3) {
        throw InvalidArgument(fmt::format("{}: input must be rank 3 (H x W x C), got {}", op,
                                          t.shape_string()));
    }
}

void check_kernel_weights(const ConvKernel& k, const char* op) {
    if (k.stride == 0) {
        throw InvalidArgument(fmt::format("{}: stride must be >= 1", op));
    }
    if (k.kernel_h == 0 || k.kernel_w == 0) {
        throw InvalidArgument(fmt::format("{}: kernel extent must be positive", op));
    }
    if (k.weights.size() != k.expected_weight_count()) {
        throw InvalidArgument(fmt::format("{}: kernel holds {} weights, geometry needs {}", op,
                                          k.weights.size(), k.expected_weight_count()));
    }
}

struct Geometry {
    std::size_t out_h;
    std::size_t out_w;
    std::size_t pad_top;
    std::size_t pad_left;
};

std::size_t leading_pad(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding,
                        std::size_t out) {
    if (padding == Padding::valid) {
        return 0;
    }
    const std::size_t needed = (out - 1) * stride + kernel;
    const std::size_t total = needed > in ? needed - in : 0;
    return total / 2; // the odd pixel goes bottom/right
}

Geometry geometry(const Tensor& input, const ConvKernel& k) {
    Geometry g{};
    try {
        g.out_h = conv_output_extent(input.height(), k.kernel_h, k.stride, k.padding);
    } catch (const InvalidArgument& e) {
        throw InvalidArgument(fmt::format("height: {}", e.what()));
    }
    try {
        g.out_w = conv_output_extent(input.width(), k.kernel_w, k.stride, k.padding);
    } catch (const InvalidArgument& e) {
        throw InvalidArgument(fmt::format("width: {}", e.what()));
    }
    g.pad_top = leading_pad(input.height(), k.kernel_h, k.stride, k.padding, g.out_h);
    g.pad_left = leading_pad(input.width(), k.kernel_w, k.stride, k.padding, g.out_w);
    return g;
}

// Zero-filled copy large enough that every tap of every output lands inside.
Tensor pad_input(const Tensor& input, const ConvKernel& k, const Geometry& g) {
    const std::size_t ph = (g.out_h - 1) * k.stride + k.kernel_h;
    const std::size_t pw = (g.out_w - 1) * k.stride + k.kernel_w;
    if (g.pad_top == 0 && g.pad_left == 0 && ph <= input.height() && pw <= input.width()) {
        return input;
    }
    const std::size_t c = input.channels();
    Tensor padded({std::max(ph, input.height() + g.pad_top), std::max(pw, input.width() + g.pad_left), c});
    for (std::size_t y = 0; y < input.height(); ++y) {
        for (std::size_t x = 0; x < input.width(); ++x) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                padded.at(y + g.pad_top, x + g.pad_left, ch) = input.at(y, x, ch);
            }
        }
    }
    return padded;
}

Tensor full_conv(const Tensor& input, const ConvKernel& k, OpCounter* counter) {
    const Geometry g = geometry(input, k);
    const Tensor src = pad_input(input, k, g);
    const std::size_t cin = k.in_channels;
    const std::size_t cout = k.out_channels;
    Tensor out({g.out_h, g.out_w, cout});
    std::vector<double> acc(cout);
    std::uint64_t taps = 0;
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t ky = 0; ky < k.kernel_h; ++ky) {
                for (std::size_t kx = 0; kx < k.kernel_w; ++kx) {
                    const std::size_t iy = oy * k.stride + ky;
                    const std::size_t ix = ox * k.stride + kx;
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const double v = src.at(iy, ix, ci);
                        const float* w = &k.weights[((ky * k.kernel_w + kx) * cin + ci) * cout];
                        for (std::size_t co = 0; co < cout; ++co) {
                            acc[co] += v * static_cast<double>(w[co]);
                        }
                        taps += cout;
                    }
                }
            }
            for (std::size_t co = 0; co < cout; ++co) {
                out.at(oy, ox, co) = static_cast<float>(acc[co]);
            }
        }
    }
    if (counter != nullptr) {
        counter->mult_adds += taps;
    }
    return out;
}

} // namespace

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(product(shape_), 0.0f);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != product(shape_)) {
        throw InvalidArgument(fmt::format("tensor data length {} does not match shape {}",
                                          data_.size(), shape_string()));
    }
}

Tensor Tensor::vector(std::vector<float> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
}

Tensor Tensor::image(std::size_t height, std::size_t width, std::size_t channels) {
    return Tensor({height, width, channels});
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

std::string Tensor::shape_string() const {
    return fmt::format("{}", fmt::join(shape_, "x"));
}

Matrix::Matrix(std::size_t r, std::size_t c, std::vector<float> values)
    : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != rows * cols) {
        throw InvalidArgument(
            fmt::format("matrix data length {} does not match {}x{}", data.size(), rows, cols));
    }
}

const char* to_string(Padding p) noexcept {
    return p == Padding::same ? "same" : "valid";
}

const char* to_string(KernelKind k) noexcept {
    switch (k) {
    case KernelKind::standard:
        return "standard";
    case KernelKind::depthwise:
        return "depthwise";
    case KernelKind::pointwise:
        return "pointwise";
    }
    return "unknown";
}

ConvKernel ConvKernel::standard(std::size_t kh, std::size_t kw, std::size_t cin, std::size_t cout,
                                std::vector<float> weights, std::size_t stride, Padding padding) {
    return ConvKernel{KernelKind::standard, kh, kw, cin, cout, stride, padding, std::move(weights)};
}

ConvKernel ConvKernel::depthwise(std::size_t kh, std::size_t kw, std::size_t channels,
                                 std::vector<float> weights, std::size_t stride, Padding padding) {
    return ConvKernel{KernelKind::depthwise, kh,     kw,     channels,
                      channels,             stride, padding, std::move(weights)};
}

ConvKernel ConvKernel::pointwise(std::size_t cin, std::size_t cout, std::vector<float> weights) {
    return ConvKernel{KernelKind::pointwise, 1, 1, cin, cout, 1, Padding::valid, std::move(weights)};
}

std::size_t ConvKernel::expected_weight_count() const noexcept {
    if (kind == KernelKind::depthwise) {
        return kernel_h * kernel_w * in_channels;
    }
    return kernel_h * kernel_w * in_channels * out_channels;
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               Padding padding) {
    if (stride == 0) {
        throw InvalidArgument("stride must be >= 1");
    }
    if (padding == Padding::same) {
        return (in + stride - 1) / stride;
    }
    if (kernel > in) {
        throw InvalidArgument(
            fmt::format("kernel extent {} exceeds input extent {} under valid padding", kernel, in));
    }
    return (in - kernel) / stride + 1;
}

Tensor conv2d(const Tensor& input, const ConvKernel& kernel, OpCounter* counter) {
    require_rank3(input, "conv2d");
    if (kernel.kind == KernelKind::depthwise) {
        throw InvalidArgument("conv2d: depthwise kernel passed; use depthwise_conv2d");
    }
    check_kernel_weights(kernel, "conv2d");
    if (kernel.in_channels != input.channels()) {
        throw InvalidArgument(fmt::format("conv2d: channels: kernel expects {} input channels, input has {}",
                                          kernel.in_channels, input.channels()));
    }
    return full_conv(input, kernel, counter);
}

Tensor depthwise_conv2d(const Tensor& input, const ConvKernel& kernel, OpCounter* counter) {
    require_rank3(input, "depthwise_conv2d");
    if (kernel.kind != KernelKind::depthwise) {
        throw InvalidArgument("depthwise_conv2d: kernel kind must be depthwise");
    }
    if (kernel.out_channels != kernel.in_channels) {
        throw InvalidArgument("depthwise_conv2d: output channels must equal input channels");
    }
    check_kernel_weights(kernel, "depthwise_conv2d");
    if (kernel.in_channels != input.channels()) {
        throw InvalidArgument(
            fmt::format("depthwise_conv2d: channels: kernel has {} channel filters, input has {} channels",
                        kernel.in_channels, input.channels()));
    }

    const Geometry g = geometry(input, kernel);
    const Tensor src = pad_input(input, kernel, g);
    const std::size_t c = kernel.in_channels;
    Tensor out({g.out_h, g.out_w, c});
    std::uint64_t taps = 0;
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (std::size_t ky = 0; ky < kernel.kernel_h; ++ky) {
                    for (std::size_t kx = 0; kx < kernel.kernel_w; ++kx) {
                        const double v = src.at(oy * kernel.stride + ky, ox * kernel.stride + kx, ch);
                        acc += v * static_cast<double>(kernel.weights[(ky * kernel.kernel_w + kx) * c + ch]);
                    }
                }
                taps += kernel.kernel_h * kernel.kernel_w;
                out.at(oy, ox, ch) = static_cast<float>(acc);
            }
        }
    }
    if (counter != nullptr) {
        counter->mult_adds += taps;
    }
    return out;
}

Tensor pointwise_conv2d(const Tensor& input, const ConvKernel& kernel, OpCounter* counter) {
    require_rank3(input, "pointwise_conv2d");
    if (kernel.kind == KernelKind::depthwise) {
        throw InvalidArgument("pointwise_conv2d: depthwise kernel passed");
    }
    if (kernel.kernel_h != 1 || kernel.kernel_w != 1) {
        throw InvalidArgument(fmt::format("pointwise_conv2d: kernel must be 1x1, got {}x{}",
                                          kernel.kernel_h, kernel.kernel_w));
    }
    if (kernel.stride != 1) {
        throw InvalidArgument(fmt::format("pointwise_conv2d: stride must be 1, got {}", kernel.stride));
    }
    check_kernel_weights(kernel, "pointwise_conv2d");
    if (kernel.in_channels != input.channels()) {
        throw InvalidArgument(
            fmt::format("pointwise_conv2d: channels: kernel expects {} input channels, input has {}",
                        kernel.in_channels, input.channels()));
    }
    return full_conv(input, kernel, counter);
}

Tensor relu(const Tensor& t) {
    Tensor out = t;
    for (float& v : out.data()) {
        v = std::max(v, 0.0f);
    }
    return out;
}

Tensor global_avg_pool(const Tensor& t) {
    require_rank3(t, "global_avg_pool");
    const std::size_t c = t.channels();
    std::vector<double> sums(c, 0.0);
    for (std::size_t y = 0; y < t.height(); ++y) {
        for (std::size_t x = 0; x < t.width(); ++x) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                sums[ch] += t.at(y, x, ch);
            }
        }
    }
    const double n = static_cast<double>(t.height() * t.width());
    std::vector<float> out(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        out[ch] = static_cast<float>(sums[ch] / n);
    }
    return Tensor::vector(std::move(out));
}

Tensor dense(const Tensor& v, const Matrix& weights, const Tensor& bias, OpCounter* counter) {
    if (v.rank() != 1) {
        throw InvalidArgument(fmt::format("dense: input must be rank 1, got {}", v.shape_string()));
    }
    if (weights.cols != v.size()) {
        throw InvalidArgument(fmt::format("dense: weight columns {} do not match input length {}",
                                          weights.cols, v.size()));
    }
    if (bias.rank() != 1 || bias.size() != weights.rows) {
        throw InvalidArgument(fmt::format("dense: bias length {} does not match weight rows {}",
                                          bias.size(), weights.rows));
    }
    std::vector<float> out(weights.rows);
    for (std::size_t r = 0; r < weights.rows; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < weights.cols; ++c) {
            acc += static_cast<double>(weights.at(r, c)) * static_cast<double>(v[c]);
        }
        out[r] = static_cast<float>(acc + static_cast<double>(bias[r]));
    }
    if (counter != nullptr) {
        counter->mult_adds += weights.rows * weights.cols;
    }
    return Tensor::vector(std::move(out));
}

Tensor softmax(const Tensor& logits) {
    if (logits.rank() != 1) {
        throw InvalidArgument(fmt::format("softmax: input must be rank 1, got {}", logits.shape_string()));
    }
    const auto values = logits.data();
    const double peak = *std::max_element(values.begin(), values.end());
    std::vector<double> e(values.size());
    double total = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        e[i] = std::exp(static_cast<double>(values[i]) - peak);
        total += e[i];
    }
    std::vector<float> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        out[i] = static_cast<float>(e[i] / total);
    }
    return Tensor::vector(std::move(out));
}

} // namespace produce
