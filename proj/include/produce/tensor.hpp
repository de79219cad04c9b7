#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace produce {

/// Dense float tensor of rank 1 (vector) or rank 3 (height x width x channels,
/// row-major, channels fastest).
class Tensor {
public:
    Tensor() = default;

    // Zero-filled tensor of the given shape.
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<float> data);

    static Tensor vector(std::vector<float> values);
    static Tensor image(std::size_t height, std::size_t width, std::size_t channels);

    std::size_t rank() const noexcept { return shape_.size(); }
    const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return data_.size(); }

    // Rank-3 accessors; undefined on rank-1 tensors.
    std::size_t height() const noexcept { return shape_[0]; }
    std::size_t width() const noexcept { return shape_[1]; }
    std::size_t channels() const noexcept { return shape_[2]; }

    std::span<const float> data() const noexcept { return data_; }
    std::span<float> data() noexcept { return data_; }

    float operator[](std::size_t i) const noexcept { return data_[i]; }
    float& operator[](std::size_t i) noexcept { return data_[i]; }

    float at(std::size_t y, std::size_t x, std::size_t c) const noexcept {
        return data_[(y * shape_[1] + x) * shape_[2] + c];
    }
    float& at(std::size_t y, std::size_t x, std::size_t c) noexcept {
        return data_[(y * shape_[1] + x) * shape_[2] + c];
    }

    bool all_finite() const noexcept;
    std::string shape_string() const;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    std::vector<std::size_t> shape_;
    std::vector<float> data_;
};

/// Row-major K x N matrix, used for dense-layer weights.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}
    Matrix(std::size_t r, std::size_t c, std::vector<float> values);

    float at(std::size_t r, std::size_t c) const noexcept { return data[r * cols + c]; }
    float& at(std::size_t r, std::size_t c) noexcept { return data[r * cols + c]; }

    friend bool operator==(const Matrix&, const Matrix&) = default;
};

enum class Padding { valid, same };
enum class KernelKind { standard, depthwise, pointwise };

const char* to_string(Padding p) noexcept;
const char* to_string(KernelKind k) noexcept;

/// Convolution weights plus geometry.
///
/// Layouts: standard and pointwise kernels are Kh x Kw x Cin x Cout (Cout
/// fastest); depthwise kernels are Kh x Kw x C. Convolutions carry no bias.
struct ConvKernel {
    KernelKind kind = KernelKind::standard;
    std::size_t kernel_h = 1;
    std::size_t kernel_w = 1;
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::size_t stride = 1;
    Padding padding = Padding::valid;
    std::vector<float> weights;

    static ConvKernel standard(std::size_t kh, std::size_t kw, std::size_t cin, std::size_t cout,
                               std::vector<float> weights, std::size_t stride = 1,
                               Padding padding = Padding::valid);
    static ConvKernel depthwise(std::size_t kh, std::size_t kw, std::size_t channels,
                                std::vector<float> weights, std::size_t stride = 1,
                                Padding padding = Padding::valid);
    static ConvKernel pointwise(std::size_t cin, std::size_t cout, std::vector<float> weights);

    // Number of weights the geometry requires.
    std::size_t expected_weight_count() const noexcept;

    float weight(std::size_t ky, std::size_t kx, std::size_t ci, std::size_t co) const noexcept {
        return weights[((ky * kernel_w + kx) * in_channels + ci) * out_channels + co];
    }
};

/// Multiplications performed by the kernels it is passed to. Zero taps
/// introduced by "same" padding are multiplied like any other tap.
struct OpCounter {
    std::uint64_t mult_adds = 0;
};

/// Spatial output extent. valid: floor((in - k) / stride) + 1; same:
/// ceil(in / stride). Throws InvalidArgument when the result would be empty.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               Padding padding);

Tensor conv2d(const Tensor& input, const ConvKernel& kernel, OpCounter* counter = nullptr);
Tensor depthwise_conv2d(const Tensor& input, const ConvKernel& kernel, OpCounter* counter = nullptr);
Tensor pointwise_conv2d(const Tensor& input, const ConvKernel& kernel, OpCounter* counter = nullptr);

Tensor relu(const Tensor& t);
Tensor global_avg_pool(const Tensor& t);

// weights * v + bias
Tensor dense(const Tensor& v, const Matrix& weights, const Tensor& bias,
             OpCounter* counter = nullptr);

// Max-subtracted softmax over a rank-1 tensor.
Tensor softmax(const Tensor& logits);

} // namespace produce
