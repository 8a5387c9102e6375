#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "neft/errors.hpp"

namespace neft {

enum class Dtype : std::uint8_t { f32, f64 };

const char* dtype_name(Dtype d);
std::size_t dtype_size(Dtype d);

enum class Activation : std::uint8_t { relu, silu, gelu };

const char* activation_name(Activation a);
Activation activation_from_name(const std::string& name);

/// Dense row-major tensor. f32 is the training dtype; f64 exists for the
/// oracle and gradient-check paths. Values are immutable once handed to a
/// Tape; mutation is reserved for the optimizer between steps.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::int64_t> shape, Dtype dtype);
    static Tensor of_f32(std::vector<std::int64_t> shape, std::vector<float> data);
    static Tensor of_f64(std::vector<std::int64_t> shape, std::vector<double> data);

    Dtype dtype() const { return dtype_; }
    const std::vector<std::int64_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::int64_t dim(std::size_t i) const { return shape_[i]; }
    std::int64_t numel() const;
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    std::span<const float> f32() const;
    std::span<float> f32();
    std::span<const double> f64() const;
    std::span<double> f64();

    /// Dtype-erased element access by flat row-major index.
    double scalar_at(std::int64_t i) const;
    void set_scalar(std::int64_t i, double v);

    Tensor to(Dtype target) const;
    bool all_finite() const;

    /// Raw little-endian payload view, for hashing and serialization.
    const std::byte* payload() const;
    std::byte* payload();
    std::size_t payload_bytes() const;

private:
    Dtype dtype_ = Dtype::f32;
    std::vector<std::int64_t> shape_;
    std::variant<std::vector<float>, std::vector<double>> data_;
};

using TensorId = std::int32_t;

/// Recorded tape of primitive ops for reverse-mode differentiation.
/// Nodes are appended in execution order so the list is already
/// topologically sorted; backward() walks it once in reverse.
///
/// Single-threaded by contract: one tape per training step, never shared.
class Tape {
public:
    /// Registers an input/parameter tensor and returns its id.
    TensorId leaf(Tensor value);

    /// C = A(m,k) * B(k,n)
    TensorId matmul(TensorId a, TensorId b);
    /// C = A(m,k) * B(n,k)^T. Keeps weight matrices in row-per-neuron
    /// layout without materializing transposes.
    TensorId matmul_nt(TensorId a, TensorId b);
    /// Elementwise sum, identical shapes.
    TensorId add(TensorId a, TensorId b);
    /// X(m,n) + b(n), broadcast over the leading axis only.
    TensorId bias_add(TensorId x, TensorId bias);
    TensorId scale(TensorId a, double factor);
    TensorId activation(TensorId a, Activation kind);
    /// Gathers rows of `table` (v,d) by id; result is (ids.size(), d).
    TensorId embedding_gather(TensorId table, std::vector<std::int32_t> ids);
    /// Mean over consecutive row groups: (sum(lengths), d) -> (lengths.size(), d).
    TensorId segment_mean(TensorId a, std::vector<std::int64_t> lengths);
    TensorId sum_all(TensorId a);
    /// Mean softmax cross-entropy over rows of logits (b,c); scalar result.
    TensorId softmax_cross_entropy(TensorId logits, std::vector<std::int32_t> labels);

    const Tensor& value(TensorId id) const;
    std::size_t size() const { return nodes_.size(); }

    /// Gradient of `loss` (must be scalar) w.r.t. every recorded tensor,
    /// indexed by TensorId. Tensors with no path to the loss get zeros.
    /// Accumulation is sequential in reverse node order: deterministic,
    /// bit-identical across runs.
    std::vector<Tensor> backward(TensorId loss) const;

private:
    enum class Op : std::uint8_t {
        leaf,
        matmul,
        matmul_nt,
        add,
        bias_add,
        scale,
        activation,
        embedding_gather,
        segment_mean,
        sum_all,
        softmax_ce,
    };

    struct Node {
        Op op = Op::leaf;
        TensorId a = -1;
        TensorId b = -1;
        Activation act = Activation::relu;
        double factor = 0.0;
        std::vector<std::int32_t> ids;       // embedding rows / labels
        std::vector<std::int64_t> lengths;   // segment sizes
    };

    TensorId push(Node node, Tensor value);
    const Tensor& checked(TensorId id, const char* who) const;

    std::vector<Node> nodes_;
    std::vector<Tensor> values_;
};

}  // namespace neft
