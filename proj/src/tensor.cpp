#include "neft/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace neft {

namespace {

std::string shape_str(const std::vector<std::int64_t>& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

std::int64_t checked_numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        if (d <= 0) throw ShapeError("tensor dimension must be positive, got shape " + shape_str(shape));
        if (d != 0 && n > (std::int64_t{1} << 33) / d)
            throw ShapeError("tensor too large: shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

template <typename T>
T act_forward(T x, Activation kind) {
    switch (kind) {
        case Activation::relu:
            return x > T(0) ? x : T(0);
        case Activation::silu: {
            T s = T(1) / (T(1) + std::exp(-x));
            return x * s;
        }
        case Activation::gelu: {
            T r = std::sqrt(T(2));
            return T(0.5) * x * (T(1) + std::erf(x / r));
        }
    }
    return x;
}

template <typename T>
T act_backward(T x, Activation kind) {
    switch (kind) {
        case Activation::relu:
            return x > T(0) ? T(1) : T(0);
        case Activation::silu: {
            T s = T(1) / (T(1) + std::exp(-x));
            return s * (T(1) + x * (T(1) - s));
        }
        case Activation::gelu: {
            T r = std::sqrt(T(2));
            T cdf = T(0.5) * (T(1) + std::erf(x / r));
            T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * T(M_PI));
            T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
            return cdf + x * pdf;
        }
    }
    return T(1);
}

// C(m,n) += or = A(m,k)*B(k,n); inner loop runs over k left-to-right.
template <typename T>
void matmul_kernel(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            T acc = 0;
            for (std::int64_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
            c[i * n + j] = acc;
        }
    }
}

// C(m,n) = A(m,k)*B(n,k)^T
template <typename T>
void matmul_nt_kernel(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            T acc = 0;
            for (std::int64_t p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
            c[i * n + j] = acc;
        }
    }
}

// C(m,n) = A(k,m)^T*B(k,n): used by backward of matmul.
template <typename T>
void matmul_tn_kernel(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            T acc = 0;
            for (std::int64_t p = 0; p < k; ++p) acc += a[p * m + i] * b[p * n + j];
            c[i * n + j] = acc;
        }
    }
}

template <typename T>
void accumulate(T* dst, const T* src, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) dst[i] += src[i];
}

}  // namespace

const char* dtype_name(Dtype d) {
    return d == Dtype::f32 ? "f32" : "f64";
}

std::size_t dtype_size(Dtype d) {
    return d == Dtype::f32 ? sizeof(float) : sizeof(double);
}

const char* activation_name(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::silu: return "silu";
        case Activation::gelu: return "gelu";
    }
    return "?";
}

Activation activation_from_name(const std::string& name) {
    if (name == "relu") return Activation::relu;
    if (name == "silu") return Activation::silu;
    if (name == "gelu") return Activation::gelu;
    throw Error("unknown activation '" + name + "' (expected relu, silu or gelu)");
}

Tensor Tensor::zeros(std::vector<std::int64_t> shape, Dtype dtype) {
    std::int64_t n = checked_numel(shape);
    Tensor t;
    t.dtype_ = dtype;
    t.shape_ = std::move(shape);
    if (dtype == Dtype::f32)
        t.data_ = std::vector<float>(static_cast<std::size_t>(n), 0.0f);
    else
        t.data_ = std::vector<double>(static_cast<std::size_t>(n), 0.0);
    return t;
}

Tensor Tensor::of_f32(std::vector<std::int64_t> shape, std::vector<float> data) {
    std::int64_t n = checked_numel(shape);
    if (n != static_cast<std::int64_t>(data.size()))
        throw ShapeError("data length " + std::to_string(data.size()) + " does not fill shape " + shape_str(shape));
    Tensor t;
    t.dtype_ = Dtype::f32;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
}

Tensor Tensor::of_f64(std::vector<std::int64_t> shape, std::vector<double> data) {
    std::int64_t n = checked_numel(shape);
    if (n != static_cast<std::int64_t>(data.size()))
        throw ShapeError("data length " + std::to_string(data.size()) + " does not fill shape " + shape_str(shape));
    Tensor t;
    t.dtype_ = Dtype::f64;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
}

std::int64_t Tensor::numel() const {
    std::int64_t n = 1;
    for (auto d : shape_) n *= d;
    return n;
}

std::span<const float> Tensor::f32() const {
    if (dtype_ != Dtype::f32) throw DtypeError("tensor is f64, expected f32");
    return std::get<std::vector<float>>(data_);
}

std::span<float> Tensor::f32() {
    if (dtype_ != Dtype::f32) throw DtypeError("tensor is f64, expected f32");
    return std::get<std::vector<float>>(data_);
}

std::span<const double> Tensor::f64() const {
    if (dtype_ != Dtype::f64) throw DtypeError("tensor is f32, expected f64");
    return std::get<std::vector<double>>(data_);
}

std::span<double> Tensor::f64() {
    if (dtype_ != Dtype::f64) throw DtypeError("tensor is f32, expected f64");
    return std::get<std::vector<double>>(data_);
}

double Tensor::scalar_at(std::int64_t i) const {
    if (dtype_ == Dtype::f32) return static_cast<double>(f32()[static_cast<std::size_t>(i)]);
    return f64()[static_cast<std::size_t>(i)];
}

void Tensor::set_scalar(std::int64_t i, double v) {
    if (dtype_ == Dtype::f32)
        f32()[static_cast<std::size_t>(i)] = static_cast<float>(v);
    else
        f64()[static_cast<std::size_t>(i)] = v;
}

Tensor Tensor::to(Dtype target) const {
    if (target == dtype_) return *this;
    Tensor out = Tensor::zeros(shape_, target);
    std::int64_t n = numel();
    for (std::int64_t i = 0; i < n; ++i) out.set_scalar(i, scalar_at(i));
    return out;
}

bool Tensor::all_finite() const {
    std::int64_t n = numel();
    for (std::int64_t i = 0; i < n; ++i)
        if (!std::isfinite(scalar_at(i))) return false;
    return true;
}

const std::byte* Tensor::payload() const {
    if (dtype_ == Dtype::f32)
        return reinterpret_cast<const std::byte*>(std::get<std::vector<float>>(data_).data());
    return reinterpret_cast<const std::byte*>(std::get<std::vector<double>>(data_).data());
}

std::byte* Tensor::payload() {
    if (dtype_ == Dtype::f32) return reinterpret_cast<std::byte*>(std::get<std::vector<float>>(data_).data());
    return reinterpret_cast<std::byte*>(std::get<std::vector<double>>(data_).data());
}

std::size_t Tensor::payload_bytes() const {
    return static_cast<std::size_t>(numel()) * dtype_size(dtype_);
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

TensorId Tape::push(Node node, Tensor value) {
    nodes_.push_back(std::move(node));
    values_.push_back(std::move(value));
    return static_cast<TensorId>(nodes_.size() - 1);
}

const Tensor& Tape::checked(TensorId id, const char* who) const {
    if (id < 0 || static_cast<std::size_t>(id) >= values_.size())
        throw Error(std::string(who) + ": dangling tensor id " + std::to_string(id));
    return values_[static_cast<std::size_t>(id)];
}

const Tensor& Tape::value(TensorId id) const {
    return checked(id, "value");
}

TensorId Tape::leaf(Tensor value) {
    return push(Node{}, std::move(value));
}

namespace {
void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dtype() != b.dtype())
        throw DtypeError(std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) + " vs " +
                         dtype_name(b.dtype()) + ")");
}
}  // namespace

TensorId Tape::matmul(TensorId a, TensorId b) {
    const Tensor& ta = checked(a, "matmul");
    const Tensor& tb = checked(b, "matmul");
    require_same_dtype(ta, tb, "matmul");
    if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(ta.shape()) + " x " + shape_str(tb.shape()));
    std::int64_t m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
    Tensor out = Tensor::zeros({m, n}, ta.dtype());
    if (ta.dtype() == Dtype::f32)
        matmul_kernel(ta.f32().data(), tb.f32().data(), out.f32().data(), m, k, n);
    else
        matmul_kernel(ta.f64().data(), tb.f64().data(), out.f64().data(), m, k, n);
    Node node;
    node.op = Op::matmul;
    node.a = a;
    node.b = b;
    return push(std::move(node), std::move(out));
}

TensorId Tape::matmul_nt(TensorId a, TensorId b) {
    const Tensor& ta = checked(a, "matmul_nt");
    const Tensor& tb = checked(b, "matmul_nt");
    require_same_dtype(ta, tb, "matmul_nt");
    if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(1))
        throw ShapeError("matmul_nt: incompatible shapes " + shape_str(ta.shape()) + " x " + shape_str(tb.shape()) +
                         "^T");
    std::int64_t m = ta.dim(0), k = ta.dim(1), n = tb.dim(0);
    Tensor out = Tensor::zeros({m, n}, ta.dtype());
    if (ta.dtype() == Dtype::f32)
        matmul_nt_kernel(ta.f32().data(), tb.f32().data(), out.f32().data(), m, k, n);
    else
        matmul_nt_kernel(ta.f64().data(), tb.f64().data(), out.f64().data(), m, k, n);
    Node node;
    node.op = Op::matmul_nt;
    node.a = a;
    node.b = b;
    return push(std::move(node), std::move(out));
}

TensorId Tape::add(TensorId a, TensorId b) {
    const Tensor& ta = checked(a, "add");
    const Tensor& tb = checked(b, "add");
    require_same_dtype(ta, tb, "add");
    if (!ta.same_shape(tb))
        throw ShapeError("add: shape mismatch " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
    Tensor out = Tensor::zeros(ta.shape(), ta.dtype());
    std::int64_t n = ta.numel();
    if (ta.dtype() == Dtype::f32) {
        auto* o = out.f32().data();
        auto x = ta.f32();
        auto y = tb.f32();
        for (std::int64_t i = 0; i < n; ++i) o[i] = x[i] + y[i];
    } else {
        auto* o = out.f64().data();
        auto x = ta.f64();
        auto y = tb.f64();
        for (std::int64_t i = 0; i < n; ++i) o[i] = x[i] + y[i];
    }
    Node node;
    node.op = Op::add;
    node.a = a;
    node.b = b;
    return push(std::move(node), std::move(out));
}

TensorId Tape::bias_add(TensorId x, TensorId bias) {
    const Tensor& tx = checked(x, "bias_add");
    const Tensor& tb = checked(bias, "bias_add");
    require_same_dtype(tx, tb, "bias_add");
    if (tx.rank() != 2 || tb.rank() != 1 || tx.dim(1) != tb.dim(0))
        throw ShapeError("bias_add: shape mismatch " + shape_str(tx.shape()) + " + " + shape_str(tb.shape()));
    std::int64_t m = tx.dim(0), n = tx.dim(1);
    Tensor out = Tensor::zeros(tx.shape(), tx.dtype());
    if (tx.dtype() == Dtype::f32) {
        auto* o = out.f32().data();
        auto a = tx.f32();
        auto b = tb.f32();
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) o[i * n + j] = a[i * n + j] + b[j];
    } else {
        auto* o = out.f64().data();
        auto a = tx.f64();
        auto b = tb.f64();
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) o[i * n + j] = a[i * n + j] + b[j];
    }
    Node node;
    node.op = Op::bias_add;
    node.a = x;
    node.b = bias;
    return push(std::move(node), std::move(out));
}

TensorId Tape::scale(TensorId a, double factor) {
    const Tensor& ta = checked(a, "scale");
    Tensor out = Tensor::zeros(ta.shape(), ta.dtype());
    std::int64_t n = ta.numel();
    if (ta.dtype() == Dtype::f32) {
        float f = static_cast<float>(factor);
        auto x = ta.f32();
        auto* o = out.f32().data();
        for (std::int64_t i = 0; i < n; ++i) o[i] = f * x[i];
    } else {
        auto x = ta.f64();
        auto* o = out.f64().data();
        for (std::int64_t i = 0; i < n; ++i) o[i] = factor * x[i];
    }
    Node node;
    node.op = Op::scale;
    node.a = a;
    node.factor = factor;
    return push(std::move(node), std::move(out));
}

TensorId Tape::activation(TensorId a, Activation kind) {
    const Tensor& ta = checked(a, "activation");
    Tensor out = Tensor::zeros(ta.shape(), ta.dtype());
    std::int64_t n = ta.numel();
    if (ta.dtype() == Dtype::f32) {
        auto x = ta.f32();
        auto* o = out.f32().data();
        for (std::int64_t i = 0; i < n; ++i) o[i] = act_forward(x[i], kind);
    } else {
        auto x = ta.f64();
        auto* o = out.f64().data();
        for (std::int64_t i = 0; i < n; ++i) o[i] = act_forward(x[i], kind);
    }
    Node node;
    node.op = Op::activation;
    node.a = a;
    node.act = kind;
    return push(std::move(node), std::move(out));
}

TensorId Tape::embedding_gather(TensorId table, std::vector<std::int32_t> ids) {
    const Tensor& tt = checked(table, "embedding_gather");
    if (tt.rank() != 2) throw ShapeError("embedding_gather: table must be rank 2");
    std::int64_t v = tt.dim(0), d = tt.dim(1);
    for (std::size_t i = 0; i < ids.size(); ++i)
        if (ids[i] < 0 || ids[i] >= v)
            throw Error("embedding_gather: id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                        " out of range [0," + std::to_string(v) + ")");
    Tensor out = Tensor::zeros({static_cast<std::int64_t>(ids.size()), d}, tt.dtype());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        std::size_t src = static_cast<std::size_t>(ids[i]) * static_cast<std::size_t>(d);
        std::size_t dst = i * static_cast<std::size_t>(d);
        if (tt.dtype() == Dtype::f32)
            std::memcpy(out.f32().data() + dst, tt.f32().data() + src, sizeof(float) * static_cast<std::size_t>(d));
        else
            std::memcpy(out.f64().data() + dst, tt.f64().data() + src, sizeof(double) * static_cast<std::size_t>(d));
    }
    Node node;
    node.op = Op::embedding_gather;
    node.a = table;
    node.ids = std::move(ids);
    return push(std::move(node), std::move(out));
}

TensorId Tape::segment_mean(TensorId a, std::vector<std::int64_t> lengths) {
    const Tensor& ta = checked(a, "segment_mean");
    if (ta.rank() != 2) throw ShapeError("segment_mean: input must be rank 2");
    std::int64_t total = 0;
    for (auto l : lengths) {
        if (l <= 0) throw ShapeError("segment_mean: segment lengths must be positive");
        total += l;
    }
    if (total != ta.dim(0))
        throw ShapeError("segment_mean: lengths sum to " + std::to_string(total) + ", input has " +
                         std::to_string(ta.dim(0)) + " rows");
    std::int64_t d = ta.dim(1);
    Tensor out = Tensor::zeros({static_cast<std::int64_t>(lengths.size()), d}, ta.dtype());
    std::int64_t row = 0;
    for (std::size_t s = 0; s < lengths.size(); ++s) {
        std::int64_t len = lengths[s];
        for (std::int64_t j = 0; j < d; ++j) {
            if (ta.dtype() == Dtype::f32) {
                float acc = 0.0f;
                auto x = ta.f32();
                for (std::int64_t r = 0; r < len; ++r) acc += x[static_cast<std::size_t>((row + r) * d + j)];
                out.f32()[s * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)] =
                    acc / static_cast<float>(len);
            } else {
                double acc = 0.0;
                auto x = ta.f64();
                for (std::int64_t r = 0; r < len; ++r) acc += x[static_cast<std::size_t>((row + r) * d + j)];
                out.f64()[s * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)] =
                    acc / static_cast<double>(len);
            }
        }
        row += len;
    }
    Node node;
    node.op = Op::segment_mean;
    node.a = a;
    node.lengths = std::move(lengths);
    return push(std::move(node), std::move(out));
}

TensorId Tape::sum_all(TensorId a) {
    const Tensor& ta = checked(a, "sum_all");
    Tensor out = Tensor::zeros({1}, ta.dtype());
    std::int64_t n = ta.numel();
    if (ta.dtype() == Dtype::f32) {
        float acc = 0.0f;
        auto x = ta.f32();
        for (std::int64_t i = 0; i < n; ++i) acc += x[i];
        out.f32()[0] = acc;
    } else {
        double acc = 0.0;
        auto x = ta.f64();
        for (std::int64_t i = 0; i < n; ++i) acc += x[i];
        out.f64()[0] = acc;
    }
    Node node;
    node.op = Op::sum_all;
    node.a = a;
    return push(std::move(node), std::move(out));
}

namespace {
// log-sum-exp cross-entropy of one row; stable for any logit magnitude.
template <typename T>
T row_cross_entropy(const T* logits, std::int64_t c, std::int32_t label) {
    T m = logits[0];
    for (std::int64_t j = 1; j < c; ++j)
        if (logits[j] > m) m = logits[j];
    T sum = 0;
    for (std::int64_t j = 0; j < c; ++j) sum += std::exp(logits[j] - m);
    return std::log(sum) - (logits[label] - m);
}
}  // namespace

TensorId Tape::softmax_cross_entropy(TensorId logits, std::vector<std::int32_t> labels) {
    const Tensor& tl = checked(logits, "softmax_cross_entropy");
    if (tl.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be rank 2");
    std::int64_t b = tl.dim(0), c = tl.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != b)
        throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(b) + " rows");
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] < 0 || labels[i] >= c)
            throw Error("softmax_cross_entropy: label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                        " out of range [0," + std::to_string(c) + ")");
    Tensor out = Tensor::zeros({1}, tl.dtype());
    if (tl.dtype() == Dtype::f32) {
        auto x = tl.f32();
        float acc = 0.0f;
        for (std::int64_t i = 0; i < b; ++i) acc += row_cross_entropy(x.data() + i * c, c, labels[static_cast<std::size_t>(i)]);
        out.f32()[0] = acc / static_cast<float>(b);
    } else {
        auto x = tl.f64();
        double acc = 0.0;
        for (std::int64_t i = 0; i < b; ++i) acc += row_cross_entropy(x.data() + i * c, c, labels[static_cast<std::size_t>(i)]);
        out.f64()[0] = acc / static_cast<double>(b);
    }
    Node node;
    node.op = Op::softmax_ce;
    node.a = logits;
    node.ids = std::move(labels);
    return push(std::move(node), std::move(out));
}

std::vector<Tensor> Tape::backward(TensorId loss) const {
    const Tensor& lt = checked(loss, "backward");
    if (lt.numel() != 1)
        throw ShapeError("backward: loss must be scalar, got shape numel " + std::to_string(lt.numel()));
    Dtype dt = lt.dtype();

    std::vector<Tensor> grads(values_.size());
    for (std::size_t i = 0; i < values_.size(); ++i) grads[i] = Tensor::zeros(values_[i].shape(), values_[i].dtype());
    grads[static_cast<std::size_t>(loss)].set_scalar(0, 1.0);

    for (std::int64_t idx = loss; idx >= 0; --idx) {
        const Node& node = nodes_[static_cast<std::size_t>(idx)];
        if (node.op == Op::leaf) continue;
        const Tensor& g = grads[static_cast<std::size_t>(idx)];

        switch (node.op) {
            case Op::leaf:
                break;
            case Op::matmul: {
                const Tensor& a = values_[static_cast<std::size_t>(node.a)];
                const Tensor& b = values_[static_cast<std::size_t>(node.b)];
                Tensor& ga = grads[static_cast<std::size_t>(node.a)];
                Tensor& gb = grads[static_cast<std::size_t>(node.b)];
                std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
                if (dt == Dtype::f32) {
                    std::vector<float> tmp(static_cast<std::size_t>(m * k));
                    matmul_nt_kernel(g.f32().data(), b.f32().data(), tmp.data(), m, n, k);
                    accumulate(ga.f32().data(), tmp.data(), m * k);
                    std::vector<float> tmpb(static_cast<std::size_t>(k * n));
                    matmul_tn_kernel(a.f32().data(), g.f32().data(), tmpb.data(), k, m, n);
                    accumulate(gb.f32().data(), tmpb.data(), k * n);
                } else {
                    std::vector<double> tmp(static_cast<std::size_t>(m * k));
                    matmul_nt_kernel(g.f64().data(), b.f64().data(), tmp.data(), m, n, k);
                    accumulate(ga.f64().data(), tmp.data(), m * k);
                    std::vector<double> tmpb(static_cast<std::size_t>(k * n));
                    matmul_tn_kernel(a.f64().data(), g.f64().data(), tmpb.data(), k, m, n);
                    accumulate(gb.f64().data(), tmpb.data(), k * n);
                }
                break;
            }
            case Op::matmul_nt: {
                const Tensor& a = values_[static_cast<std::size_t>(node.a)];
                const Tensor& b = values_[static_cast<std::size_t>(node.b)];
                Tensor& ga = grads[static_cast<std::size_t>(node.a)];
                Tensor& gb = grads[static_cast<std::size_t>(node.b)];
                std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
                if (dt == Dtype::f32) {
                    std::vector<float> tmp(static_cast<std::size_t>(m * k));
                    matmul_kernel(g.f32().data(), b.f32().data(), tmp.data(), m, n, k);
                    accumulate(ga.f32().data(), tmp.data(), m * k);
                    std::vector<float> tmpb(static_cast<std::size_t>(n * k));
                    matmul_tn_kernel(g.f32().data(), a.f32().data(), tmpb.data(), n, m, k);
                    accumulate(gb.f32().data(), tmpb.data(), n * k);
                } else {
                    std::vector<double> tmp(static_cast<std::size_t>(m * k));
                    matmul_kernel(g.f64().data(), b.f64().data(), tmp.data(), m, n, k);
                    accumulate(ga.f64().data(), tmp.data(), m * k);
                    std::vector<double> tmpb(static_cast<std::size_t>(n * k));
                    matmul_tn_kernel(g.f64().data(), a.f64().data(), tmpb.data(), n, m, k);
                    accumulate(gb.f64().data(), tmpb.data(), n * k);
                }
                break;
            }
            case Op::add: {
                Tensor& ga = grads[static_cast<std::size_t>(node.a)];
                Tensor& gb = grads[static_cast<std::size_t>(node.b)];
                std::int64_t n = g.numel();
                if (dt == Dtype::f32) {
                    accumulate(ga.f32().data(), g.f32().data(), n);
                    accumulate(gb.f32().data(), g.f32().data(), n);
                } else {
                    accumulate(ga.f64().data(), g.f64().data(), n);
                    accumulate(gb.f64().data(), g.f64().data(), n);
                }
                break;
            }
            case Op::bias_add: {
                Tensor& ga = grads[static_cast<std::size_t>(node.a)];
                Tensor& gb = grads[static_cast<std::size_t>(node.b)];
                std::int64_t m = g.dim(0), n = g.dim(1);
                if (dt == Dtype::f32) {
                    accumulate(ga.f32().data(), g.f32().data(), m * n);
                    auto* db = gb.f32().data();
                    auto go = g.f32();
                    for (std::int64_t i = 0; i < m; ++i)
                        for (std::int64_t j = 0; j < n; ++j) db[j] += go[i * n + j];
                } else {
                    accumulate(ga.f64().data(), g.f64().data(), m * n);
                    auto* db = gb.f64().data();
                    auto go = g.f64();
                    for (std::int64_t i = 0; i < m; ++i)
                        for (std::int64_t j = 0; j < n; ++j) db[j] += go[i * n + j];
                }
                break;
            }
            case Op::scale: {
                Tensor& ga = grads[static_cast<std::size_t>(node.a)];
                std::int64_t n = g.numel();
                if (dt == Dtype::f32) {
                    float f = static_cast<float>(node.factor);
                    auto* da = ga.f32().data();
                    auto go = g.f32();
                    for (std::int64_t i = 0; i < n; ++i) da[i] += f * go[i];
                } else {
                    auto* da = ga.f64().data();
                    auto go = g.f64();
                    for (std::int64_t i = 0; i < n; ++i) da[i] += node.factor * go[i];
                }
                break;
            }
            case Op::activation: {
                const Tensor& a = values_[static_cast<std::size_t>(node.a)];
                Tensor& ga = grads[static_cast<std::size_t>(node.a)];
                std::int64_t n = g.numel();
                if (dt == Dtype::f32) {
                    auto x = a.f32();
                    auto go = g.f32();
                    auto* da = ga.f32().data();
                    for (std::int64_t i = 0; i < n; ++i) da[i] += act_backward(x[i], node.act) * go[i];
                } else {
                    auto x = a.f64();
                    auto go = g.f64();
                    auto* da = ga.f64().data();
                    for (std::int64_t i = 0; i < n; ++i) da[i] += act_backward(x[i], node.act) * go[i];
                }
                break;
            }
            case Op::embedding_gather: {
                Tensor& ga = grads[static_cast<std::size_t>(node.a)];
                std::int64_t d = g.dim(1);
                if (dt == Dtype::f32) {
                    auto go = g.f32();
                    auto* da = ga.f32().data();
                    for (std::size_t i = 0; i < node.ids.size(); ++i)
                        for (std::int64_t j = 0; j < d; ++j)
                            da[static_cast<std::size_t>(node.ids[i]) * static_cast<std::size_t>(d) +
                               static_cast<std::size_t>(j)] += go[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
                } else {
                    auto go = g.f64();
                    auto* da = ga.f64().data();
                    for (std::size_t i = 0; i < node.ids.size(); ++i)
                        for (std::int64_t j = 0; j < d; ++j)
                            da[static_cast<std::size_t>(node.ids[i]) * static_cast<std::size_t>(d) +
                               static_cast<std::size_t>(j)] += go[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
                }
                break;
            }
            case Op::segment_mean: {
                Tensor& ga = grads[static_cast<std::size_t>(node.a)];
                std::int64_t d = g.dim(1);
                std::int64_t row = 0;
                if (dt == Dtype::f32) {
                    auto go = g.f32();
                    auto* da = ga.f32().data();
                    for (std::size_t s = 0; s < node.lengths.size(); ++s) {
                        float inv = 1.0f / static_cast<float>(node.lengths[s]);
                        for (std::int64_t r = 0; r < node.lengths[s]; ++r)
                            for (std::int64_t j = 0; j < d; ++j)
                                da[static_cast<std::size_t>((row + r) * d + j)] +=
                                    inv * go[s * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
                        row += node.lengths[s];
                    }
                } else {
                    auto go = g.f64();
                    auto* da = ga.f64().data();
                    for (std::size_t s = 0; s < node.lengths.size(); ++s) {
                        double inv = 1.0 / static_cast<double>(node.lengths[s]);
                        for (std::int64_t r = 0; r < node.lengths[s]; ++r)
                            for (std::int64_t j = 0; j < d; ++j)
                                da[static_cast<std::size_t>((row + r) * d + j)] +=
                                    inv * go[s * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
                        row += node.lengths[s];
                    }
                }
                break;
            }
            case Op::sum_all: {
                Tensor& ga = grads[static_cast<std::size_t>(node.a)];
                std::int64_t n = ga.numel();
                if (dt == Dtype::f32) {
                    float go = g.f32()[0];
                    auto* da = ga.f32().data();
                    for (std::int64_t i = 0; i < n; ++i) da[i] += go;
                } else {
                    double go = g.f64()[0];
                    auto* da = ga.f64().data();
                    for (std::int64_t i = 0; i < n; ++i) da[i] += go;
                }
                break;
            }
            case Op::softmax_ce: {
                const Tensor& a = values_[static_cast<std::size_t>(node.a)];
                Tensor& ga = grads[static_cast<std::size_t>(node.a)];
                std::int64_t b = a.dim(0), c = a.dim(1);
                // d(mean CE)/dlogits = (softmax - onehot) / batch, scaled by upstream.
                if (dt == Dtype::f32) {
                    float go = g.f32()[0];
                    auto x = a.f32();
                    auto* da = ga.f32().data();
                    float invb = 1.0f / static_cast<float>(b);
                    for (std::int64_t i = 0; i < b; ++i) {
                        const float* row = x.data() + i * c;
                        float m = row[0];
                        for (std::int64_t j = 1; j < c; ++j)
                            if (row[j] > m) m = row[j];
                        float sum = 0.0f;
                        for (std::int64_t j = 0; j < c; ++j) sum += std::exp(row[j] - m);
                        for (std::int64_t j = 0; j < c; ++j) {
                            float p = std::exp(row[j] - m) / sum;
                            float onehot = node.ids[static_cast<std::size_t>(i)] == j ? 1.0f : 0.0f;
                            da[i * c + j] += go * invb * (p - onehot);
                        }
                    }
                } else {
                    double go = g.f64()[0];
                    auto x = a.f64();
                    auto* da = ga.f64().data();
                    double invb = 1.0 / static_cast<double>(b);
                    for (std::int64_t i = 0; i < b; ++i) {
                        const double* row = x.data() + i * c;
                        double m = row[0];
                        for (std::int64_t j = 1; j < c; ++j)
                            if (row[j] > m) m = row[j];
                        double sum = 0.0;
                        for (std::int64_t j = 0; j < c; ++j) sum += std::exp(row[j] - m);
                        for (std::int64_t j = 0; j < c; ++j) {
                            double p = std::exp(row[j] - m) / sum;
                            double onehot = node.ids[static_cast<std::size_t>(i)] == j ? 1.0 : 0.0;
                            da[i * c + j] += go * invb * (p - onehot);
                        }
                    }
                }
                break;
            }
        }
    }
    return grads;
}

}  // namespace neft
