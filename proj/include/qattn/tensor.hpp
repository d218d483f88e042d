#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <vector>

#include "qattn/common.hpp"
#include "qattn/rng.hpp"

namespace qattn {

/// 64-byte-aligned allocation so every tensor buffer starts on the same
/// SIMD boundary. Vectorized kernels (Eigen's and the compiler's) split
/// loops based on runtime alignment; pinning it keeps reductions bit-stable
/// across processes, which the reproducibility guarantees rely on.
template <typename T>
struct AlignedAlloc {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAlloc() = default;
    template <typename U>
    AlignedAlloc(const AlignedAlloc<U>&) {}

    T* allocate(size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, size_t) noexcept { ::operator delete(p, kAlign); }

    template <typename U>
    bool operator==(const AlignedAlloc<U>&) const {
        return true;
    }
};

/// Dense row-major N-d array with value semantics. Copies share storage;
/// a tensor's contents are treated as immutable once it leaves the function
/// that built it (gradient accumulators, owned by Parameter, are the one
/// deliberate exception).
template <typename T>
class Tensor {
  public:
    using Storage = std::vector<T, AlignedAlloc<T>>;

    Tensor() : data_(std::make_shared<Storage>()) {}

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<Storage>(checked_numel(shape_), T(0))) {}

    Tensor(Shape shape, const std::vector<T>& values)
        : shape_(std::move(shape)),
          data_(std::make_shared<Storage>(values.begin(), values.end())) {
        if (shape_numel(shape_) != static_cast<int64_t>(data_->size()))
            throw ShapeError("tensor init: shape " + shape_str(shape_) + " needs " +
                             std::to_string(shape_numel(shape_)) + " values, got " +
                             std::to_string(data_->size()));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T v) {
        Tensor t(std::move(shape));
        std::fill(t.data_->begin(), t.data_->end(), v);
        return t;
    }

    static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

    /// i.i.d. uniform values in [lo, hi).
    static Tensor uniform(Shape shape, RngState& rng, T lo = T(-1), T hi = T(1)) {
        Tensor t(std::move(shape));
        for (T& v : *t.data_) v = lo + static_cast<T>(rng.uniform()) * (hi - lo);
        return t;
    }

    /// i.i.d. normal values with the given mean / stddev.
    static Tensor normal(Shape shape, RngState& rng, T mean = T(0), T stddev = T(1)) {
        Tensor t(std::move(shape));
        for (T& v : *t.data_) v = mean + static_cast<T>(rng.normal()) * stddev;
        return t;
    }

    const Shape& shape() const { return shape_; }
    int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
    int64_t dim(int64_t i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data_->size()); }
    bool empty() const { return data_->empty(); }

    T* data() { return data_->data(); }
    const T* data() const { return data_->data(); }

    T& operator[](int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

    T& at(std::initializer_list<int64_t> idx) { return (*data_)[offset(idx)]; }
    const T& at(std::initializer_list<int64_t> idx) const { return (*data_)[offset(idx)]; }

    /// Deep copy with unshared storage.
    Tensor clone() const {
        Tensor t(shape_);
        std::copy(data_->begin(), data_->end(), t.data_->begin());
        return t;
    }

    /// Same storage viewed under a different shape (element count must agree).
    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != numel())
            throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " +
                             shape_str(shape));
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_->size());
        for (size_t i = 0; i < data_->size(); ++i) out[i] = static_cast<U>((*data_)[i]);
        return Tensor<U>(shape_, std::move(out));
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        for (const T& v : *data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

  private:
    static int64_t checked_numel(const Shape& s) {
        for (int64_t d : s)
            if (d <= 0) throw ShapeError("tensor init: non-positive extent in " + shape_str(s));
        return shape_numel(s);
    }

    size_t offset(std::initializer_list<int64_t> idx) const {
        int64_t off = 0;
        size_t k = 0;
        for (int64_t i : idx) {
            off = off * shape_[k] + i;
            ++k;
        }
        return static_cast<size_t>(off);
    }

    Shape shape_;
    std::shared_ptr<Storage> data_;
};

/// Trainable tensor: value plus a same-shaped gradient accumulator and a
/// dotted path name used for checkpoints and audits.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Parameter() = default;
    Parameter(std::string name_, Tensor<T> value_)
        : name(std::move(name_)), value(std::move(value_)), grad(Tensor<T>::zeros(value.shape())) {}

    void zero_grad() { std::fill(grad.data(), grad.data() + grad.numel(), T(0)); }
    int64_t numel() const { return value.numel(); }
};

template <typename T>
using ParamRefs = std::vector<Parameter<T>*>;

template <typename T>
inline int64_t total_param_count(const ParamRefs<T>& params) {
    int64_t n = 0;
    for (const auto* p : params) n += p->numel();
    return n;
}

template <typename T>
inline void zero_grads(const ParamRefs<T>& params) {
    for (auto* p : params) p->zero_grad();
}

}  // namespace qattn
