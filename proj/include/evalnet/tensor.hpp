#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "evalnet/errors.hpp"
#include "evalnet/rng.hpp"

namespace evalnet {

// Engine-wide numeric mode. Float32 is the training/inference mode: every
// stored value (forward results, gradients, optimizer state) is rounded
// through IEEE binary32 so runs behave like single-precision training while
// all arithmetic is carried out in double. Float64 skips the rounding and is
// used for finite-difference gradient checks.
enum class Precision { Float32, Float64 };

Precision precision();
void set_precision(Precision p);

// Rounds v to the active precision before it is stored.
double store_round(double v);

class PrecisionGuard {
public:
    explicit PrecisionGuard(Precision p) : saved_(precision()) { set_precision(p); }
    ~PrecisionGuard() { set_precision(saved_); }
    PrecisionGuard(const PrecisionGuard&) = delete;
    PrecisionGuard& operator=(const PrecisionGuard&) = delete;

private:
    Precision saved_;
};

struct TensorImpl {
    std::vector<int> shape;
    std::vector<double> data;
    bool requires_grad = false;  // leaf parameter/input flag
    bool tracked = false;        // produced by a recorded op on the active tape
    std::vector<double> grad;    // same length as data once touched by backward
};

// Dense row-major float tensor handle. Copies share the underlying buffer;
// clone() makes an independent one. Image data follows the N,C,H,W layout.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape, double fill = 0.0);

    static Tensor from_data(std::vector<int> shape, std::vector<double> data);
    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor full(std::vector<int> shape, double v) { return Tensor(std::move(shape), v); }
    static Tensor scalar(double v) { return from_data({1}, {v}); }
    // Zero-mean Gaussian draw, values rounded to the active precision.
    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0);
    static Tensor uniform(std::vector<int> shape, Rng& rng, double lo = 0.0, double hi = 1.0);

    bool defined() const { return impl != nullptr; }
    const std::vector<int>& shape() const { return impl->shape; }
    int dim(int i) const;
    int rank() const { return static_cast<int>(impl->shape.size()); }
    std::size_t size() const { return impl->data.size(); }

    std::span<const double> data() const { return impl->data; }
    std::span<double> mutable_data() { return impl->data; }
    double at(std::size_t i) const { return impl->data[i]; }
    double item() const;

    bool requires_grad() const { return impl->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl->requires_grad = v;
        return *this;
    }
    bool tracked() const { return impl->tracked; }

    bool has_grad() const { return !impl->grad.empty(); }
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void ensure_grad();
    void zero_grad();

    // Deep copy; detaches from any tape history.
    Tensor clone() const;

    bool same_shape(const Tensor& other) const { return impl->shape == other.impl->shape; }

    std::shared_ptr<TensorImpl> impl;
};

std::size_t shape_size(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Reverse-mode tape. Ops append entries in execution order, so the list is
// topologically sorted by construction; backward() replays it once in
// reverse. One tape is active at a time (single-threaded per training step).
class Tape {
public:
    struct Entry {
        std::shared_ptr<TensorImpl> output;
        std::function<void()> backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::shared_ptr<TensorImpl> output, std::function<void()> fn) {
        entries_.push_back({std::move(output), std::move(fn)});
    }
    std::size_t size() const { return entries_.size(); }
    const std::vector<Entry>& entries() const { return entries_; }
    void clear() { entries_.clear(); }

private:
    std::vector<Entry> entries_;
};

Tape* active_tape();

class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* saved_;
};

class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* saved_;
};

// True when an op with these inputs should be recorded.
bool grad_enabled(std::initializer_list<const Tensor*> inputs);

}  // namespace evalnet
