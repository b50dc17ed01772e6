#include "evalnet/tensor.hpp"

#include <sstream>

namespace evalnet {

namespace {
Precision g_precision = Precision::Float32;
Tape* g_active_tape = nullptr;
}  // namespace

Precision precision() { return g_precision; }
void set_precision(Precision p) { g_precision = p; }

double store_round(double v) {
    return g_precision == Precision::Float32 ? static_cast<double>(static_cast<float>(v)) : v;
}

std::size_t shape_size(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw ShapeError("non-positive extent in " + shape_str(shape));
        n *= static_cast<std::size_t>(e);
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

Tensor::Tensor(std::vector<int> shape, double fill) {
    const std::size_t n = shape_size(shape);
    impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data.assign(n, store_round(fill));
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data) {
    const std::size_t n = shape_size(shape);
    if (n != data.size())
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match " +
                         shape_str(shape));
    Tensor t;
    t.impl = std::make_shared<TensorImpl>();
    t.impl->shape = std::move(shape);
    t.impl->data = std::move(data);
    for (double& v : t.impl->data) v = store_round(v);
    return t;
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev) {
    const std::size_t n = shape_size(shape);
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = rng.normal() * stddev;
    return from_data(std::move(shape), std::move(data));
}

Tensor Tensor::uniform(std::vector<int> shape, Rng& rng, double lo, double hi) {
    const std::size_t n = shape_size(shape);
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = lo + (hi - lo) * rng.uniform();
    return from_data(std::move(shape), std::move(data));
}

int Tensor::dim(int i) const {
    if (i < 0 || i >= rank()) throw ShapeError("dim index out of range");
    return impl->shape[static_cast<std::size_t>(i)];
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() requires a scalar tensor, got " + shape_str(shape()));
    return impl->data[0];
}

std::span<const double> Tensor::grad() const {
    if (impl->grad.empty()) throw DataError("gradient not populated");
    return impl->grad;
}

std::span<double> Tensor::mutable_grad() {
    ensure_grad();
    return impl->grad;
}

void Tensor::ensure_grad() {
    if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0);
}

void Tensor::zero_grad() {
    if (!impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0);
}

Tensor Tensor::clone() const {
    Tensor t;
    t.impl = std::make_shared<TensorImpl>();
    t.impl->shape = impl->shape;
    t.impl->data = impl->data;
    t.impl->requires_grad = impl->requires_grad;
    return t;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : saved_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = saved_; }

NoGradScope::NoGradScope() : saved_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = saved_; }

bool grad_enabled(std::initializer_list<const Tensor*> inputs) {
    if (!g_active_tape) return false;
    for (const Tensor* t : inputs)
        if (t->impl && (t->impl->requires_grad || t->impl->tracked)) return true;
    return false;
}

}  // namespace evalnet
