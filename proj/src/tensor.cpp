#include "refgame/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace refgame::ad {

namespace {
Dtype g_default_dtype = Dtype::F32;
bool g_grad_enabled = true;
}  // namespace

Dtype default_dtype() { return g_default_dtype; }
void set_default_dtype(Dtype dt) { g_default_dtype = dt; }

CheckModeGuard::CheckModeGuard() : saved(g_default_dtype) { g_default_dtype = Dtype::F64; }
CheckModeGuard::~CheckModeGuard() { g_default_dtype = saved; }

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

NoGradGuard::NoGradGuard() : saved(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = saved; }

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

int64_t Tensor::numel() const { return shape_numel(shape); }

template <> float* Tensor::data<float>() { return v32.data(); }
template <> double* Tensor::data<double>() { return v64.data(); }
template <> const float* Tensor::data<float>() const { return v32.data(); }
template <> const double* Tensor::data<double>() const { return v64.data(); }

template <> float* Tensor::grad<float>() {
    if (g32.empty()) g32.assign(static_cast<size_t>(numel()), 0.0f);
    return g32.data();
}
template <> double* Tensor::grad<double>() {
    if (g64.empty()) g64.assign(static_cast<size_t>(numel()), 0.0);
    return g64.data();
}

double Tensor::read(int64_t i) const {
    return dtype == Dtype::F32 ? static_cast<double>(v32[static_cast<size_t>(i)])
                               : v64[static_cast<size_t>(i)];
}

void Tensor::write(int64_t i, double v) {
    if (dtype == Dtype::F32) v32[static_cast<size_t>(i)] = static_cast<float>(v);
    else v64[static_cast<size_t>(i)] = v;
}

double Tensor::grad_read(int64_t i) const {
    if (dtype == Dtype::F32) return g32.empty() ? 0.0 : static_cast<double>(g32[static_cast<size_t>(i)]);
    return g64.empty() ? 0.0 : g64[static_cast<size_t>(i)];
}

double Tensor::item() const {
    if (numel() != 1) throw std::runtime_error("Tensor::item: tensor is not scalar, shape " + shape_str(shape));
    return read(0);
}

void Tensor::zero_grad() {
    g32.clear();
    g64.clear();
}

void Tensor::ensure_grad() {
    if (dtype == Dtype::F32) (void)grad<float>();
    else (void)grad<double>();
}

std::vector<double> Tensor::to_vector() const {
    std::vector<double> out(static_cast<size_t>(numel()));
    for (int64_t i = 0; i < numel(); ++i) out[static_cast<size_t>(i)] = read(i);
    return out;
}

TensorPtr make_tensor(std::vector<int64_t> shape, bool requires_grad) {
    return make_tensor(std::move(shape), g_default_dtype, requires_grad);
}

TensorPtr make_tensor(std::vector<int64_t> shape, Dtype dt, bool requires_grad) {
    for (int64_t d : shape) {
        if (d <= 0) throw std::runtime_error("make_tensor: non-positive extent in shape " + shape_str(shape));
    }
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->dtype = dt;
    const size_t n = static_cast<size_t>(t->numel());
    if (dt == Dtype::F32) t->v32.assign(n, 0.0f);
    else t->v64.assign(n, 0.0);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr constant(std::vector<int64_t> shape, const std::vector<double>& vals) {
    auto t = make_tensor(std::move(shape), false);
    if (static_cast<int64_t>(vals.size()) != t->numel())
        throw std::runtime_error("constant: value count does not match shape " + shape_str(t->shape));
    for (int64_t i = 0; i < t->numel(); ++i) t->write(i, vals[static_cast<size_t>(i)]);
    return t;
}

TensorPtr scalar(double v) { return constant({1}, {v}); }

TensorPtr full(std::vector<int64_t> shape, double v) {
    auto t = make_tensor(std::move(shape), false);
    for (int64_t i = 0; i < t->numel(); ++i) t->write(i, v);
    return t;
}

void check_finite(const Tensor& t, const char* op) {
    // |x| accumulated in double: Inf or NaN anywhere poisons the sum,
    // and a double accumulator cannot overflow on float-sized data
    double acc = 0.0;
    if (t.dtype == Dtype::F32) {
        const float* p = t.v32.data();
        const size_t n = t.v32.size();
        for (size_t i = 0; i < n; ++i) acc += std::fabs(static_cast<double>(p[i]));
    } else {
        const double* p = t.v64.data();
        const size_t n = t.v64.size();
        for (size_t i = 0; i < n; ++i) acc += std::fabs(p[i]);
    }
    if (!std::isfinite(acc))
        throw std::runtime_error(std::string("overflow: non-finite output of op '") + op + "'");
}

void backward(const TensorPtr& root) {
    if (!root) throw std::runtime_error("backward: null root");
    if (root->numel() != 1)
        throw std::runtime_error("backward: root must be scalar, got shape " + shape_str(root->shape));
    if (!root->on_tape())
        throw std::runtime_error("backward: root is detached from the tape");

    // iterative post-order DFS; each node visited once even when shared
    std::vector<Tensor*> topo;
    std::unordered_set<Tensor*> seen;
    std::vector<std::pair<Tensor*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Tensor* p = node->parents[idx].get();
            ++idx;
            if (p->on_tape() || p->requires_grad) {
                if (seen.insert(p).second) stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    // fresh pass for every interior node; leaves keep accumulating
    for (Tensor* t : topo) {
        if (t->on_tape()) t->zero_grad();
    }
    root->ensure_grad();
    if (root->dtype == Dtype::F32) root->g32[0] = 1.0f;
    else root->g64[0] = 1.0;

    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Tensor* t = *it;
        if (t->on_tape() && t->has_grad()) t->backward_fn(*t);
    }
}

}  // namespace refgame::ad
