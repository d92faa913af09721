#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace refgame::ad {

// Training runs in 32-bit floats; check mode (finite-difference gradient
// verification) switches new tensors to 64-bit.
enum class Dtype { F32, F64 };

Dtype default_dtype();
void set_default_dtype(Dtype dt);

// RAII scope for check mode
struct CheckModeGuard {
    CheckModeGuard();
    ~CheckModeGuard();
    Dtype saved;
};

// Global autograd switch; inference paths disable taping for speed.
bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    bool saved;
};

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

struct Tensor {
    std::vector<int64_t> shape;
    Dtype dtype = Dtype::F32;
    std::vector<float> v32;
    std::vector<double> v64;
    bool requires_grad = false;

    // gradient buffer, same dtype/shape as values; absent until first use
    std::vector<float> g32;
    std::vector<double> g64;

    // tape
    std::vector<TensorPtr> parents;
    std::function<void(Tensor&)> backward_fn;  // propagates this->grad into parents
    const char* op = "leaf";

    int64_t numel() const;
    bool on_tape() const { return static_cast<bool>(backward_fn); }
    bool has_grad() const { return !g32.empty() || !g64.empty(); }

    template <class T> T* data();
    template <class T> const T* data() const;
    template <class T> T* grad();  // allocates zeroed on first call

    double read(int64_t i) const;        // dtype-generic element read
    void write(int64_t i, double v);     // dtype-generic element write
    double grad_read(int64_t i) const;
    double item() const;                 // scalar value (numel()==1)

    void zero_grad();
    void ensure_grad();
    std::vector<double> to_vector() const;
};

TensorPtr make_tensor(std::vector<int64_t> shape, bool requires_grad = false);
TensorPtr make_tensor(std::vector<int64_t> shape, Dtype dt, bool requires_grad);
TensorPtr constant(std::vector<int64_t> shape, const std::vector<double>& vals);
TensorPtr scalar(double v);
TensorPtr full(std::vector<int64_t> shape, double v);

// Reverse pass from a scalar root. Leaf gradients accumulate additively
// across repeated calls; intermediate gradients are reset per call.
void backward(const TensorPtr& root);

// throws on NaN/Inf anywhere in t (overflow is an error, not a silent value)
void check_finite(const Tensor& t, const char* op);

std::string shape_str(const std::vector<int64_t>& shape);
int64_t shape_numel(const std::vector<int64_t>& shape);

}  // namespace refgame::ad
