#pragma once

#include "refgame/rng.hpp"
#include "refgame/tensor.hpp"

namespace refgame::ad {

// Elementwise / linear algebra. Every op validates shapes (errors name the
// op and both shapes), records a tape node when gradients are required, and
// rejects non-finite outputs.

TensorPtr add(const TensorPtr& a, const TensorPtr& b);  // same shape, or (N,D)+(D) bias row broadcast
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr affine(const TensorPtr& a, double scale, double shift);  // scale*a + shift
TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);          // (M,K)x(K,N)

// 3x3 convolution, stride 1, zero padding 1. x:(N,C,H,W) w:(F,C,3,3) b:(F)
TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b);
// 2x2 max pooling, stride 2. x:(N,C,H,W), H and W even
TensorPtr maxpool2d(const TensorPtr& x);

// Batch normalization over (N,H,W) per channel. running_mean/running_var are
// state buffers (not taped); training mode uses batch statistics and updates
// them with the given momentum, eval mode reads them.
TensorPtr batchnorm2d(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                      TensorPtr& running_mean, TensorPtr& running_var,
                      bool training, double momentum = 0.1, double eps = 1e-5);

TensorPtr relu(const TensorPtr& x);
TensorPtr tanh_op(const TensorPtr& x);
TensorPtr sigmoid(const TensorPtr& x);

// concat along axis 0 or 1 (1-D tensors: axis 0 only)
TensorPtr concat(const std::vector<TensorPtr>& parts, int axis);

// rows of table selected by ids: (B, D) out of table (V, D)
TensorPtr embedding(const TensorPtr& table, const std::vector<int64_t>& ids);

// rowwise over the last dimension; x is (D) or (N,D)
TensorPtr softmax(const TensorPtr& x);
TensorPtr log_softmax(const TensorPtr& x);

TensorPtr dot(const TensorPtr& a, const TensorPtr& b);  // 1-D x 1-D -> scalar
TensorPtr sum(const TensorPtr& x);                      // all elements -> scalar
TensorPtr mean(const TensorPtr& x);

TensorPtr reshape(const TensorPtr& x, std::vector<int64_t> shape);
TensorPtr repeat_rows(const TensorPtr& x, int64_t k);   // each row repeated k consecutive times
TensorPtr rowdot(const TensorPtr& a, const TensorPtr& b);  // (N,D),(N,D) -> (N)

// Gumbel-Softmax sample of softmax((logits+G)/tau). Soft mode returns the
// relaxed sample; hard mode returns exact one-hot rows forward while the
// backward pass uses the soft sample's Jacobian (straight-through).
// logits is (D) or (N,D); noise must match its shape.
TensorPtr gumbel_softmax_st(const TensorPtr& logits, double tau, bool hard, Rng& rng);
TensorPtr gumbel_softmax_st_with_noise(const TensorPtr& logits, double tau, bool hard,
                                       const TensorPtr& noise);

TensorPtr gumbel_noise_like(const TensorPtr& t, Rng& rng);

}  // namespace refgame::ad
