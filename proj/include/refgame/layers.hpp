#pragma once

#include <string>
#include <vector>

#include "refgame/ops.hpp"
#include "refgame/rng.hpp"
#include "refgame/tensor.hpp"

namespace refgame::nn {

using ad::TensorPtr;

struct Param {
    std::string name;
    TensorPtr t;
};
using ParamList = std::vector<Param>;

// uniform(-k, k) with k = 1/sqrt(fan_in)
TensorPtr init_matrix(std::vector<int64_t> shape, int64_t fan_in, Rng& rng);

struct Linear {
    int64_t in = 0, out = 0;
    TensorPtr w;  // (in, out)
    TensorPtr b;  // (out)

    Linear() = default;
    Linear(int64_t in, int64_t out, Rng& rng);
    TensorPtr forward(const TensorPtr& x) const;  // (N,in) -> (N,out), or (in) -> (out)
    void params(ParamList& ps, const std::string& prefix) const;
};

struct Embedding {
    int64_t vocab = 0, dim = 0;
    TensorPtr table;  // (vocab, dim)

    Embedding() = default;
    Embedding(int64_t vocab, int64_t dim, Rng& rng);
    TensorPtr lookup(const std::vector<int64_t>& ids) const;  // (B, dim)
    void params(ParamList& ps, const std::string& prefix) const;
};

// Gates: z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br),
// candidate = tanh(x Wh + (r*h) Uh + bh), h' = (1-z)*h + z*candidate.
struct GruCell {
    int64_t input = 0, hidden = 0;
    TensorPtr wz, uz, bz;
    TensorPtr wr, ur, br;
    TensorPtr wh, uh, bh;

    GruCell() = default;
    GruCell(int64_t input, int64_t hidden, Rng& rng);
    TensorPtr step(const TensorPtr& h, const TensorPtr& x) const;  // (B,H),(B,I) -> (B,H)
    TensorPtr zero_state(int64_t batch) const;
    void params(ParamList& ps, const std::string& prefix) const;
};

// 3x3 conv (64 filters), batchnorm, ReLU, 2x2 maxpool
struct ConvBlock {
    int64_t in_ch = 0, out_ch = 0;
    TensorPtr w, b;          // conv
    TensorPtr gamma, beta;   // batchnorm, learned
    TensorPtr running_mean, running_var;  // batchnorm state

    ConvBlock() = default;
    ConvBlock(int64_t in_ch, int64_t out_ch, Rng& rng);
    TensorPtr forward(const TensorPtr& x, bool training);
    void params(ParamList& ps, const std::string& prefix) const;
    void buffers(ParamList& ps, const std::string& prefix) const;
};

// Four conv blocks; 16x total spatial reduction, 64 channels out.
// (N,3,H,W) -> (N, (H/16)*(W/16)*64)
struct CnnEncoder {
    int64_t image_hw = 0;
    std::vector<ConvBlock> blocks;

    CnnEncoder() = default;
    CnnEncoder(int64_t image_hw, Rng& rng);
    int64_t out_dim() const { return (image_hw / 16) * (image_hw / 16) * 64; }
    TensorPtr encode(const TensorPtr& images, bool training);
    void params(ParamList& ps, const std::string& prefix) const;
    void buffers(ParamList& ps, const std::string& prefix) const;
};

// value copies for best-epoch snapshots during early stopping
std::vector<std::vector<double>> snapshot_values(const ParamList& ps);
void restore_values(const ParamList& ps, const std::vector<std::vector<double>>& vals);

// FNV-1a over the raw little-endian value bytes of every tensor in the list
uint64_t values_hash(const ParamList& ps);

// Bias-corrected Adam. Moment buffers are kept in double regardless of the
// parameter dtype. step() consumes the gradients currently stored on the
// parameters; it does not clear them.
struct Adam {
    double lr;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int64_t step_count = 0;
    ParamList params;
    std::vector<std::vector<double>> m, v;

    Adam(ParamList params, double lr);
    void step();
    void zero_grad();
};

// Moment buffers and step counter detached from an optimizer so a later run
// can pick up mid-schedule (bias correction depends on the step count).
struct AdamState {
    std::vector<std::vector<double>> m, v;
    int64_t step_count = 0;
    bool empty() const { return step_count == 0 && m.empty(); }
};

AdamState save_state(const Adam& adam);
// rejects a state whose array count or sizes do not match the parameters
void load_state(Adam& adam, const AdamState& state);

}  // namespace refgame::nn
