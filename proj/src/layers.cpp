#include "refgame/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace refgame::nn {

namespace ad = refgame::ad;

TensorPtr init_matrix(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
    auto t = ad::make_tensor(std::move(shape), true);
    const double k = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (int64_t i = 0; i < t->numel(); ++i) t->write(i, rng.uniform(-k, k));
    return t;
}

namespace {

TensorPtr zero_param(std::vector<int64_t> shape) {
    auto t = ad::make_tensor(std::move(shape), true);
    return t;
}

}  // namespace

// ---------------------------------------------------------------- Linear

Linear::Linear(int64_t in_, int64_t out_, Rng& rng) : in(in_), out(out_) {
    w = init_matrix({in, out}, in, rng);
    b = zero_param({out});
}

TensorPtr Linear::forward(const TensorPtr& x) const {
    if (x->shape.size() == 1) {
        if (x->shape[0] != in)
            throw std::runtime_error("Linear: input has " + std::to_string(x->shape[0]) +
                                     " features, layer expects " + std::to_string(in));
        return ad::reshape(ad::add(ad::matmul(ad::reshape(x, {1, in}), w), b), {out});
    }
    if (x->shape.size() != 2 || x->shape[1] != in)
        throw std::runtime_error("Linear: input " + ad::shape_str(x->shape) + ", layer expects (N," +
                                 std::to_string(in) + ")");
    return ad::add(ad::matmul(x, w), b);
}

void Linear::params(ParamList& ps, const std::string& prefix) const {
    ps.push_back({prefix + ".w", w});
    ps.push_back({prefix + ".b", b});
}

// ---------------------------------------------------------------- Embedding

Embedding::Embedding(int64_t vocab_, int64_t dim_, Rng& rng) : vocab(vocab_), dim(dim_) {
    table = init_matrix({vocab, dim}, dim, rng);
}

TensorPtr Embedding::lookup(const std::vector<int64_t>& ids) const {
    return ad::embedding(table, ids);
}

void Embedding::params(ParamList& ps, const std::string& prefix) const {
    ps.push_back({prefix + ".table", table});
}

// ---------------------------------------------------------------- GruCell

GruCell::GruCell(int64_t input_, int64_t hidden_, Rng& rng) : input(input_), hidden(hidden_) {
    wz = init_matrix({input, hidden}, input, rng);
    uz = init_matrix({hidden, hidden}, hidden, rng);
    bz = zero_param({hidden});
    wr = init_matrix({input, hidden}, input, rng);
    ur = init_matrix({hidden, hidden}, hidden, rng);
    br = zero_param({hidden});
    wh = init_matrix({input, hidden}, input, rng);
    uh = init_matrix({hidden, hidden}, hidden, rng);
    bh = zero_param({hidden});
}

TensorPtr GruCell::step(const TensorPtr& h, const TensorPtr& x) const {
    if (h->shape.size() != 2 || x->shape.size() != 2 || h->shape[0] != x->shape[0] ||
        h->shape[1] != hidden || x->shape[1] != input)
        throw std::runtime_error("GruCell: state " + ad::shape_str(h->shape) + " with input " +
                                 ad::shape_str(x->shape) + ", cell is " + std::to_string(input) +
                                 "->" + std::to_string(hidden));
    auto z = ad::sigmoid(ad::add(ad::add(ad::matmul(x, wz), ad::matmul(h, uz)), bz));
    auto r = ad::sigmoid(ad::add(ad::add(ad::matmul(x, wr), ad::matmul(h, ur)), br));
    auto cand = ad::tanh_op(ad::add(ad::add(ad::matmul(x, wh), ad::matmul(ad::mul(r, h), uh)), bh));
    // (1-z)*h + z*cand, written as h + z*(cand - h)
    return ad::add(h, ad::mul(z, ad::sub(cand, h)));
}

TensorPtr GruCell::zero_state(int64_t batch) const { return ad::make_tensor({batch, hidden}); }

void GruCell::params(ParamList& ps, const std::string& prefix) const {
    ps.push_back({prefix + ".wz", wz});
    ps.push_back({prefix + ".uz", uz});
    ps.push_back({prefix + ".bz", bz});
    ps.push_back({prefix + ".wr", wr});
    ps.push_back({prefix + ".ur", ur});
    ps.push_back({prefix + ".br", br});
    ps.push_back({prefix + ".wh", wh});
    ps.push_back({prefix + ".uh", uh});
    ps.push_back({prefix + ".bh", bh});
}

// ---------------------------------------------------------------- ConvBlock

ConvBlock::ConvBlock(int64_t in_ch_, int64_t out_ch_, Rng& rng) : in_ch(in_ch_), out_ch(out_ch_) {
    w = init_matrix({out_ch, in_ch, 3, 3}, in_ch * 9, rng);
    b = zero_param({out_ch});
    gamma = zero_param({out_ch});
    for (int64_t i = 0; i < out_ch; ++i) gamma->write(i, 1.0);
    beta = zero_param({out_ch});
    running_mean = ad::full({out_ch}, 0.0);
    running_var = ad::full({out_ch}, 1.0);
}

TensorPtr ConvBlock::forward(const TensorPtr& x, bool training) {
    auto y = ad::conv2d(x, w, b);
    y = ad::batchnorm2d(y, gamma, beta, running_mean, running_var, training);
    return ad::maxpool2d(ad::relu(y));
}

void ConvBlock::params(ParamList& ps, const std::string& prefix) const {
    ps.push_back({prefix + ".w", w});
    ps.push_back({prefix + ".b", b});
    ps.push_back({prefix + ".gamma", gamma});
    ps.push_back({prefix + ".beta", beta});
}

void ConvBlock::buffers(ParamList& ps, const std::string& prefix) const {
    ps.push_back({prefix + ".running_mean", running_mean});
    ps.push_back({prefix + ".running_var", running_var});
}

// ---------------------------------------------------------------- CnnEncoder

CnnEncoder::CnnEncoder(int64_t image_hw_, Rng& rng) : image_hw(image_hw_) {
    if (image_hw % 16 != 0)
        throw std::runtime_error("CnnEncoder: image size " + std::to_string(image_hw) +
                                 " is not divisible by 16");
    blocks.emplace_back(3, 64, rng);
    blocks.emplace_back(64, 64, rng);
    blocks.emplace_back(64, 64, rng);
    blocks.emplace_back(64, 64, rng);
}

TensorPtr CnnEncoder::encode(const TensorPtr& images, bool training) {
    if (images->shape.size() != 4 || images->shape[1] != 3)
        throw std::runtime_error("CnnEncoder: expected (N,3,H,W), got " + ad::shape_str(images->shape));
    if (images->shape[2] % 16 != 0 || images->shape[3] % 16 != 0)
        throw std::runtime_error("CnnEncoder: H and W must be divisible by 16, got " +
                                 ad::shape_str(images->shape));
    auto y = images;
    for (auto& blk : blocks) y = blk.forward(y, training);
    const int64_t n = y->shape[0];
    return ad::reshape(y, {n, y->numel() / n});
}

void CnnEncoder::params(ParamList& ps, const std::string& prefix) const {
    for (size_t i = 0; i < blocks.size(); ++i)
        blocks[i].params(ps, prefix + ".block" + std::to_string(i + 1));
}

void CnnEncoder::buffers(ParamList& ps, const std::string& prefix) const {
    for (size_t i = 0; i < blocks.size(); ++i)
        blocks[i].buffers(ps, prefix + ".block" + std::to_string(i + 1));
}

// ---------------------------------------------------------------- snapshots

std::vector<std::vector<double>> snapshot_values(const ParamList& ps) {
    std::vector<std::vector<double>> out;
    out.reserve(ps.size());
    for (const auto& p : ps) out.push_back(p.t->to_vector());
    return out;
}

void restore_values(const ParamList& ps, const std::vector<std::vector<double>>& vals) {
    if (vals.size() != ps.size())
        throw std::invalid_argument("restore_values: snapshot holds " +
                                    std::to_string(vals.size()) + " tensors, list has " +
                                    std::to_string(ps.size()));
    for (size_t i = 0; i < ps.size(); ++i) {
        auto& t = *ps[i].t;
        if (static_cast<int64_t>(vals[i].size()) != t.numel())
            throw std::invalid_argument("restore_values: size mismatch for '" + ps[i].name + "'");
        for (int64_t j = 0; j < t.numel(); ++j) t.write(j, vals[i][static_cast<size_t>(j)]);
    }
}

uint64_t values_hash(const ParamList& ps) {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](const unsigned char* bytes, size_t n) {
        for (size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ull;
        }
    };
    for (const auto& p : ps) {
        const auto& t = *p.t;
        if (t.dtype == ad::Dtype::F32)
            mix(reinterpret_cast<const unsigned char*>(t.v32.data()), t.v32.size() * sizeof(float));
        else
            mix(reinterpret_cast<const unsigned char*>(t.v64.data()), t.v64.size() * sizeof(double));
    }
    return h;
}

// ---------------------------------------------------------------- Adam

Adam::Adam(ParamList params_, double lr_) : lr(lr_), params(std::move(params_)) {
    m.resize(params.size());
    v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        const size_t n = static_cast<size_t>(params[i].t->numel());
        m[i].assign(n, 0.0);
        v[i].assign(n, 0.0);
    }
}

void Adam::step() {
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = *params[pi].t;
        const int64_t n = p.numel();
        const bool has = p.has_grad();
        for (int64_t i = 0; i < n; ++i) {
            const double g = has ? p.grad_read(i) : 0.0;
            if (!std::isfinite(g))
                throw std::runtime_error("Adam: non-finite gradient in parameter '" +
                                         params[pi].name + "'");
            double& mi = m[pi][static_cast<size_t>(i)];
            double& vi = v[pi][static_cast<size_t>(i)];
            mi = beta1 * mi + (1.0 - beta1) * g;
            vi = beta2 * vi + (1.0 - beta2) * g * g;
            const double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps);
            p.write(i, p.read(i) - update);
        }
    }
}

void Adam::zero_grad() {
    for (auto& p : params) p.t->zero_grad();
}

AdamState save_state(const Adam& adam) {
    AdamState s;
    s.m = adam.m;
    s.v = adam.v;
    s.step_count = adam.step_count;
    return s;
}

void load_state(Adam& adam, const AdamState& state) {
    if (state.m.size() != adam.params.size() || state.v.size() != adam.params.size())
        throw std::invalid_argument("load_state: optimizer state holds " +
                                    std::to_string(state.m.size()) + " arrays for " +
                                    std::to_string(adam.params.size()) + " parameters");
    for (size_t i = 0; i < adam.params.size(); ++i)
        if (state.m[i].size() != adam.m[i].size() || state.v[i].size() != adam.v[i].size())
            throw std::invalid_argument("load_state: moment sizes do not match parameter '" +
                                        adam.params[i].name + "'");
    adam.m = state.m;
    adam.v = state.v;
    adam.step_count = state.step_count;
}

}  // namespace refgame::nn
