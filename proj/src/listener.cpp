#include "refgame/listener.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "refgame/ops.hpp"

namespace refgame::agents {

bool lex_less(const std::vector<int64_t>& a, const std::vector<int64_t>& b) {
    return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

static void validate_utterance(const world::Vocabulary& v, const std::vector<int64_t>& ids) {
    if (ids.empty()) throw std::invalid_argument("listener: empty utterance");
    for (int64_t id : ids)
        if (id < 0 || id >= v.size())
            throw std::out_of_range("listener: token id " + std::to_string(id) +
                                    " outside vocabulary (size " + std::to_string(v.size()) + ")");
}

LiteralListener::LiteralListener(const world::Vocabulary& vocab_, const ListenerConfig& cfg_,
                                 uint64_t seed)
    : vocab(vocab_), cfg(cfg_) {
    Rng rng(seed);
    img_enc = nn::CnnEncoder(cfg.image_size, rng);
    emb = nn::Embedding(vocab.size(), cfg.embed_dim, rng);
    gru = nn::GruCell(cfg.embed_dim, cfg.hidden, rng);
    proj = nn::Linear(cfg.hidden, img_enc.out_dim(), rng);
}

TensorPtr LiteralListener::encode_images_eval(const TensorPtr& images) {
    ad::NoGradGuard ng;
    if (images->shape.size() != 4 || images->shape[0] != 3)
        throw std::invalid_argument("listener: expected a (3,3,H,W) game stack, got " +
                                    ad::shape_str(images->shape));
    return img_enc.encode(images, /*training=*/false);
}

std::array<double, 3> LiteralListener::prob_from_dots(const std::array<double, 3>& dots) {
    const double mx = std::max({dots[0], dots[1], dots[2]});
    std::array<double, 3> e{};
    double s = 0.0;
    for (int i = 0; i < 3; ++i) {
        e[i] = std::exp(dots[i] - mx);
        s += e[i];
    }
    for (int i = 0; i < 3; ++i) e[i] /= s;
    return e;
}

std::array<double, 3> LiteralListener::prob_cached(const TensorPtr& image_feats,
                                                   const Utterance& u) {
    validate_utterance(vocab, u.ids);
    ad::NoGradGuard ng;
    std::vector<int64_t> seq = u.ids;
    seq.push_back(vocab.eos);
    TensorPtr g = encode_utterances_taped({seq});  // (1, D)
    const int64_t d = g->numel();
    if (image_feats->shape.size() != 2 || image_feats->shape[0] != 3 || image_feats->shape[1] != d)
        throw std::invalid_argument("listener: image features must be (3," + std::to_string(d) +
                                    "), got " + ad::shape_str(image_feats->shape));
    std::array<double, 3> dots{};
    for (int i = 0; i < 3; ++i) {
        double acc = 0.0;
        for (int64_t j = 0; j < d; ++j) acc += image_feats->read(i * d + j) * g->read(j);
        dots[i] = acc;
    }
    return prob_from_dots(dots);
}

std::array<double, 3> LiteralListener::prob(const TensorPtr& images, const Utterance& u) {
    return prob_cached(encode_images_eval(images), u);
}

TensorPtr LiteralListener::encode_utterances_taped(
    const std::vector<std::vector<int64_t>>& seqs) {
    const int64_t b = static_cast<int64_t>(seqs.size());
    size_t max_t = 0;
    for (const auto& s : seqs) max_t = std::max(max_t, s.size());
    TensorPtr h = gru.zero_state(b);
    for (size_t t = 0; t < max_t; ++t) {
        std::vector<int64_t> ids(static_cast<size_t>(b), vocab.eos);
        std::vector<double> mask(static_cast<size_t>(b), 0.0);
        bool all_active = true;
        for (int64_t r = 0; r < b; ++r) {
            if (t < seqs[static_cast<size_t>(r)].size()) {
                ids[static_cast<size_t>(r)] = seqs[static_cast<size_t>(r)][t];
                mask[static_cast<size_t>(r)] = 1.0;
            } else {
                all_active = false;
            }
        }
        TensorPtr x = emb.lookup(ids);
        TensorPtr hn = gru.step(h, x);
        if (all_active) {
            h = hn;
        } else {
            std::vector<double> mrows(static_cast<size_t>(b * gru.hidden));
            for (int64_t r = 0; r < b; ++r)
                std::fill_n(mrows.begin() + r * gru.hidden, gru.hidden,
                            mask[static_cast<size_t>(r)]);
            TensorPtr m = ad::constant({b, gru.hidden}, mrows);
            h = ad::add(h, ad::mul(m, ad::sub(hn, h)));
        }
    }
    return proj.forward(h);
}

TensorPtr LiteralListener::scores_taped(const std::vector<TensorPtr>& game_images,
                                        const std::vector<std::vector<int64_t>>& utterances,
                                        bool train_mode) {
    const int64_t b = static_cast<int64_t>(game_images.size());
    if (b == 0) throw std::invalid_argument("listener: empty batch");
    if (utterances.size() != game_images.size())
        throw std::invalid_argument("listener: " + std::to_string(game_images.size()) +
                                    " games but " + std::to_string(utterances.size()) +
                                    " utterances");
    const int64_t hw = cfg.image_size;
    TensorPtr imgs = ad::make_tensor({b * 3, 3, hw, hw});
    const int64_t per_game = 3 * 3 * hw * hw;
    for (int64_t g = 0; g < b; ++g) {
        const auto& t = *game_images[static_cast<size_t>(g)];
        if (t.numel() != per_game)
            throw std::invalid_argument("listener: game image stack has wrong size");
        if (t.dtype == ad::Dtype::F32 && imgs->dtype == ad::Dtype::F32)
            std::memcpy(imgs->v32.data() + g * per_game, t.v32.data(),
                        static_cast<size_t>(per_game) * sizeof(float));
        else
            for (int64_t i = 0; i < per_game; ++i) imgs->write(g * per_game + i, t.read(i));
    }
    TensorPtr feats = img_enc.encode(imgs, train_mode);  // (B*3, D)
    std::vector<std::vector<int64_t>> seqs = utterances;
    for (auto& s : seqs) {
        validate_utterance(vocab, s);
        s.push_back(vocab.eos);
    }
    TensorPtr text = encode_utterances_taped(seqs);     // (B, D)
    TensorPtr rep = ad::repeat_rows(text, 3);           // (B*3, D)
    TensorPtr dots = ad::rowdot(feats, rep);            // (B*3)
    return ad::reshape(dots, {b, 3});
}

TensorPtr LiteralListener::encode_soft_utterance(const std::vector<TensorPtr>& soft_tokens) {
    if (soft_tokens.empty()) throw std::invalid_argument("listener: empty utterance");
    TensorPtr h = gru.zero_state(1);
    for (const auto& y : soft_tokens) {
        if (y->shape.size() != 2 || y->shape[0] != 1 || y->shape[1] != vocab.size())
            throw std::invalid_argument("listener: soft token must be (1," +
                                        std::to_string(vocab.size()) + "), got " +
                                        ad::shape_str(y->shape));
        TensorPtr x = ad::matmul(y, emb.table);  // (1, embed_dim)
        h = gru.step(h, x);
    }
    return proj.forward(h);  // (1, D)
}

nn::ParamList LiteralListener::params(const std::string& prefix) const {
    nn::ParamList ps;
    img_enc.params(ps, prefix + ".cnn");
    emb.params(ps, prefix + ".emb");
    gru.params(ps, prefix + ".gru");
    proj.params(ps, prefix + ".proj");
    return ps;
}

nn::ParamList LiteralListener::buffers(const std::string& prefix) const {
    nn::ParamList ps;
    img_enc.buffers(ps, prefix + ".cnn");
    return ps;
}

uint64_t LiteralListener::param_hash() const {
    nn::ParamList all = params("listener");
    for (auto& p : buffers("listener")) all.push_back(p);
    return nn::values_hash(all);
}

void LiteralListener::freeze() {
    frozen_ = true;
    for (auto& p : params("")) p.t->requires_grad = false;
}

double listener_gold_accuracy(LiteralListener& L, const world::Dataset& ds,
                              world::RenderCache& cache, const std::vector<int64_t>& idx) {
    if (idx.empty()) throw std::invalid_argument("listener accuracy: empty game set");
    int64_t hits = 0;
    for (int64_t i : idx) {
        const auto& game = ds.games[static_cast<size_t>(i)];
        Utterance u{ds.vocab.encode(game.gold), false};
        auto p = L.prob(cache.game_images(i), u);
        const int pick = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
        if (pick == game.target) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(idx.size());
}

TrainStats train_listener(LiteralListener& L, const ListenerTrainData& data, Rng& rng,
                          nn::AdamState* opt_state) {
    if (!data.ds || !data.cache) throw std::invalid_argument("train_listener: missing dataset");
    if (data.train_idx.empty() || data.val_idx.empty())
        throw std::invalid_argument("train_listener: empty train or validation set");
    if (!data.train_utterances.empty() && data.train_utterances.size() != data.train_idx.size())
        throw std::invalid_argument("train_listener: utterance list does not match train set");
    if (L.frozen()) throw std::logic_error("train_listener: listener is frozen");

    const auto& ds = *data.ds;
    std::vector<std::vector<int64_t>> utts(data.train_idx.size());
    for (size_t i = 0; i < data.train_idx.size(); ++i) {
        if (!data.train_utterances.empty())
            utts[i] = data.train_utterances[i];
        else
            utts[i] = ds.vocab.encode(ds.games[static_cast<size_t>(data.train_idx[i])].gold);
        validate_utterance(ds.vocab, utts[i]);
    }

    nn::ParamList ps = L.params("listener");
    nn::Adam adam(ps, L.cfg.lr);
    if (opt_state && !opt_state->empty()) nn::load_state(adam, *opt_state);
    nn::ParamList state = ps;
    for (auto& p : L.buffers("listener")) state.push_back(p);

    TrainStats stats;
    auto best = nn::snapshot_values(state);
    stats.best_val_accuracy = listener_gold_accuracy(L, ds, *data.cache, data.val_idx);
    stats.best_epoch = 0;

    std::vector<size_t> order(data.train_idx.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 1; epoch <= L.cfg.max_epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        int64_t batches = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(L.cfg.batch)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(L.cfg.batch));
            const int64_t b = static_cast<int64_t>(end - start);
            std::vector<TensorPtr> games;
            std::vector<std::vector<int64_t>> batch_utts;
            std::vector<double> sel(static_cast<size_t>(b * 3), 0.0);
            games.reserve(static_cast<size_t>(b));
            for (size_t k = start; k < end; ++k) {
                const int64_t gi = data.train_idx[order[k]];
                games.push_back(data.cache->game_images(gi));
                batch_utts.push_back(utts[order[k]]);
                sel[(k - start) * 3 + static_cast<size_t>(ds.games[static_cast<size_t>(gi)].target)] = 1.0;
            }
            TensorPtr scores = L.scores_taped(games, batch_utts, /*train_mode=*/true);
            TensorPtr logp = ad::log_softmax(scores);
            TensorPtr picked = ad::mul(logp, ad::constant({b, 3}, sel));
            TensorPtr loss = ad::affine(ad::sum(picked), -1.0 / static_cast<double>(b), 0.0);
            ad::backward(loss);
            adam.step();
            adam.zero_grad();
            loss_sum += loss->item();
            ++batches;
        }
        stats.final_train_loss = loss_sum / static_cast<double>(batches);
        stats.epochs_run = epoch;
        stats.train_loss_history.push_back(stats.final_train_loss);

        const double val_acc = listener_gold_accuracy(L, ds, *data.cache, data.val_idx);
        stats.val_accuracy_history.push_back(val_acc);
        if (val_acc > stats.best_val_accuracy) {
            stats.best_val_accuracy = val_acc;
            stats.best_epoch = epoch;
            best = nn::snapshot_values(state);
        } else if (epoch - stats.best_epoch >= L.cfg.patience) {
            break;
        }
    }
    nn::restore_values(state, best);
    if (opt_state) *opt_state = nn::save_state(adam);
    return stats;
}

}  // namespace refgame::agents
