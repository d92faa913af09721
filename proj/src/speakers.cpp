#include "refgame/speakers.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <stdexcept>

#include "refgame/ops.hpp"

namespace refgame::agents {

SpeakerCore::SpeakerCore(const world::Vocabulary& vocab_, const SpeakerConfig& cfg_, uint64_t seed)
    : vocab(vocab_), cfg(cfg_) {
    Rng rng(seed);
    img_enc = nn::CnnEncoder(cfg.image_size, rng);
    const int64_t ctx_dim = img_enc.out_dim() * (cfg.contextual ? 3 : 1);
    h0_proj = nn::Linear(ctx_dim, cfg.effective_hidden(), rng);
    emb = nn::Embedding(vocab.size(), cfg.embed_dim, rng);
    gru = nn::GruCell(cfg.embed_dim, cfg.effective_hidden(), rng);
    out = nn::Linear(cfg.effective_hidden(), vocab.size(), rng);
}

TensorPtr SpeakerCore::context_features_batch(const std::vector<TensorPtr>& game_images,
                                              const std::vector<int>& targets, bool training) {
    const int64_t b = static_cast<int64_t>(game_images.size());
    if (b == 0) throw std::invalid_argument("speaker: empty batch");
    if (targets.size() != game_images.size())
        throw std::invalid_argument("speaker: " + std::to_string(game_images.size()) +
                                    " games but " + std::to_string(targets.size()) + " targets");
    const int64_t hw = cfg.image_size;
    const int64_t plane = 3 * hw * hw;  // one image
    const int64_t per = cfg.contextual ? 3 : 1;
    TensorPtr imgs = ad::make_tensor({b * per, 3, hw, hw});
    for (int64_t g = 0; g < b; ++g) {
        const auto& t = *game_images[static_cast<size_t>(g)];
        if (t.numel() != 3 * plane)
            throw std::invalid_argument("speaker: game image stack has wrong size for image_size " +
                                        std::to_string(hw));
        const int tgt = targets[static_cast<size_t>(g)];
        if (tgt < 0 || tgt > 2)
            throw std::out_of_range("speaker: target index " + std::to_string(tgt));
        std::vector<int> order{tgt};
        if (cfg.contextual)
            for (int i = 0; i < 3; ++i)
                if (i != tgt) order.push_back(i);
        for (int64_t k = 0; k < per; ++k) {
            const int64_t src = order[static_cast<size_t>(k)] * plane;
            const int64_t dst = (g * per + k) * plane;
            if (t.dtype == ad::Dtype::F32 && imgs->dtype == ad::Dtype::F32)
                std::memcpy(imgs->v32.data() + dst, t.v32.data() + src,
                            static_cast<size_t>(plane) * sizeof(float));
            else
                for (int64_t i = 0; i < plane; ++i) imgs->write(dst + i, t.read(src + i));
        }
    }
    TensorPtr feats = img_enc.encode(imgs, training);
    if (cfg.contextual) return ad::reshape(feats, {b, 3 * img_enc.out_dim()});
    return feats;
}

TensorPtr SpeakerCore::context_features(const TensorPtr& game_images, int target, bool training) {
    return context_features_batch({game_images}, {target}, training);
}

TensorPtr SpeakerCore::initial_hidden(const TensorPtr& ctx) {
    return ad::tanh_op(h0_proj.forward(ctx));
}

static int64_t row_argmax(const ad::Tensor& t, int64_t row, int64_t width) {
    int64_t best = 0;
    double bv = t.read(row * width);
    for (int64_t j = 1; j < width; ++j) {
        const double v = t.read(row * width + j);
        if (v > bv) {
            bv = v;
            best = j;
        }
    }
    return best;
}

Utterance SpeakerCore::decode(const TensorPtr& game_images, int target, bool sample, Rng* rng) {
    if (sample && !rng) throw std::invalid_argument("speaker: sampling requires an rng");
    ad::NoGradGuard ng;
    TensorPtr h = initial_hidden(context_features(game_images, target, /*training=*/false));
    Utterance u;
    int64_t prev = vocab.bos;
    for (int t = 0; t < cfg.max_len; ++t) {
        TensorPtr x = emb.lookup({prev});
        h = gru.step(h, x);
        TensorPtr logits = out.forward(h);  // (1, V)
        int64_t tok;
        if (sample) {
            tok = static_cast<int64_t>(rng->categorical(ad::softmax(logits)->to_vector()));
        } else {
            tok = row_argmax(*logits, 0, vocab.size());
        }
        if (tok == vocab.eos) return u;
        u.ids.push_back(tok);
        prev = tok;
    }
    u.truncated = true;
    return u;
}

TensorPtr SpeakerCore::batch_nll(const std::vector<TensorPtr>& game_images,
                                 const std::vector<int>& targets,
                                 const std::vector<std::vector<int64_t>>& gold) {
    const int64_t b = static_cast<int64_t>(game_images.size());
    if (gold.size() != game_images.size())
        throw std::invalid_argument("speaker: " + std::to_string(game_images.size()) +
                                    " games but " + std::to_string(gold.size()) + " utterances");
    const int64_t v = vocab.size();
    size_t max_len = 0;
    int64_t total_tokens = 0;
    for (const auto& g : gold) {
        for (int64_t id : g)
            if (id < 0 || id >= v)
                throw std::out_of_range("speaker: token id " + std::to_string(id) +
                                        " outside vocabulary (size " + std::to_string(v) + ")");
        max_len = std::max(max_len, g.size());
        total_tokens += static_cast<int64_t>(g.size()) + 1;  // + terminator
    }
    TensorPtr h = initial_hidden(context_features_batch(game_images, targets, /*training=*/true));
    std::vector<int64_t> prev(static_cast<size_t>(b), vocab.bos);
    TensorPtr acc;
    for (size_t t = 0; t <= max_len; ++t) {
        TensorPtr x = emb.lookup(prev);
        h = gru.step(h, x);
        TensorPtr lp = ad::log_softmax(out.forward(h));  // (B, V)
        std::vector<double> sel(static_cast<size_t>(b * v), 0.0);
        for (int64_t r = 0; r < b; ++r) {
            const auto& g = gold[static_cast<size_t>(r)];
            if (t < g.size())
                sel[static_cast<size_t>(r * v + g[t])] = 1.0;
            else if (t == g.size())
                sel[static_cast<size_t>(r * v + vocab.eos)] = 1.0;
            prev[static_cast<size_t>(r)] = t < g.size() ? g[t] : vocab.eos;
        }
        TensorPtr term = ad::sum(ad::mul(lp, ad::constant({b, v}, sel)));
        acc = acc ? ad::add(acc, term) : term;
    }
    return ad::affine(acc, -1.0 / static_cast<double>(total_tokens), 0.0);
}

nn::ParamList SpeakerCore::params(const std::string& prefix) const {
    nn::ParamList ps;
    img_enc.params(ps, prefix + ".cnn");
    h0_proj.params(ps, prefix + ".h0");
    emb.params(ps, prefix + ".emb");
    gru.params(ps, prefix + ".gru");
    out.params(ps, prefix + ".out");
    return ps;
}

nn::ParamList SpeakerCore::buffers(const std::string& prefix) const {
    nn::ParamList ps;
    img_enc.buffers(ps, prefix + ".cnn");
    return ps;
}

// ------------------------------------------------------------ naive training

double core_greedy_accuracy(SpeakerCore& sp, LiteralListener& L, const world::Dataset& ds,
                            world::RenderCache& cache, const std::vector<int64_t>& idx) {
    if (idx.empty()) throw std::invalid_argument("speaker accuracy: empty game set");
    int64_t hits = 0;
    for (int64_t i : idx) {
        const auto& game = ds.games[static_cast<size_t>(i)];
        const TensorPtr& imgs = cache.game_images(i);
        Utterance u = sp.decode(imgs, game.target, /*sample=*/false, nullptr);
        if (u.ids.empty()) continue;  // nothing said, counts as a miss
        auto p = L.prob(imgs, u);
        if (static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()) == game.target)
            ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(idx.size());
}

TrainStats train_captioner(SpeakerCore& sp, const world::Dataset& ds, world::RenderCache& cache,
                           const std::vector<int64_t>& train_idx,
                           const std::vector<int64_t>& val_idx, LiteralListener& val_listener,
                           Rng& rng, nn::AdamState* opt_state) {
    if (train_idx.empty() || val_idx.empty())
        throw std::invalid_argument("train_captioner: empty train or validation set");
    std::vector<std::vector<int64_t>> gold(train_idx.size());
    for (size_t i = 0; i < train_idx.size(); ++i)
        gold[i] = ds.vocab.encode(ds.games[static_cast<size_t>(train_idx[i])].gold);

    nn::ParamList ps = sp.params("speaker");
    nn::Adam adam(ps, sp.cfg.lr);
    if (opt_state && !opt_state->empty()) nn::load_state(adam, *opt_state);
    nn::ParamList state = ps;
    for (auto& p : sp.buffers("speaker")) state.push_back(p);

    TrainStats stats;
    auto best = nn::snapshot_values(state);
    stats.best_val_accuracy = core_greedy_accuracy(sp, val_listener, ds, cache, val_idx);
    stats.best_epoch = 0;

    std::vector<size_t> order(train_idx.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 1; epoch <= sp.cfg.max_epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        int64_t batches = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(sp.cfg.batch)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(sp.cfg.batch));
            std::vector<TensorPtr> games;
            std::vector<int> targets;
            std::vector<std::vector<int64_t>> batch_gold;
            for (size_t k = start; k < end; ++k) {
                const int64_t gi = train_idx[order[k]];
                games.push_back(cache.game_images(gi));
                targets.push_back(ds.games[static_cast<size_t>(gi)].target);
                batch_gold.push_back(gold[order[k]]);
            }
            TensorPtr loss = sp.batch_nll(games, targets, batch_gold);
            ad::backward(loss);
            adam.step();
            adam.zero_grad();
            loss_sum += loss->item();
            ++batches;
        }
        stats.final_train_loss = loss_sum / static_cast<double>(batches);
        stats.train_loss_history.push_back(stats.final_train_loss);
        stats.epochs_run = epoch;

        const double val_acc = core_greedy_accuracy(sp, val_listener, ds, cache, val_idx);
        stats.val_accuracy_history.push_back(val_acc);
        if (val_acc > stats.best_val_accuracy) {
            stats.best_val_accuracy = val_acc;
            stats.best_epoch = epoch;
            best = nn::snapshot_values(state);
        } else if (epoch - stats.best_epoch >= sp.cfg.patience) {
            break;
        }
    }
    nn::restore_values(state, best);
    if (opt_state) *opt_state = nn::save_state(adam);
    sp.trained = true;
    return stats;
}

// ---------------------------------------------------------------- enumeration

double utterance_cost(const Utterance& u, double lambda) {
    return lambda * static_cast<double>(u.ids.size());
}

std::vector<Utterance> enumerate_utterances(const world::Vocabulary& vocab,
                                            const std::string& policy, int max_len,
                                            int64_t budget) {
    std::vector<std::vector<int64_t>> seqs;
    if (policy == "grammar") {
        std::vector<int64_t> colors, shapes;
        for (int c = 0; c < world::kNumColors; ++c) {
            const std::string name = world::color_name(static_cast<world::Color>(c));
            auto it = vocab.index.find(name);
            if (it == vocab.index.end())
                throw std::invalid_argument(
                    "grammar enumeration needs color and shape words; vocabulary lacks '" + name +
                    "'");
            colors.push_back(it->second);
        }
        for (int s = 0; s < world::kNumShapes; ++s) {
            const std::string name = world::shape_name(static_cast<world::Shape>(s));
            auto it = vocab.index.find(name);
            if (it == vocab.index.end())
                throw std::invalid_argument(
                    "grammar enumeration needs color and shape words; vocabulary lacks '" + name +
                    "'");
            shapes.push_back(it->second);
        }
        auto git = vocab.index.find("shape");
        if (git == vocab.index.end())
            throw std::invalid_argument(
                "grammar enumeration needs color and shape words; vocabulary lacks 'shape'");
        const int64_t generic = git->second;
        for (int64_t c : colors) seqs.push_back({c});
        for (int64_t s : shapes) seqs.push_back({s});
        for (int64_t c : colors)
            for (int64_t s : shapes) seqs.push_back({c, s});
        for (int64_t c : colors) seqs.push_back({c, generic});
    } else if (policy == "exhaustive") {
        if (max_len < 1) throw std::invalid_argument("enumeration: max_len must be at least 1");
        std::vector<int64_t> content;
        for (int64_t id = 0; id < vocab.size(); ++id)
            if (id != vocab.bos && id != vocab.eos && id != vocab.unk) content.push_back(id);
        const double m = static_cast<double>(content.size());
        double count = 0.0;
        double pw = 1.0;
        for (int k = 1; k <= max_len; ++k) {
            pw *= m;
            count += pw;
        }
        if (count > static_cast<double>(budget)) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.0f", count);
            throw std::invalid_argument("exhaustive enumeration would produce " + std::string(buf) +
                                        " utterances, budget is " + std::to_string(budget));
        }
        std::vector<int64_t> cur;
        auto rec = [&](auto&& self, int depth) -> void {
            for (int64_t id : content) {
                cur.push_back(id);
                seqs.push_back(cur);
                if (depth + 1 < max_len) self(self, depth + 1);
                cur.pop_back();
            }
        };
        rec(rec, 0);
    } else {
        throw std::invalid_argument("unknown enumeration policy '" + policy + "'");
    }
    std::sort(seqs.begin(), seqs.end(), lex_less);
    std::vector<Utterance> out;
    out.reserve(seqs.size());
    for (auto& s : seqs) out.push_back(Utterance{std::move(s), false});
    return out;
}

// ------------------------------------------------------------------ reranking

RsaResult rsa_rerank(LiteralListener& L, const TensorPtr& game_images, int target,
                     const std::vector<Utterance>& candidates, double lambda) {
    if (candidates.empty()) throw std::invalid_argument("rsa: empty utterance set");
    if (target < 0 || target > 2)
        throw std::out_of_range("rsa: target index " + std::to_string(target));
    RsaResult r;
    r.scores.reserve(candidates.size());
    for (const auto& u : candidates) {
        const auto p = L.prob(game_images, u);
        r.scores.push_back(std::log(std::max(p[static_cast<size_t>(target)], 1e-300)) -
                           utterance_cost(u, lambda));
    }
    size_t best = 0;
    for (size_t i = 1; i < candidates.size(); ++i) {
        if (r.scores[i] > r.scores[best] ||
            (r.scores[i] == r.scores[best] && lex_less(candidates[i].ids, candidates[best].ids)))
            best = i;
    }
    r.index = static_cast<int64_t>(best);
    r.chosen = candidates[best];
    const double mx = *std::max_element(r.scores.begin(), r.scores.end());
    r.distribution.resize(r.scores.size());
    double z = 0.0;
    for (size_t i = 0; i < r.scores.size(); ++i) {
        r.distribution[i] = std::exp(r.scores[i] - mx);
        z += r.distribution[i];
    }
    for (auto& d : r.distribution) d /= z;
    return r;
}

RsaResult speak_rsa_full(LiteralListener& L, const TensorPtr& game_images, int target,
                         const std::vector<Utterance>& utterance_set, double lambda) {
    return rsa_rerank(L, game_images, target, utterance_set, lambda);
}

RsaResult speak_rsa_srr(SpeakerCore& s0, LiteralListener& L, const TensorPtr& game_images,
                        int target, int sample_count, double lambda, Rng& rng) {
    if (!s0.trained) throw std::logic_error("srr: base speaker has not been trained");
    if (sample_count <= 0) throw std::invalid_argument("srr: sample_count must be positive");
    std::vector<Utterance> cands;
    cands.reserve(static_cast<size_t>(sample_count));
    for (int m = 0; m < sample_count; ++m) {
        Utterance u = s0.decode(game_images, target, /*sample=*/true, &rng);
        if (!u.ids.empty()) cands.push_back(std::move(u));
    }
    if (cands.empty()) throw std::runtime_error("srr: every sampled utterance was empty");
    return rsa_rerank(L, game_images, target, cands, lambda);
}

// ------------------------------------------------------------------ amortized

AmortizedStep amortized_loss(SpeakerCore& sp, LiteralListener& frozen_listener,
                             const TensorPtr& game_images, const TensorPtr& listener_feats,
                             int target, double lambda, double tau, Rng& rng, bool hard) {
    if (!frozen_listener.frozen())
        throw std::logic_error("amortized loss requires a frozen listener");
    if (target < 0 || target > 2)
        throw std::out_of_range("amortized: target index " + std::to_string(target));
    const int64_t v = sp.vocab.size();
    if (frozen_listener.vocab.size() != v)
        throw std::invalid_argument("amortized: speaker and listener vocabularies differ");
    const int64_t d = frozen_listener.img_enc.out_dim();
    if (listener_feats->shape.size() != 2 || listener_feats->shape[0] != 3 ||
        listener_feats->shape[1] != d)
        throw std::invalid_argument("amortized: listener features must be (3," + std::to_string(d) +
                                    "), got " + ad::shape_str(listener_feats->shape));

    TensorPtr h = sp.initial_hidden(sp.context_features(game_images, target, /*training=*/true));
    std::vector<double> eos_row(static_cast<size_t>(v), 0.0);
    eos_row[static_cast<size_t>(sp.vocab.eos)] = 1.0;
    TensorPtr eos_onehot = ad::constant({1, v}, eos_row);

    AmortizedStep step;
    std::vector<TensorPtr> soft_tokens;
    TensorPtr cost_acc, prev_soft;
    bool saw_eos = false;
    for (int t = 1; t <= sp.cfg.max_len; ++t) {
        TensorPtr x =
            prev_soft ? ad::matmul(prev_soft, sp.emb.table) : sp.emb.lookup({sp.vocab.bos});
        h = sp.gru.step(h, x);
        TensorPtr logits = sp.out.forward(h);  // (1, V)
        // expected-stop penalty: lambda * t * (1 - q_t(</s>))
        TensorPtr q_eos = ad::sum(ad::mul(ad::softmax(logits), eos_onehot));
        step.stop_probs.push_back(q_eos->item());
        TensorPtr term = ad::affine(q_eos, -lambda * t, lambda * t);
        cost_acc = cost_acc ? ad::add(cost_acc, term) : term;

        TensorPtr y = ad::gumbel_softmax_st(logits, tau, hard, rng);
        const int64_t tok = row_argmax(*y, 0, v);
        soft_tokens.push_back(y);
        if (tok == sp.vocab.eos) {
            saw_eos = true;
            break;
        }
        step.sampled.ids.push_back(tok);
        prev_soft = y;
    }
    if (!saw_eos) {
        step.sampled.truncated = true;
        soft_tokens.push_back(eos_onehot);
    }
    TensorPtr g = frozen_listener.encode_soft_utterance(soft_tokens);  // (1, D)
    TensorPtr dots = ad::rowdot(listener_feats, ad::repeat_rows(g, 3));  // (3)
    TensorPtr lp = ad::log_softmax(dots);
    std::vector<double> trow(3, 0.0);
    trow[static_cast<size_t>(target)] = 1.0;
    TensorPtr picked = ad::sum(ad::mul(lp, ad::constant({3}, trow)));
    step.target_logprob = picked->item();
    step.cost_value = cost_acc->item();
    step.loss = ad::add(ad::affine(picked, -1.0, 0.0), cost_acc);
    return step;
}

TrainStats train_amortized(SpeakerCore& sp, LiteralListener& frozen_listener,
                           const world::Dataset& ds, world::RenderCache& cache,
                           const std::vector<int64_t>& train_idx,
                           const std::vector<int64_t>& val_idx, LiteralListener& val_listener,
                           double lambda, double tau, Rng& rng, nn::AdamState* opt_state) {
    if (!frozen_listener.frozen())
        throw std::logic_error("train_amortized: listener must be frozen first");
    if (train_idx.empty() || val_idx.empty())
        throw std::invalid_argument("train_amortized: empty train or validation set");
    const uint64_t listener_hash = frozen_listener.param_hash();

    std::vector<TensorPtr> feats(train_idx.size());
    for (size_t i = 0; i < train_idx.size(); ++i)
        feats[i] = frozen_listener.encode_images_eval(cache.game_images(train_idx[i]));

    nn::ParamList ps = sp.params("speaker");
    nn::Adam adam(ps, sp.cfg.lr);
    if (opt_state && !opt_state->empty()) nn::load_state(adam, *opt_state);
    nn::ParamList state = ps;
    for (auto& p : sp.buffers("speaker")) state.push_back(p);

    TrainStats stats;
    auto best = nn::snapshot_values(state);
    stats.best_val_accuracy = core_greedy_accuracy(sp, val_listener, ds, cache, val_idx);
    stats.best_epoch = 0;

    std::vector<size_t> order(train_idx.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 1; epoch <= sp.cfg.max_epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        int64_t batches = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(sp.cfg.batch)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(sp.cfg.batch));
            TensorPtr acc;
            for (size_t k = start; k < end; ++k) {
                const int64_t gi = train_idx[order[k]];
                AmortizedStep st =
                    amortized_loss(sp, frozen_listener, cache.game_images(gi), feats[order[k]],
                                   ds.games[static_cast<size_t>(gi)].target, lambda, tau, rng);
                acc = acc ? ad::add(acc, st.loss) : st.loss;
            }
            TensorPtr loss = ad::affine(acc, 1.0 / static_cast<double>(end - start), 0.0);
            ad::backward(loss);
            adam.step();
            adam.zero_grad();
            loss_sum += loss->item();
            ++batches;
        }
        stats.final_train_loss = loss_sum / static_cast<double>(batches);
        stats.train_loss_history.push_back(stats.final_train_loss);
        stats.epochs_run = epoch;

        const double val_acc = core_greedy_accuracy(sp, val_listener, ds, cache, val_idx);
        stats.val_accuracy_history.push_back(val_acc);
        if (val_acc > stats.best_val_accuracy) {
            stats.best_val_accuracy = val_acc;
            stats.best_epoch = epoch;
            best = nn::snapshot_values(state);
        } else if (epoch - stats.best_epoch >= sp.cfg.patience) {
            break;
        }
    }
    nn::restore_values(state, best);
    if (opt_state) *opt_state = nn::save_state(adam);
    sp.trained = true;
    if (frozen_listener.param_hash() != listener_hash)
        throw std::logic_error("train_amortized: frozen listener parameters changed");
    return stats;
}

// -------------------------------------------------------------- reinforcement

SampledUtterance sample_with_logp(SpeakerCore& sp, const TensorPtr& game_images, int target,
                                  Rng& rng) {
    const int64_t v = sp.vocab.size();
    TensorPtr h = sp.initial_hidden(sp.context_features(game_images, target, /*training=*/true));
    SampledUtterance s;
    TensorPtr acc;
    int64_t prev = sp.vocab.bos;
    for (int t = 0; t < sp.cfg.max_len; ++t) {
        TensorPtr x = sp.emb.lookup({prev});
        h = sp.gru.step(h, x);
        TensorPtr lp = ad::log_softmax(sp.out.forward(h));  // (1, V)
        std::vector<double> w(static_cast<size_t>(v));
        for (int64_t j = 0; j < v; ++j) w[static_cast<size_t>(j)] = std::exp(lp->read(j));
        const int64_t tok = static_cast<int64_t>(rng.categorical(w));
        std::vector<double> onehot(static_cast<size_t>(v), 0.0);
        onehot[static_cast<size_t>(tok)] = 1.0;
        TensorPtr picked = ad::sum(ad::mul(lp, ad::constant({1, v}, onehot)));
        acc = acc ? ad::add(acc, picked) : picked;
        if (tok == sp.vocab.eos) {
            s.logp = acc;
            return s;
        }
        s.u.ids.push_back(tok);
        prev = tok;
    }
    s.u.truncated = true;
    s.logp = acc;
    return s;
}

TrainStats train_reinforce(SpeakerCore& sp, LiteralListener& external_listener,
                           const world::Dataset& ds, world::RenderCache& cache,
                           const std::vector<int64_t>& train_idx,
                           const std::vector<int64_t>& val_idx, LiteralListener& val_listener,
                           bool use_baseline, Rng& rng, nn::AdamState* opt_state) {
    if (train_idx.empty() || val_idx.empty())
        throw std::invalid_argument("train_reinforce: empty train or validation set");

    nn::ParamList ps = sp.params("speaker");
    nn::Adam adam(ps, sp.cfg.lr);
    if (opt_state && !opt_state->empty()) nn::load_state(adam, *opt_state);
    nn::ParamList state = ps;
    for (auto& p : sp.buffers("speaker")) state.push_back(p);

    TrainStats stats;
    auto best = nn::snapshot_values(state);
    stats.best_val_accuracy = core_greedy_accuracy(sp, val_listener, ds, cache, val_idx);
    stats.best_epoch = 0;

    std::vector<size_t> order(train_idx.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    double baseline = 0.0;
    bool baseline_set = false;

    for (int epoch = 1; epoch <= sp.cfg.max_epochs; ++epoch) {
        rng.shuffle(order);
        double reward_sum = 0.0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(sp.cfg.batch)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(sp.cfg.batch));
            const double n = static_cast<double>(end - start);
            TensorPtr acc;
            double batch_reward = 0.0;
            for (size_t k = start; k < end; ++k) {
                const int64_t gi = train_idx[order[k]];
                const auto& game = ds.games[static_cast<size_t>(gi)];
                const TensorPtr& imgs = cache.game_images(gi);
                SampledUtterance su = sample_with_logp(sp, imgs, game.target, rng);
                double r = 0.0;
                if (!su.u.ids.empty()) {
                    auto p = external_listener.prob(imgs, su.u);
                    if (static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()) ==
                        game.target)
                        r = 1.0;
                }
                batch_reward += r;
                const double coef = -(r - (use_baseline && baseline_set ? baseline : 0.0));
                if (coef != 0.0) {
                    TensorPtr term = ad::affine(su.logp, coef, 0.0);
                    acc = acc ? ad::add(acc, term) : term;
                }
            }
            if (acc) {
                TensorPtr loss = ad::affine(acc, 1.0 / n, 0.0);
                ad::backward(loss);
                adam.step();
                adam.zero_grad();
            }
            if (use_baseline) {
                const double mean_r = batch_reward / n;
                baseline = baseline_set ? 0.9 * baseline + 0.1 * mean_r : mean_r;
                baseline_set = true;
            }
            reward_sum += batch_reward;
        }
        stats.final_mean_reward = reward_sum / static_cast<double>(order.size());
        stats.final_train_loss = 1.0 - stats.final_mean_reward;
        stats.train_loss_history.push_back(stats.final_train_loss);
        stats.epochs_run = epoch;

        const double val_acc = core_greedy_accuracy(sp, val_listener, ds, cache, val_idx);
        stats.val_accuracy_history.push_back(val_acc);
        if (val_acc > stats.best_val_accuracy) {
            stats.best_val_accuracy = val_acc;
            stats.best_epoch = epoch;
            best = nn::snapshot_values(state);
        } else if (epoch - stats.best_epoch >= sp.cfg.patience) {
            break;
        }
    }
    nn::restore_values(state, best);
    if (opt_state) *opt_state = nn::save_state(adam);
    sp.trained = true;
    return stats;
}

// ------------------------------------------------------------------- variants

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::s0: return "s0";
        case Variant::s0ctx: return "s0-ctx";
        case Variant::rsa_full: return "rsa-full";
        case Variant::rsa_srr: return "rsa-srr";
        case Variant::amortized: return "amortized";
        case Variant::rl: return "reinforce";
    }
    throw std::logic_error("variant_name: bad enum value");
}

Variant parse_variant(const std::string& s) {
    for (Variant v : {Variant::s0, Variant::s0ctx, Variant::rsa_full, Variant::rsa_srr,
                      Variant::amortized, Variant::rl})
        if (s == variant_name(v)) return v;
    throw std::invalid_argument("unknown speaker variant '" + s + "'");
}

double default_lambda(Variant v) {
    switch (v) {
        case Variant::rsa_srr: return 1.0;
        case Variant::rsa_full: return 0.0001;
        case Variant::amortized: return 0.01;
        default: return 0.0;
    }
}

Utterance Speaker::speak(const TensorPtr& game_images, int target, Rng* rng) {
    switch (variant) {
        case Variant::s0:
        case Variant::s0ctx:
        case Variant::amortized:
        case Variant::rl:
            if (!core) throw std::logic_error("speaker: missing decoder core");
            return core->decode(game_images, target, /*sample=*/false, nullptr);
        case Variant::rsa_full:
            if (!internal) throw std::logic_error("speaker: missing internal listener");
            return speak_rsa_full(*internal, game_images, target, utterance_set, lambda).chosen;
        case Variant::rsa_srr:
            if (!core || !internal)
                throw std::logic_error("speaker: rsa-srr needs a decoder core and a listener");
            if (!rng) throw std::invalid_argument("speaker: rsa-srr needs an rng");
            return speak_rsa_srr(*core, *internal, game_images, target, sample_count, lambda, *rng)
                .chosen;
    }
    throw std::logic_error("speaker: bad variant enum value");
}

double communicative_accuracy(Speaker& sp, LiteralListener& L, const world::Dataset& ds,
                              world::RenderCache& cache, const std::vector<int64_t>& idx,
                              uint64_t seed) {
    if (idx.empty()) throw std::invalid_argument("communicative_accuracy: empty game set");
    Rng root(seed);
    int64_t hits = 0;
    for (int64_t i : idx) {
        Rng game_rng = root.split(static_cast<uint64_t>(i));
        const auto& game = ds.games[static_cast<size_t>(i)];
        const TensorPtr& imgs = cache.game_images(i);
        Utterance u = sp.speak(imgs, game.target, &game_rng);
        if (u.ids.empty()) continue;
        auto p = L.prob(imgs, u);
        if (static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()) == game.target)
            ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(idx.size());
}

}  // namespace refgame::agents
