#pragma once

#include <memory>
#include <string>
#include <vector>

#include "refgame/listener.hpp"

namespace refgame::agents {

struct SpeakerConfig {
    bool contextual = false;  // encode all three images (target first) instead of the target only
    int image_size = 64;
    int64_t embed_dim = 50;
    int64_t hidden = 0;  // 0: 100 plain, 300 contextual
    int max_len = 4;     // decode steps before truncation
    double lr = 0.001;
    int max_epochs = 100;
    int batch = 32;
    int patience = 5;

    int64_t effective_hidden() const { return hidden > 0 ? hidden : (contextual ? 300 : 100); }
};

// GRU captioner over CNN image features. Serves as the naive speaker, the
// sample source for rerank speakers, and the trainable core of the amortized
// and reinforcement variants.
struct SpeakerCore {
    world::Vocabulary vocab;
    SpeakerConfig cfg;
    nn::CnnEncoder img_enc;
    nn::Linear h0_proj;  // image features -> initial hidden (through tanh)
    nn::Embedding emb;
    nn::GruCell gru;
    nn::Linear out;  // hidden -> vocab logits
    bool trained = false;

    SpeakerCore(const world::Vocabulary& vocab, const SpeakerConfig& cfg, uint64_t seed);

    // (B, D) for the plain speaker, (B, 3D) target-first for contextual ones
    TensorPtr context_features_batch(const std::vector<TensorPtr>& game_images,
                                     const std::vector<int>& targets, bool training);
    TensorPtr context_features(const TensorPtr& game_images, int target, bool training);
    TensorPtr initial_hidden(const TensorPtr& ctx);

    // inference decode; rng required in sample mode
    Utterance decode(const TensorPtr& game_images, int target, bool sample, Rng* rng);

    // mean per-token negative log-likelihood of gold content tokens plus the
    // terminator, teacher-forced (taped)
    TensorPtr batch_nll(const std::vector<TensorPtr>& game_images, const std::vector<int>& targets,
                        const std::vector<std::vector<int64_t>>& gold);

    nn::ParamList params(const std::string& prefix) const;
    nn::ParamList buffers(const std::string& prefix) const;
};

// ------------------------------------------------------------ naive training

// Teacher-forced captioning on gold utterances; early stopping on
// communicative accuracy of greedy decodes against the validation listener.
TrainStats train_captioner(SpeakerCore& sp, const world::Dataset& ds, world::RenderCache& cache,
                           const std::vector<int64_t>& train_idx,
                           const std::vector<int64_t>& val_idx, LiteralListener& val_listener,
                           Rng& rng, nn::AdamState* opt_state = nullptr);

// fraction of games where the listener's argmax matches the target when the
// speaker decodes greedily (empty decodes count as misses)
double core_greedy_accuracy(SpeakerCore& sp, LiteralListener& L, const world::Dataset& ds,
                            world::RenderCache& cache, const std::vector<int64_t>& idx);

// ---------------------------------------------------------------- enumeration

double utterance_cost(const Utterance& u, double lambda);

// "grammar": single attribute words, attribute pairs, and "<color> shape".
// "exhaustive": every content-token sequence of length 1..max_len; refuses
// (naming the count) when it would exceed budget. Results are sorted
// lexicographically by token ids and are unique.
std::vector<Utterance> enumerate_utterances(const world::Vocabulary& vocab,
                                            const std::string& policy = "grammar",
                                            int max_len = 2, int64_t budget = 200000);

// ------------------------------------------------------------------ reranking

struct RsaResult {
    Utterance chosen;
    int64_t index = -1;               // into the candidate list
    std::vector<double> scores;       // log listener-prob of target minus cost
    std::vector<double> distribution; // softmax of scores
};

// Scores every candidate by log P_listener(target | game, u) - lambda*|u| and
// picks the argmax, breaking ties toward the lexicographically smallest token
// ids. Scoring is done in doubles.
RsaResult rsa_rerank(LiteralListener& L, const TensorPtr& game_images, int target,
                     const std::vector<Utterance>& candidates, double lambda);

RsaResult speak_rsa_full(LiteralListener& L, const TensorPtr& game_images, int target,
                         const std::vector<Utterance>& utterance_set, double lambda);

// Draws sample_count utterances from the base speaker (duplicates retained,
// empty samples dropped) and reranks them.
RsaResult speak_rsa_srr(SpeakerCore& s0, LiteralListener& L, const TensorPtr& game_images,
                        int target, int sample_count, double lambda, Rng& rng);

// ------------------------------------------------------------------ amortized

struct AmortizedStep {
    TensorPtr loss;  // scalar, taped through the speaker only
    Utterance sampled;
    double target_logprob = 0.0;     // log listener probability of the target
    double cost_value = 0.0;         // accumulated length penalty
    std::vector<double> stop_probs;  // q_t(</s>) per decode step
};

// One relaxed decode through the frozen listener: negative log listener
// probability of the target plus the expected-stop length penalty
// sum_t lambda * t * (1 - q_t(</s>)). No alternative utterances are scored.
// hard=false keeps the soft relaxation in the forward pass (the fully
// differentiable surrogate the straight-through estimator backs onto).
AmortizedStep amortized_loss(SpeakerCore& sp, LiteralListener& frozen_listener,
                             const TensorPtr& game_images, const TensorPtr& listener_feats,
                             int target, double lambda, double tau, Rng& rng, bool hard = true);

TrainStats train_amortized(SpeakerCore& sp, LiteralListener& frozen_listener,
                           const world::Dataset& ds, world::RenderCache& cache,
                           const std::vector<int64_t>& train_idx,
                           const std::vector<int64_t>& val_idx, LiteralListener& val_listener,
                           double lambda, double tau, Rng& rng,
                           nn::AdamState* opt_state = nullptr);

// -------------------------------------------------------------- reinforcement

struct SampledUtterance {
    Utterance u;
    TensorPtr logp;  // taped sum of chosen-token log-probabilities
};

SampledUtterance sample_with_logp(SpeakerCore& sp, const TensorPtr& game_images, int target,
                                  Rng& rng);

// Policy-gradient training: reward 1 when the external listener's argmax
// picks the target, 0 otherwise; gradient is reward times grad log-prob of
// the sampled utterance (optional moving-average baseline, off by default).
TrainStats train_reinforce(SpeakerCore& sp, LiteralListener& external_listener,
                           const world::Dataset& ds, world::RenderCache& cache,
                           const std::vector<int64_t>& train_idx,
                           const std::vector<int64_t>& val_idx, LiteralListener& val_listener,
                           bool use_baseline, Rng& rng, nn::AdamState* opt_state = nullptr);

// ------------------------------------------------------------------- variants

enum class Variant { s0, s0ctx, rsa_full, rsa_srr, amortized, rl };

const char* variant_name(Variant v);
Variant parse_variant(const std::string& s);
double default_lambda(Variant v);  // srr 1, full 1e-4, amortized 0.01, else 0

// A ready-to-evaluate speaking policy: a decoder core, and for the rerank
// variants an internal listener plus candidate source.
struct Speaker {
    Variant variant = Variant::s0;
    std::shared_ptr<SpeakerCore> core;
    std::shared_ptr<LiteralListener> internal;
    std::vector<Utterance> utterance_set;  // rsa_full candidates
    double lambda = 0.0;
    int sample_count = 5;  // rsa_srr

    // deterministic variants ignore rng; rsa_srr requires it
    Utterance speak(const TensorPtr& game_images, int target, Rng* rng);
};

// accuracy of a speaking policy against a listener over the given games;
// per-game rng streams are split off the seed so results are order-independent
double communicative_accuracy(Speaker& sp, LiteralListener& L, const world::Dataset& ds,
                              world::RenderCache& cache, const std::vector<int64_t>& idx,
                              uint64_t seed);

}  // namespace refgame::agents
