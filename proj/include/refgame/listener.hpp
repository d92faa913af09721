#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "refgame/layers.hpp"
#include "refgame/world.hpp"

namespace refgame::agents {

using ad::TensorPtr;

// Content token ids only; sentinels never appear in ids.
struct Utterance {
    std::vector<int64_t> ids;
    bool truncated = false;
};

inline bool operator==(const Utterance& a, const Utterance& b) { return a.ids == b.ids; }
bool lex_less(const std::vector<int64_t>& a, const std::vector<int64_t>& b);

struct ListenerConfig {
    int image_size = 64;
    int64_t embed_dim = 50;
    int64_t hidden = 100;
    double lr = 0.01;
    int max_epochs = 100;
    int batch = 32;
    int patience = 5;
};

// Picks a target from three images given an utterance: softmax over the dot
// products of the projected utterance encoding with the image encodings.
class LiteralListener {
public:
    LiteralListener(const world::Vocabulary& vocab, const ListenerConfig& cfg, uint64_t seed);

    // inference; images is a (3,3,H,W) game stack
    std::array<double, 3> prob(const TensorPtr& images, const Utterance& u);
    std::array<double, 3> prob_cached(const TensorPtr& image_feats, const Utterance& u);
    TensorPtr encode_images_eval(const TensorPtr& images);  // (3, feat_dim)

    // softmax over explicit image-utterance dot products (the scoring rule
    // applied by prob once the two encoders have run)
    static std::array<double, 3> prob_from_dots(const std::array<double, 3>& dots);

    // taped training forward: per-game image stacks and utterances -> (B,3)
    // target scores; utterances are content ids, </s> appended internally
    TensorPtr scores_taped(const std::vector<TensorPtr>& game_images,
                           const std::vector<std::vector<int64_t>>& utterances, bool train_mode);

    // taped text encoding of a relaxed utterance: each element one (1,vocab)
    // soft token row, </s> expected as the final element -> (1, feat_dim)
    TensorPtr encode_soft_utterance(const std::vector<TensorPtr>& soft_tokens);

    nn::ParamList params(const std::string& prefix) const;
    nn::ParamList buffers(const std::string& prefix) const;
    uint64_t param_hash() const;

    void freeze();  // marks inference-only and stops gradient accumulation
    bool frozen() const { return frozen_; }

    world::Vocabulary vocab;
    ListenerConfig cfg;
    nn::CnnEncoder img_enc;
    nn::Embedding emb;
    nn::GruCell gru;
    nn::Linear proj;

private:
    TensorPtr encode_utterances_taped(const std::vector<std::vector<int64_t>>& padded_with_eos);
    bool frozen_ = false;
};

struct TrainStats {
    int epochs_run = 0;
    int best_epoch = 0;
    double best_val_accuracy = 0.0;
    double final_train_loss = 0.0;
    double final_mean_reward = 0.0;  // policy-gradient training only
    std::vector<double> train_loss_history;
    std::vector<double> val_accuracy_history;  // parallel to train_loss_history
};

struct ListenerTrainData {
    const world::Dataset* ds = nullptr;
    world::RenderCache* cache = nullptr;
    std::vector<int64_t> train_idx, val_idx;
    // optional replacements for the gold utterances, parallel to train_idx
    std::vector<std::vector<int64_t>> train_utterances;
};

// Cross-entropy training of the target index; early stopping on validation
// accuracy, best-validation parameters kept. A non-empty opt_state primes the
// optimizer and receives its final state, so a resumed run continues the
// step count instead of restarting the schedule.
TrainStats train_listener(LiteralListener& L, const ListenerTrainData& data, Rng& rng,
                          nn::AdamState* opt_state = nullptr);

// fraction of games whose argmax target matches, uttering the gold tokens
double listener_gold_accuracy(LiteralListener& L, const world::Dataset& ds,
                              world::RenderCache& cache, const std::vector<int64_t>& idx);

}  // namespace refgame::agents
