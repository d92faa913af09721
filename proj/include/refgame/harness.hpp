#pragma once

#include <array>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "refgame/speakers.hpp"

namespace refgame::harness {

using ad::TensorPtr;
using agents::TrainStats;

// ---------------------------------------------------------------------- plan

// Everything a protocol run needs beyond the dataset itself. Training knobs
// default to the standard settings (100 epochs max, batch 32); listener
// counts default per corpus (9 evaluation listeners for ShapeWorld, 1 for
// the colors corpus).
struct ExperimentPlan {
    std::vector<agents::Variant> variants = {agents::Variant::s0,        agents::Variant::s0ctx,
                                             agents::Variant::rsa_full,  agents::Variant::rsa_srr,
                                             agents::Variant::amortized, agents::Variant::rl};
    uint64_t seed = 7;
    int n_eval_listeners = 9;
    int max_epochs = 100;
    int batch = 32;
    int patience = 5;
    double tau = 1.0;
    int srr_samples = 5;
    std::string enumeration_policy = "grammar";
    int enumeration_max_len = 2;
    bool rl_baseline = false;

    bool include_controls = true;  // gold-replay and random-token reference rows
    bool measure_speed = true;
    int speed_games = 100;
    int speed_warmup = 10;
    bool speed_second_set = true;  // re-time full RSA on the exhaustive utterance set
    bool measure_conventionality = true;  // colors corpus only; skipped elsewhere
    int lm_max_epochs = 30;
    int64_t lm_hidden = 100;

    static ExperimentPlan defaults_for(world::GameKind kind);
};

// ------------------------------------------------------------------- results

struct EfficacyResult {
    double accuracy = 0.0, ci_low = 0.0, ci_high = 1.0;
    int64_t n_games = 0;
    int n_listeners = 0;
};

struct ConcisionRow {
    world::ContextType context = world::ContextType::both_needed;
    int64_t n_games = 0;
    double mean_length = 0.0, mean_colors = 0.0, mean_shapes = 0.0, mean_other = 0.0;
    std::vector<double> lengths;  // per-game content lengths, kept for significance tests
};

struct ConcisionResult {
    std::vector<ConcisionRow> rows;  // one per context type, fixed enum order
    int64_t n_games = 0;
};

struct WelchResult {
    double t = 0.0, df = 0.0, p_value = 1.0;
};

struct ConcisionComparison {
    double mean_both = 0.0, mean_single = 0.0, difference = 0.0;
    WelchResult welch;
    bool significant = false;  // two-sided at alpha 0.05
    int64_t n_both = 0, n_single = 0;
};

struct ConventionalityResult {
    double per_word_probability = 0.0;
    int64_t n_games = 0;
};

struct SpeedResult {
    double mean_seconds = 0.0, sd_seconds = 0.0;
    int64_t n_games = 0;
    int64_t utterance_set_size = 0;  // candidate count for rerank speakers, 0 otherwise
};

struct EvalReport {
    std::string dataset_label;
    std::string dataset_kind;
    int image_size = 0;
    int64_t n_test_games = 0;
    std::map<std::string, EfficacyResult> efficacy;
    std::map<std::string, ConcisionResult> concision;
    std::map<std::string, ConventionalityResult> conventionality;
    std::map<std::string, std::vector<SpeedResult>> speed;
    // holdout name -> speaker name -> result
    std::map<std::string, std::map<std::string, EfficacyResult>> generalization;
};

// ----------------------------------------------------------------- game sets

// A dataset slice the evaluators iterate over.
struct GameSet {
    const world::Dataset* ds = nullptr;
    world::RenderCache* cache = nullptr;
    std::vector<int64_t> idx;

    int64_t size() const { return static_cast<int64_t>(idx.size()); }
    const world::ReferenceGame& game(int64_t pos) const;
    const TensorPtr& images(int64_t pos) const;
};

std::vector<int64_t> range_indices(std::pair<int64_t, int64_t> r);
GameSet test_set(const world::Dataset& ds, world::RenderCache& cache);

// --------------------------------------------------------------- efficacy

// Utterance producer for one game of a set; the rng stream is split per game.
using SpeakFn = std::function<agents::Utterance(int64_t pos, const TensorPtr& images,
                                                const world::ReferenceGame& game, Rng& rng)>;
// Judge returning the image index picked for an utterance (never called on
// empty utterances; those count as misses upfront).
using JudgeFn =
    std::function<int(int64_t pos, const TensorPtr& images, const agents::Utterance& u)>;

std::vector<agents::Utterance> generate_utterances(const SpeakFn& speak, const GameSet& set,
                                                   uint64_t seed);
std::vector<agents::Utterance> generate_utterances(agents::Speaker& sp, const GameSet& set,
                                                   uint64_t seed);

// fixed-policy controls reported alongside trained speakers: replaying the
// dataset's gold utterance, and uttering one or two uniform content tokens
SpeakFn gold_replay_speaker(const world::Vocabulary& vocab);
SpeakFn random_token_speaker(const world::Vocabulary& vocab);

// Wraps listeners as argmax judges; image encodings are cached per game so
// repeated judging across speakers stays cheap.
std::vector<JudgeFn> listener_judges(
    const std::vector<std::shared_ptr<agents::LiteralListener>>& listeners);

// 95% interval from the normal approximation to the binomial, clamped to
// [0,1]; the game count is the sample size even when several listeners judge
// each utterance.
std::pair<double, double> binomial_ci95(double p_hat, int64_t n);

EfficacyResult judge_utterances(const std::vector<agents::Utterance>& utts,
                                const std::vector<JudgeFn>& judges, const GameSet& set);

EfficacyResult eval_efficacy(agents::Speaker& sp,
                             const std::vector<std::shared_ptr<agents::LiteralListener>>& listeners,
                             const GameSet& set, uint64_t seed);

// --------------------------------------------------------------- concision

struct TokenBreakdown {
    int64_t colors = 0, shapes = 0, other = 0;

    int64_t total() const { return colors + shapes + other; }
};

// Classifies content tokens: color words, shape words, everything else
// (<UNK> and the generic "shape" fall into other).
TokenBreakdown classify_tokens(const world::Vocabulary& vocab, const std::vector<int64_t>& ids);

ConcisionResult concision_from_utterances(const std::vector<agents::Utterance>& utts,
                                          const GameSet& set);
ConcisionResult eval_concision(agents::Speaker& sp, const GameSet& set, uint64_t seed);

// Welch's unequal-variance t statistic; the p-value uses the normal
// approximation, adequate for the sample sizes the harness produces.
WelchResult welch_t_test(const std::vector<double>& a, const std::vector<double>& b);

// Both-needed lengths against pooled single-feature lengths.
ConcisionComparison compare_concision(const ConcisionResult& r);

// ---------------------------------------------------------- language model

// Unconditional GRU next-token model over utterance token sequences.
struct LanguageModel {
    world::Vocabulary vocab;
    int64_t hidden = 100;
    nn::Embedding emb;
    nn::GruCell gru;
    nn::Linear out;

    LanguageModel(const world::Vocabulary& vocab, int64_t hidden, int64_t embed_dim,
                  uint64_t seed);

    // mean per-token negative log-likelihood, terminator included (taped)
    TensorPtr batch_nll(const std::vector<std::vector<int64_t>>& batch);

    // log-probability of each content token given its prefix; the terminator
    // is excluded so downstream scores are pure per-word geometric means
    std::vector<double> token_logprobs(const std::vector<int64_t>& ids);
    double per_word_probability(const std::vector<int64_t>& ids);  // 0 for empty input

    nn::ParamList params(const std::string& prefix) const;
};

TrainStats train_unconditional_lm(LanguageModel& lm,
                                  const std::vector<std::vector<int64_t>>& corpus, double lr,
                                  int max_epochs, int batch, Rng& rng);

// ----------------------------------------------------------- conventionality

ConventionalityResult conventionality_from_utterances(const std::vector<agents::Utterance>& utts,
                                                      LanguageModel& lm);
// Colors-format data only: template-generated utterances make the corpus
// language model degenerate, so the score is only meaningful for
// human-produced language.
ConventionalityResult eval_conventionality(agents::Speaker& sp, LanguageModel& lm,
                                           const GameSet& set, uint64_t seed);

// ------------------------------------------------------------------- speed

// Mean and standard deviation of wall-clock seconds per generated utterance
// (monotonic clock, warm-up games discarded, rendering pre-touched so only
// generation is timed). Games cycle when the set is smaller than needed.
SpeedResult eval_speed(agents::Speaker& sp, const GameSet& set, int n, int warmup, uint64_t seed);

// ---------------------------------------------------------------- protocol

// Models produced by a protocol run. Stages append to completed_stages as
// they finish, so a failed run still hands back everything trained so far.
struct ProtocolArtifacts {
    std::array<std::vector<int64_t>, 3> thirds;
    std::shared_ptr<agents::LiteralListener> internal_listener;
    std::shared_ptr<agents::LiteralListener> validation_listener;
    std::vector<std::shared_ptr<agents::LiteralListener>> eval_listeners;
    std::map<std::string, std::shared_ptr<agents::SpeakerCore>> cores;
    std::map<std::string, agents::Speaker> speakers;
    std::map<std::string, TrainStats> training;
    std::shared_ptr<LanguageModel> lm;
    std::vector<std::string> completed_stages;
};

// Full training-and-evaluation protocol over an already split dataset: the
// first training third trains speakers and their internal listener, the
// second the validation listener that drives early stopping, the third the
// evaluation listeners; every reported metric comes from the test split.
// All randomness derives from plan.seed, so identical plans yield identical
// reports.
EvalReport run_protocol(const ExperimentPlan& plan, const world::Dataset& ds,
                        world::RenderCache& cache, ProtocolArtifacts& art);
EvalReport run_protocol(const ExperimentPlan& plan, const world::Dataset& ds,
                        world::RenderCache& cache);

// ----------------------------------------------------------- generalization

struct HoldoutRun {
    std::string name;
    const world::Dataset* ds = nullptr;
    world::RenderCache* cache = nullptr;
};

// Retrains the plan's speakers from scratch on each holdout dataset (its
// evaluation listeners come from that dataset's own third) and reports
// efficacy per holdout per speaker.
std::map<std::string, std::map<std::string, EfficacyResult>> eval_generalization(
    const ExperimentPlan& plan, const std::vector<HoldoutRun>& runs);

// ------------------------------------------------------------------ reports

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);  // inverse of report_to_json
void write_report_json(const EvalReport& report, const std::string& path);

// Writes the five report tables into dir:
//   fig3_efficacy.csv        speaker,accuracy,ci_low,ci_high,n_games,n_listeners
//   fig4_concision.csv       speaker,context,n_games,mean_length,
//                            mean_color_tokens,mean_shape_tokens,mean_other_tokens
//   fig5_conventionality.csv speaker,per_word_probability,n_games
//   fig6_speed.csv           speaker,utterance_set_size,mean_seconds,sd_seconds,n_games
//   fig8_generalization.csv  holdout,speaker,accuracy,ci_low,ci_high,n_games,n_listeners
void write_report_csvs(const EvalReport& report, const std::string& dir);

}  // namespace refgame::harness
