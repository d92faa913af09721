#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "refgame/harness.hpp"

namespace refgame::io {

// ------------------------------------------------------------------- errors

// Exception taxonomy behind the process exit codes: 0 success, 1 usage
// error, 2 data error, 3 training divergence.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// -------------------------------------------------------------------- config

// One self-describing file per run; flags may override individual keys but
// every knob lives here so the manifest echo fully reproduces a run.
// Unknown keys are rejected on parse.

struct DatasetConfig {
    std::string kind = "shapeworld";  // "shapeworld" | "colors-file"
    std::string path;                 // source corpus when kind is colors-file
    int64_t n_games = 76000;
    int64_t n_test = 0;  // held-out-attribute runs; 0: derived from the ratios
    std::array<double, 3> ratios{0.0, 0.0, 0.0};  // 0s: 60:15:1, or 42:3:1 for colors
    std::string holdout;                          // "", "red", "square", "combos"
    int image_size = 64;
    int min_token_freq = 2;  // colors vocabulary threshold
    uint64_t seed = 7;

    std::array<double, 3> resolved_ratios() const;
    int64_t resolved_n_test() const;  // test-share of n_games unless set
};

struct ModelConfig {
    std::string variant = "s0";
    double lambda = -1.0;  // negative: the variant's own default cost weight
    int sample_count = 5;  // rerank candidates drawn from the base speaker
    double tau = 1.0;
    int64_t embed_dim = 50;
    int64_t listener_hidden = 100;
    int64_t speaker_hidden = 0;  // 0: 100 plain, 300 contextual
    int64_t lm_hidden = 100;
    int max_len = 0;  // decode cap; 0: 4 for shapeworld, 20 for colors
    bool rl_baseline = false;

    agents::Variant parsed_variant() const;
    double resolved_lambda() const;
    int resolved_max_len(world::GameKind kind) const;
};

struct TrainingConfig {
    double lr_speaker = 0.001;
    double lr_listener = 0.01;
    double lr_lm = 0.001;
    int max_epochs = 100;
    int batch = 32;
    int patience = 5;
};

struct EvalConfig {
    int n_eval_listeners = 0;  // 0: 9 for shapeworld, 1 for colors
    int speed_games = 100;
    int speed_warmup = 10;
    bool speed_second_set = true;
    bool include_controls = true;
    bool measure_speed = true;
    bool measure_conventionality = true;

    int resolved_n_eval_listeners(world::GameKind kind) const;
};

struct RunConfig {
    DatasetConfig dataset;
    ModelConfig model;
    TrainingConfig training;
    EvalConfig eval;

    void validate() const;  // throws UsageError on out-of-range values
};

RunConfig parse_run_config(const std::string& text);  // strict keys, validated
RunConfig load_run_config(const std::string& path);
std::string run_config_to_json(const RunConfig& cfg);  // round-trips via parse

// --------------------------------------------------------------- checkpoints

inline constexpr uint32_t kCheckpointVersion = 1;

struct NamedArray {
    std::string name;
    std::vector<int64_t> shape;
    std::vector<float> values;
};

// On disk: magic, format version, then three checksummed blocks (descriptor
// json, named arrays, rng state). Arrays are little-endian 32-bit floats
// regardless of host endianness. The descriptor records the model kind, its
// architecture, the vocabulary, and the optimizer step count; Adam moments
// ride along as "opt.m:"/"opt.v:"-prefixed arrays.
struct ModelCheckpoint {
    uint32_t version = kCheckpointVersion;
    std::string descriptor;
    std::vector<NamedArray> arrays;
    std::string rng_state;  // empty when not carried
};

void save_checkpoint(const ModelCheckpoint& m, const std::string& path);
ModelCheckpoint load_checkpoint(const std::string& path);

std::string checkpoint_model_kind(const ModelCheckpoint& m);
std::vector<std::string> checkpoint_vocabulary(const ModelCheckpoint& m);

ModelCheckpoint checkpoint_listener(const agents::LiteralListener& L,
                                    const nn::AdamState* opt = nullptr,
                                    const std::string& rng_state = {});
std::shared_ptr<agents::LiteralListener> listener_from_checkpoint(const ModelCheckpoint& m,
                                                                  nn::AdamState* opt = nullptr,
                                                                  std::string* rng_state = nullptr);

ModelCheckpoint checkpoint_speaker(const agents::SpeakerCore& core, agents::Variant variant,
                                   double lambda, const nn::AdamState* opt = nullptr,
                                   const std::string& rng_state = {});
std::shared_ptr<agents::SpeakerCore> speaker_from_checkpoint(const ModelCheckpoint& m,
                                                             agents::Variant* variant = nullptr,
                                                             double* lambda = nullptr,
                                                             nn::AdamState* opt = nullptr,
                                                             std::string* rng_state = nullptr);

ModelCheckpoint checkpoint_lm(const harness::LanguageModel& lm,
                              const nn::AdamState* opt = nullptr,
                              const std::string& rng_state = {});
std::shared_ptr<harness::LanguageModel> lm_from_checkpoint(const ModelCheckpoint& m,
                                                           nn::AdamState* opt = nullptr,
                                                           std::string* rng_state = nullptr);

// ------------------------------------------------------------------ commands

// Each command runs once per process and owns its output directory. Outputs
// carry no timestamps, so a rerun with the same config and seed reproduces
// them byte for byte.

inline constexpr int kGeneratorVersion = 1;
inline constexpr const char* kOutRootEnv = "REFGAME_OUT";

struct GenerateDataOptions {
    std::string out_dir;
    bool force = false;
};
// dataset files plus generation.json (seed, generator version, resolved
// split counts, holdout leakage scan, config echo)
void cmd_generate_data(const RunConfig& cfg, const GenerateDataOptions& opt);

struct TrainOptions {
    std::string data_dir;
    std::string role;  // listener | s0 | s0-ctx | amortized | rl | lm
    std::string out_path;
    std::string listener_path;      // judge; also the internal/external listener
    std::string val_listener_path;  // separate early-stop judge when given
    std::string resume_path;        // checkpoint to continue from
    int third = -1;                 // -1: whole train split, else 0..2
};
// best-validation checkpoint plus a <out>.curve.csv sidecar, one row per
// epoch run (epoch, train_loss, val_accuracy)
void cmd_train(const RunConfig& cfg, const TrainOptions& opt);

struct EvaluateOptions {
    std::string data_dir;
    std::string out_dir;
    // speaker rows: a checkpoint path (row named by its stored variant),
    // "rsa-full" (scores the whole utterance set, no base checkpoint), or
    // "rsa-srr=<base.ckpt>" (sample-rerank around a base speaker); the
    // rerank forms need --internal-listener
    std::vector<std::string> speakers;
    std::vector<std::string> listeners;  // evaluation judges
    std::string internal_listener_path;  // required by the rerank variants
    std::string lm_path;                 // enables conventionality on colors
    bool force = false;
};
// report.json plus the five figure CSV tables on the test split
void cmd_evaluate(const RunConfig& cfg, const EvaluateOptions& opt);

struct BenchmarkOptions {
    std::string data_dir;
    std::string out_dir;
    std::vector<std::string> speakers;  // same syntax as EvaluateOptions
    std::string internal_listener_path;
    bool force = false;
};
// benchmark.json plus fig6_speed.csv: per-utterance generation time per
// speaker, and the exhaustive-set row for full rerank when configured
void cmd_benchmark(const RunConfig& cfg, const BenchmarkOptions& opt);

struct ReportOptions {
    std::string in_path;  // a report.json written by evaluate
    std::string out_dir;
};
void cmd_report(const ReportOptions& opt);

// CLI11 front end wired to the commands above; returns the process exit code
int run_main(int argc, const char* const* argv);

}  // namespace refgame::io
