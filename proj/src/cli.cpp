#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "refgame/io.hpp"

namespace refgame::io {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

uint64_t fnv1a64(const std::string& bytes) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// per-purpose seed stream, stable across runs of the same config
uint64_t derived_seed(uint64_t base, const std::string& label) {
    return mix_seed(base, fnv1a64(label));
}

std::string num(double x) {
    std::ostringstream o;
    o.precision(17);
    o << x;
    return o.str();
}

const char* kind_name(world::GameKind k) {
    return k == world::GameKind::shapeworld ? "shapeworld" : "colors";
}

world::GameKind config_kind(const DatasetConfig& d) {
    return d.kind == "colors-file" ? world::GameKind::colors : world::GameKind::shapeworld;
}

// ------------------------------------------------------------ shared loaders

world::Dataset load_data_dir(const std::string& dir, const RunConfig& cfg, const char* cmd) {
    if (dir.empty()) throw UsageError(std::string(cmd) + ": no dataset directory given");
    if (!fs::exists(fs::path(dir) / "manifest.json"))
        throw DataError(std::string(cmd) + ": no dataset at '" + dir + "'");
    world::Dataset ds = world::load_dataset(dir);
    if (config_kind(cfg.dataset) != ds.kind)
        throw DataError(std::string(cmd) + ": config expects a " + cfg.dataset.kind +
                        " dataset, '" + dir + "' holds " + kind_name(ds.kind) + " games");
    if (cfg.dataset.image_size != ds.image_size)
        throw DataError(std::string(cmd) + ": config image size " +
                        std::to_string(cfg.dataset.image_size) + " does not match the dataset (" +
                        std::to_string(ds.image_size) + ")");
    return ds;
}

std::shared_ptr<agents::LiteralListener> load_listener_for(const world::Dataset& ds,
                                                           const std::string& path,
                                                           const char* cmd,
                                                           nn::AdamState* opt = nullptr,
                                                           std::string* rng_state = nullptr) {
    auto L = listener_from_checkpoint(load_checkpoint(path), opt, rng_state);
    if (L->vocab.tokens != ds.vocab.tokens)
        throw DataError(std::string(cmd) + ": listener '" + path +
                        "' was trained on a different vocabulary than the dataset");
    if (L->cfg.image_size != ds.image_size)
        throw DataError(std::string(cmd) + ": listener '" + path + "' expects " +
                        std::to_string(L->cfg.image_size) + "px images, the dataset holds " +
                        std::to_string(ds.image_size) + "px");
    return L;
}

std::shared_ptr<agents::SpeakerCore> load_core_for(const world::Dataset& ds,
                                                   const std::string& path, const char* cmd,
                                                   agents::Variant* variant = nullptr,
                                                   double* lambda = nullptr,
                                                   nn::AdamState* opt = nullptr,
                                                   std::string* rng_state = nullptr) {
    auto core = speaker_from_checkpoint(load_checkpoint(path), variant, lambda, opt, rng_state);
    if (core->vocab.tokens != ds.vocab.tokens)
        throw DataError(std::string(cmd) + ": speaker '" + path +
                        "' was trained on a different vocabulary than the dataset");
    if (core->cfg.image_size != ds.image_size)
        throw DataError(std::string(cmd) + ": speaker '" + path + "' expects " +
                        std::to_string(core->cfg.image_size) + "px images, the dataset holds " +
                        std::to_string(ds.image_size) + "px");
    return core;
}

// the full-rerank candidate list: the utterance grammar for shapeworld, the
// distinct gold utterances of the first training third for the colors corpus
std::vector<agents::Utterance> full_utterance_set(const world::Dataset& ds) {
    if (ds.kind == world::GameKind::shapeworld) return agents::enumerate_utterances(ds.vocab);
    std::vector<std::vector<int64_t>> seqs;
    for (int64_t i = ds.splits.thirds[0].first; i < ds.splits.thirds[0].second; ++i) {
        auto ids = ds.vocab.encode(ds.games[static_cast<size_t>(i)].gold);
        if (!ids.empty()) seqs.push_back(std::move(ids));
    }
    std::sort(seqs.begin(), seqs.end(), agents::lex_less);
    seqs.erase(std::unique(seqs.begin(), seqs.end()), seqs.end());
    if (seqs.empty()) throw DataError("evaluate: no usable gold utterances for the rerank set");
    std::vector<agents::Utterance> out;
    out.reserve(seqs.size());
    for (auto& s : seqs) out.push_back(agents::Utterance{std::move(s), false});
    return out;
}

struct LoadedSpeaker {
    std::string name;
    agents::Speaker sp;
};

// speaker row specs: "path", "rsa-full", "rsa-srr=<base.ckpt>"
std::vector<LoadedSpeaker> load_speakers(const std::vector<std::string>& specs,
                                         const world::Dataset& ds, const RunConfig& cfg,
                                         const std::string& internal_path, const char* cmd) {
    if (specs.empty()) throw UsageError(std::string(cmd) + ": no speakers given");
    std::shared_ptr<agents::LiteralListener> internal;
    auto rerank_listener = [&] {
        if (!internal) {
            if (internal_path.empty())
                throw UsageError(std::string(cmd) +
                                 ": rerank speakers require --internal-listener");
            internal = load_listener_for(ds, internal_path, cmd);
            internal->freeze();
        }
        return internal;
    };

    std::vector<LoadedSpeaker> out;
    std::set<std::string> names;
    for (const std::string& spec : specs) {
        LoadedSpeaker row;
        row.sp.sample_count = cfg.model.sample_count;
        const auto eq = spec.find('=');
        if (spec == "rsa-full") {
            row.name = spec;
            row.sp.variant = agents::Variant::rsa_full;
            row.sp.lambda = agents::default_lambda(row.sp.variant);
            row.sp.internal = rerank_listener();
            row.sp.utterance_set = full_utterance_set(ds);
        } else if (eq != std::string::npos) {
            const std::string head = spec.substr(0, eq);
            const std::string path = spec.substr(eq + 1);
            if (head != "rsa-srr")
                throw UsageError(std::string(cmd) + ": '" + head +
                                 "=' is not a rerank form (want 'rsa-srr=<base.ckpt>'; "
                                 "'rsa-full' takes no base checkpoint)");
            row.name = head;
            row.sp.variant = agents::Variant::rsa_srr;
            row.sp.lambda = agents::default_lambda(row.sp.variant);
            row.sp.core = load_core_for(ds, path, cmd);
            row.sp.internal = rerank_listener();
        } else {
            agents::Variant v;
            double lambda = 0.0;
            row.sp.core = load_core_for(ds, spec, cmd, &v, &lambda);
            if (v == agents::Variant::rsa_full || v == agents::Variant::rsa_srr)
                throw DataError(std::string(cmd) + ": checkpoint '" + spec +
                                "' stores a rerank variant without its base speaker");
            row.name = agents::variant_name(v);
            row.sp.variant = v;
            row.sp.lambda = lambda;
        }
        if (!names.insert(row.name).second)
            throw UsageError(std::string(cmd) + ": duplicate speaker row '" + row.name + "'");
        out.push_back(std::move(row));
    }
    return out;
}

void guard_output(const fs::path& marker, bool force, const char* cmd) {
    if (fs::exists(marker) && !force)
        throw DataError(std::string(cmd) + ": '" + marker.string() +
                        "' already exists (pass --force to overwrite)");
}

void ensure_parent_dir(const std::string& path) {
    const fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

}  // namespace

// ------------------------------------------------------------- generate-data

void cmd_generate_data(const RunConfig& cfg, const GenerateDataOptions& opt) {
    cfg.validate();
    if (opt.out_dir.empty()) throw UsageError("generate-data: no output directory given");
    guard_output(fs::path(opt.out_dir) / "manifest.json", opt.force, "generate-data");
    fs::create_directories(opt.out_dir);

    world::Dataset ds;
    json scan;
    if (cfg.dataset.kind == "colors-file") {
        if (!fs::exists(cfg.dataset.path))
            throw DataError("generate-data: cannot open '" + cfg.dataset.path + "'");
        ds = world::ingest_colors(cfg.dataset.path, cfg.dataset.min_token_freq,
                                  cfg.dataset.resolved_ratios(), cfg.dataset.image_size);
    } else {
        world::WorldConfig wcfg;
        wcfg.image_size = cfg.dataset.image_size;
        if (cfg.dataset.holdout.empty()) {
            ds = world::generate_shapeworld(cfg.dataset.n_games, cfg.dataset.resolved_ratios(),
                                            wcfg, cfg.dataset.seed);
        } else {
            const world::Holdout h = world::parse_holdout(cfg.dataset.holdout);
            const int64_t n_test = cfg.dataset.resolved_n_test();
            ds = world::make_heldout_dataset(h, cfg.dataset.n_games - n_test, n_test,
                                             cfg.dataset.resolved_ratios(), wcfg,
                                             cfg.dataset.seed);
            // the exclusion guarantee, re-checked from the rendered games
            int64_t train_hits = 0, test_hits = 0;
            for (int64_t i = 0; i < static_cast<int64_t>(ds.games.size()); ++i) {
                const auto& g = ds.games[static_cast<size_t>(i)];
                const auto& t = g.specs[static_cast<size_t>(g.target)];
                if (!h.excludes(t.color, t.shape)) continue;
                (i < ds.splits.test.first ? train_hits : test_hits) += 1;
            }
            scan = {{"train_targets_held_out", train_hits},
                    {"test_targets_held_out", test_hits}};
        }
    }
    world::save_dataset(ds, opt.out_dir);

    json m;
    m["generator_version"] = kGeneratorVersion;
    m["kind"] = kind_name(ds.kind);
    m["seed"] = ds.seed;
    m["image_size"] = ds.image_size;
    m["counts"] = {
        {"total", ds.games.size()},
        {"train", ds.splits.train.second - ds.splits.train.first},
        {"validation", ds.splits.validation.second - ds.splits.validation.first},
        {"test", ds.splits.test.second - ds.splits.test.first},
        {"thirds",
         {ds.splits.thirds[0].second - ds.splits.thirds[0].first,
          ds.splits.thirds[1].second - ds.splits.thirds[1].first,
          ds.splits.thirds[2].second - ds.splits.thirds[2].first}}};
    m["holdout"] = cfg.dataset.holdout;
    if (!scan.is_null()) m["holdout_scan"] = scan;
    m["config"] = json::parse(run_config_to_json(cfg));

    std::ofstream out(fs::path(opt.out_dir) / "generation.json");
    if (!out) throw DataError("generate-data: cannot write to '" + opt.out_dir + "'");
    out << m.dump(2) << "\n";
}

// --------------------------------------------------------------------- train

namespace {

void write_curve(const std::string& path, const agents::TrainStats& stats) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("train: cannot write '" + path + "'");
    out << "epoch,train_loss,val_accuracy\n";
    for (size_t i = 0; i < stats.train_loss_history.size(); ++i) {
        out << (i + 1) << "," << num(stats.train_loss_history[i]) << ",";
        if (i < stats.val_accuracy_history.size()) out << num(stats.val_accuracy_history[i]);
        out << "\n";
    }
}

void check_converged(const agents::TrainStats& stats, const std::string& role) {
    for (size_t i = 0; i < stats.train_loss_history.size(); ++i)
        if (!std::isfinite(stats.train_loss_history[i]))
            throw DivergenceError("train: loss diverged at epoch " + std::to_string(i + 1) +
                                  " training '" + role + "'");
}

// The tape refuses non-finite values, so a blown-up run surfaces as an
// overflow error out of some op; map those to the divergence exit.
template <class Fn>
agents::TrainStats run_guarded(const std::string& role, Fn&& fn) {
    try {
        return fn();
    } catch (const std::runtime_error& e) {
        if (std::string(e.what()).rfind("overflow:", 0) == 0)
            throw DivergenceError("train: '" + role + "' diverged: " + e.what());
        throw;
    }
}

}  // namespace

void cmd_train(const RunConfig& cfg, const TrainOptions& opt) {
    cfg.validate();
    const std::string& role = opt.role;
    if (role == "rsa-full" || role == "rsa-srr")
        throw UsageError("train: role '" + role +
                         "' has no trainable parameters; rerank a base checkpoint at "
                         "evaluation time instead");
    const bool is_speaker = role == "s0" || role == "s0-ctx" || role == "amortized" ||
                            role == "rl";
    if (!is_speaker && role != "listener" && role != "lm")
        throw UsageError("train: unknown role '" + role +
                         "' (listener, s0, s0-ctx, amortized, rl, lm)");
    if (opt.out_path.empty()) throw UsageError("train: no output path given");
    if (opt.third < -1 || opt.third > 2)
        throw UsageError("train: --third must be 0, 1, or 2");
    if (is_speaker && opt.listener_path.empty())
        throw UsageError("train: role '" + role + "' requires --listener");

    world::Dataset ds = load_data_dir(opt.data_dir, cfg, "train");
    world::RenderCache cache(&ds);
    const std::vector<int64_t> train_idx = harness::range_indices(
        opt.third < 0 ? ds.splits.train : ds.splits.thirds[static_cast<size_t>(opt.third)]);
    const std::vector<int64_t> val_idx = harness::range_indices(ds.splits.validation);

    // one seed family per (role, third); resumes restore the saved stream
    const uint64_t seed =
        derived_seed(cfg.dataset.seed, "train:" + role + ":" + std::to_string(opt.third));
    Rng rng(mix_seed(seed, 1));

    std::shared_ptr<agents::LiteralListener> judge;  // early-stopping accuracy judge
    std::shared_ptr<agents::LiteralListener> teacher;  // internal/external listener
    if (is_speaker) {
        teacher = load_listener_for(ds, opt.listener_path, "train");
        judge = opt.val_listener_path.empty()
                    ? teacher
                    : load_listener_for(ds, opt.val_listener_path, "train");
    }

    nn::AdamState opt_state;
    std::string resume_rng;
    agents::TrainStats stats;
    ModelCheckpoint out;

    if (role == "listener") {
        std::shared_ptr<agents::LiteralListener> L;
        if (!opt.resume_path.empty()) {
            L = load_listener_for(ds, opt.resume_path, "train", &opt_state, &resume_rng);
            if (L->frozen())
                throw DataError("train: checkpoint '" + opt.resume_path +
                                "' holds a frozen listener");
        } else {
            agents::ListenerConfig lcfg;
            lcfg.image_size = ds.image_size;
            lcfg.embed_dim = cfg.model.embed_dim;
            lcfg.hidden = cfg.model.listener_hidden;
            lcfg.lr = cfg.training.lr_listener;
            lcfg.max_epochs = cfg.training.max_epochs;
            lcfg.batch = cfg.training.batch;
            lcfg.patience = cfg.training.patience;
            L = std::make_shared<agents::LiteralListener>(ds.vocab, lcfg, mix_seed(seed, 2));
        }
        if (!resume_rng.empty()) rng.restore_state(resume_rng);
        agents::ListenerTrainData data{&ds, &cache, train_idx, val_idx, {}};
        stats = run_guarded(role,
                            [&] { return agents::train_listener(*L, data, rng, &opt_state); });
        check_converged(stats, role);
        out = checkpoint_listener(*L, &opt_state, rng.state_string());
    } else if (role == "lm") {
        std::shared_ptr<harness::LanguageModel> lm;
        if (!opt.resume_path.empty()) {
            lm = lm_from_checkpoint(load_checkpoint(opt.resume_path), nullptr, &resume_rng);
            if (lm->vocab.tokens != ds.vocab.tokens)
                throw DataError("train: language model '" + opt.resume_path +
                                "' was trained on a different vocabulary than the dataset");
        } else {
            lm = std::make_shared<harness::LanguageModel>(ds.vocab, cfg.model.lm_hidden,
                                                          cfg.model.embed_dim, mix_seed(seed, 2));
        }
        if (!resume_rng.empty()) rng.restore_state(resume_rng);
        std::vector<std::vector<int64_t>> corpus;
        for (int64_t i : train_idx) {
            auto ids = ds.vocab.encode(ds.games[static_cast<size_t>(i)].gold);
            if (!ids.empty()) corpus.push_back(std::move(ids));
        }
        stats = run_guarded(role, [&] {
            return harness::train_unconditional_lm(*lm, corpus, cfg.training.lr_lm,
                                                   cfg.training.max_epochs, cfg.training.batch,
                                                   rng);
        });
        check_converged(stats, role);
        out = checkpoint_lm(*lm, nullptr, rng.state_string());
    } else {
        const agents::Variant v = agents::parse_variant(role);
        std::shared_ptr<agents::SpeakerCore> core;
        if (!opt.resume_path.empty()) {
            agents::Variant stored;
            core = load_core_for(ds, opt.resume_path, "train", &stored, nullptr, &opt_state,
                                 &resume_rng);
            if (stored != v)
                throw DataError("train: checkpoint '" + opt.resume_path + "' holds a '" +
                                agents::variant_name(stored) + "' speaker, not '" + role + "'");
        } else {
            agents::SpeakerConfig scfg;
            scfg.contextual = role == "s0-ctx";
            scfg.image_size = ds.image_size;
            scfg.embed_dim = cfg.model.embed_dim;
            scfg.hidden = cfg.model.speaker_hidden;
            scfg.max_len = cfg.model.resolved_max_len(ds.kind);
            scfg.lr = cfg.training.lr_speaker;
            scfg.max_epochs = cfg.training.max_epochs;
            scfg.batch = cfg.training.batch;
            scfg.patience = cfg.training.patience;
            core = std::make_shared<agents::SpeakerCore>(ds.vocab, scfg, mix_seed(seed, 2));
        }
        if (!resume_rng.empty()) rng.restore_state(resume_rng);

        double lambda = agents::default_lambda(v);
        if (role == "s0" || role == "s0-ctx") {
            stats = run_guarded(role, [&] {
                return agents::train_captioner(*core, ds, cache, train_idx, val_idx, *judge, rng,
                                               &opt_state);
            });
        } else if (role == "amortized") {
            if (cfg.model.lambda >= 0.0) lambda = cfg.model.lambda;
            teacher->freeze();
            stats = run_guarded(role, [&] {
                return agents::train_amortized(*core, *teacher, ds, cache, train_idx, val_idx,
                                               *judge, lambda, cfg.model.tau, rng, &opt_state);
            });
        } else {
            teacher->freeze();
            stats = run_guarded(role, [&] {
                return agents::train_reinforce(*core, *teacher, ds, cache, train_idx, val_idx,
                                               *judge, cfg.model.rl_baseline, rng, &opt_state);
            });
        }
        check_converged(stats, role);
        out = checkpoint_speaker(*core, v, lambda, &opt_state, rng.state_string());
    }

    ensure_parent_dir(opt.out_path);
    save_checkpoint(out, opt.out_path);
    write_curve(opt.out_path + ".curve.csv", stats);
}

// ------------------------------------------------------------------ evaluate

void cmd_evaluate(const RunConfig& cfg, const EvaluateOptions& opt) {
    cfg.validate();
    if (opt.out_dir.empty()) throw UsageError("evaluate: no output directory given");
    if (opt.listeners.empty()) throw UsageError("evaluate: requires at least one --listener");
    guard_output(fs::path(opt.out_dir) / "report.json", opt.force, "evaluate");

    world::Dataset ds = load_data_dir(opt.data_dir, cfg, "evaluate");
    if (!opt.lm_path.empty() && ds.kind != world::GameKind::colors)
        throw UsageError("evaluate: --lm only applies to the colors corpus");
    world::RenderCache cache(&ds);
    const harness::GameSet tset = harness::test_set(ds, cache);

    std::vector<std::shared_ptr<agents::LiteralListener>> listeners;
    for (const std::string& path : opt.listeners)
        listeners.push_back(load_listener_for(ds, path, "evaluate"));
    const auto judges = harness::listener_judges(listeners);

    std::shared_ptr<harness::LanguageModel> lm;
    if (!opt.lm_path.empty() && cfg.eval.measure_conventionality) {
        lm = lm_from_checkpoint(load_checkpoint(opt.lm_path));
        if (lm->vocab.tokens != ds.vocab.tokens)
            throw DataError("evaluate: language model '" + opt.lm_path +
                            "' was trained on a different vocabulary than the dataset");
    }

    auto speakers =
        load_speakers(opt.speakers, ds, cfg, opt.internal_listener_path, "evaluate");

    harness::EvalReport report;
    report.dataset_kind = kind_name(ds.kind);
    report.image_size = ds.image_size;
    report.dataset_label = report.dataset_kind + "-n" + std::to_string(ds.games.size()) + "-px" +
                           std::to_string(ds.image_size) + "-seed" + std::to_string(ds.seed);
    report.n_test_games = tset.size();

    auto add_rows = [&](const std::string& name, const std::vector<agents::Utterance>& utts) {
        report.efficacy[name] = harness::judge_utterances(utts, judges, tset);
        report.concision[name] = harness::concision_from_utterances(utts, tset);
        if (lm) report.conventionality[name] = harness::conventionality_from_utterances(utts, *lm);
    };

    for (auto& row : speakers)
        add_rows(row.name, harness::generate_utterances(
                               row.sp, tset, derived_seed(cfg.dataset.seed,
                                                          "evaluate:" + row.name)));
    if (cfg.eval.include_controls) {
        add_rows("gold-replay",
                 harness::generate_utterances(harness::gold_replay_speaker(ds.vocab), tset,
                                              derived_seed(cfg.dataset.seed,
                                                           "evaluate:gold-replay")));
        add_rows("random-tokens",
                 harness::generate_utterances(harness::random_token_speaker(ds.vocab), tset,
                                              derived_seed(cfg.dataset.seed,
                                                           "evaluate:random-tokens")));
    }

    if (cfg.eval.measure_speed) {
        for (auto& row : speakers) {
            const uint64_t seed = derived_seed(cfg.dataset.seed, "speed:" + row.name);
            auto& rows = report.speed[row.name];
            rows.push_back(harness::eval_speed(row.sp, tset, cfg.eval.speed_games,
                                               cfg.eval.speed_warmup, seed));
            if (row.sp.variant == agents::Variant::rsa_full && cfg.eval.speed_second_set &&
                ds.kind == world::GameKind::shapeworld) {
                agents::Speaker wide = row.sp;
                wide.utterance_set = agents::enumerate_utterances(ds.vocab, "exhaustive", 2);
                rows.push_back(harness::eval_speed(wide, tset, cfg.eval.speed_games,
                                                   cfg.eval.speed_warmup, mix_seed(seed, 1)));
            }
        }
    }

    fs::create_directories(opt.out_dir);
    harness::write_report_json(report, (fs::path(opt.out_dir) / "report.json").string());
    harness::write_report_csvs(report, opt.out_dir);
}

// ----------------------------------------------------------------- benchmark

namespace {

void write_speed_csv(const std::string& path,
                     const std::map<std::string, std::vector<harness::SpeedResult>>& speed) {
    std::ofstream f(path);
    if (!f) throw DataError("benchmark: cannot write '" + path + "'");
    f << "speaker,utterance_set_size,mean_seconds,sd_seconds,n_games\n";
    for (const auto& [name, rows] : speed)
        for (const auto& r : rows)
            f << name << "," << r.utterance_set_size << "," << num(r.mean_seconds) << ","
              << num(r.sd_seconds) << "," << r.n_games << "\n";
}

}  // namespace

void cmd_benchmark(const RunConfig& cfg, const BenchmarkOptions& opt) {
    cfg.validate();
    if (opt.out_dir.empty()) throw UsageError("benchmark: no output directory given");
    guard_output(fs::path(opt.out_dir) / "benchmark.json", opt.force, "benchmark");

    world::Dataset ds = load_data_dir(opt.data_dir, cfg, "benchmark");
    world::RenderCache cache(&ds);
    const harness::GameSet tset = harness::test_set(ds, cache);
    auto speakers =
        load_speakers(opt.speakers, ds, cfg, opt.internal_listener_path, "benchmark");

    harness::EvalReport report;
    report.dataset_kind = kind_name(ds.kind);
    report.image_size = ds.image_size;
    report.dataset_label = report.dataset_kind + "-n" + std::to_string(ds.games.size()) + "-px" +
                           std::to_string(ds.image_size) + "-seed" + std::to_string(ds.seed);
    report.n_test_games = tset.size();

    for (auto& row : speakers) {
        const uint64_t seed = derived_seed(cfg.dataset.seed, "speed:" + row.name);
        auto& rows = report.speed[row.name];
        rows.push_back(harness::eval_speed(row.sp, tset, cfg.eval.speed_games,
                                           cfg.eval.speed_warmup, seed));
        if (row.sp.variant == agents::Variant::rsa_full && cfg.eval.speed_second_set &&
            ds.kind == world::GameKind::shapeworld) {
            agents::Speaker wide = row.sp;
            wide.utterance_set = agents::enumerate_utterances(ds.vocab, "exhaustive", 2);
            rows.push_back(harness::eval_speed(wide, tset, cfg.eval.speed_games,
                                               cfg.eval.speed_warmup, mix_seed(seed, 1)));
        }
    }

    fs::create_directories(opt.out_dir);
    std::ofstream out(fs::path(opt.out_dir) / "benchmark.json");
    if (!out) throw DataError("benchmark: cannot write to '" + opt.out_dir + "'");
    out << harness::report_to_json(report) << "\n";
    write_speed_csv((fs::path(opt.out_dir) / "fig6_speed.csv").string(), report.speed);
}

// -------------------------------------------------------------------- report

void cmd_report(const ReportOptions& opt) {
    if (opt.in_path.empty()) throw UsageError("report: no input report given");
    if (opt.out_dir.empty()) throw UsageError("report: no output directory given");
    std::ifstream in(opt.in_path);
    if (!in) throw DataError("report: cannot open '" + opt.in_path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    const harness::EvalReport report = harness::report_from_json(buf.str());
    fs::create_directories(opt.out_dir);
    harness::write_report_csvs(report, opt.out_dir);
}

// ------------------------------------------------------------------ main

namespace {

RunConfig config_for(const std::string& path, int64_t seed_override) {
    RunConfig cfg = path.empty() ? RunConfig{} : load_run_config(path);
    if (seed_override >= 0) cfg.dataset.seed = static_cast<uint64_t>(seed_override);
    return cfg;
}

std::string out_or_default(const std::string& explicit_path, const char* leaf, const char* cmd) {
    if (!explicit_path.empty()) return explicit_path;
    const char* root = std::getenv(kOutRootEnv);
    if (!root || !*root)
        throw UsageError(std::string(cmd) + ": no output path (pass --out or set " +
                         kOutRootEnv + ")");
    return (fs::path(root) / leaf).string();
}

}  // namespace

int run_main(int argc, const char* const* argv) {
    CLI::App app{"reference-game speakers: data generation, training, and evaluation"};
    app.require_subcommand(1);

    std::string config_path;
    int64_t seed_override = -1;

    GenerateDataOptions gen;
    std::string gen_holdout;
    int64_t gen_n_games = -1;
    int gen_image_size = 0;
    auto* gen_cmd = app.add_subcommand("generate-data", "render a dataset and its manifest");
    gen_cmd->add_option("--config", config_path, "run configuration json");
    gen_cmd->add_option("--seed", seed_override, "override the configured seed");
    gen_cmd->add_option("--n-games", gen_n_games, "override the configured game count");
    gen_cmd->add_option("--holdout", gen_holdout, "hold an attribute out of training targets");
    gen_cmd->add_option("--image-size", gen_image_size, "override the configured image size");
    gen_cmd->add_option("--out", gen.out_dir, "dataset directory");
    gen_cmd->add_flag("--force", gen.force, "overwrite an existing dataset");

    TrainOptions tr;
    auto* tr_cmd = app.add_subcommand("train", "train one model to a checkpoint");
    tr_cmd->add_option("--config", config_path, "run configuration json");
    tr_cmd->add_option("--seed", seed_override, "override the configured seed");
    tr_cmd->add_option("--data", tr.data_dir, "dataset directory")->required();
    tr_cmd->add_option("--role", tr.role, "listener | s0 | s0-ctx | amortized | rl | lm")
        ->required();
    tr_cmd->add_option("--out", tr.out_path, "checkpoint path");
    tr_cmd->add_option("--listener", tr.listener_path,
                       "listener checkpoint: judge, and teacher for amortized/rl");
    tr_cmd->add_option("--val-listener", tr.val_listener_path,
                       "separate early-stopping judge");
    tr_cmd->add_option("--resume", tr.resume_path, "checkpoint to continue from");
    tr_cmd->add_option("--third", tr.third, "train on one training third (0-2)");

    EvaluateOptions ev;
    auto* ev_cmd = app.add_subcommand("evaluate", "score speakers on the test split");
    ev_cmd->add_option("--config", config_path, "run configuration json");
    ev_cmd->add_option("--seed", seed_override, "override the configured seed");
    ev_cmd->add_option("--data", ev.data_dir, "dataset directory")->required();
    ev_cmd->add_option("--out", ev.out_dir, "report directory");
    ev_cmd->add_option("--speaker", ev.speakers,
                       "checkpoint path, 'rsa-full', or 'rsa-srr=<base.ckpt>' (repeatable)");
    ev_cmd->add_option("--listener", ev.listeners, "evaluation listener checkpoint (repeatable)");
    ev_cmd->add_option("--internal-listener", ev.internal_listener_path,
                       "listener the rerank speakers consult");
    ev_cmd->add_option("--lm", ev.lm_path, "language model for conventionality (colors)");
    ev_cmd->add_flag("--force", ev.force, "overwrite an existing report");

    BenchmarkOptions bm;
    auto* bm_cmd = app.add_subcommand("benchmark", "time utterance generation per speaker");
    bm_cmd->add_option("--config", config_path, "run configuration json");
    bm_cmd->add_option("--seed", seed_override, "override the configured seed");
    bm_cmd->add_option("--data", bm.data_dir, "dataset directory")->required();
    bm_cmd->add_option("--out", bm.out_dir, "benchmark directory");
    bm_cmd->add_option("--speaker", bm.speakers,
                       "checkpoint path, 'rsa-full', or 'rsa-srr=<base.ckpt>' (repeatable)");
    bm_cmd->add_option("--internal-listener", bm.internal_listener_path,
                       "listener the rerank speakers consult");
    bm_cmd->add_flag("--force", bm.force, "overwrite an existing benchmark");

    ReportOptions rp;
    auto* rp_cmd = app.add_subcommand("report", "regenerate the csv tables from a report");
    rp_cmd->add_option("--in", rp.in_path, "a report.json written by evaluate")->required();
    rp_cmd->add_option("--out", rp.out_dir, "table directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen_cmd->parsed()) {
            RunConfig cfg = config_for(config_path, seed_override);
            if (gen_n_games >= 0) cfg.dataset.n_games = gen_n_games;
            if (!gen_holdout.empty()) cfg.dataset.holdout = gen_holdout;
            if (gen_image_size > 0) cfg.dataset.image_size = gen_image_size;
            gen.out_dir = out_or_default(gen.out_dir, "data", "generate-data");
            cmd_generate_data(cfg, gen);
        } else if (tr_cmd->parsed()) {
            tr.out_path = out_or_default(tr.out_path, (tr.role + ".ckpt").c_str(), "train");
            cmd_train(config_for(config_path, seed_override), tr);
        } else if (ev_cmd->parsed()) {
            ev.out_dir = out_or_default(ev.out_dir, "eval", "evaluate");
            cmd_evaluate(config_for(config_path, seed_override), ev);
        } else if (bm_cmd->parsed()) {
            bm.out_dir = out_or_default(bm.out_dir, "benchmark", "benchmark");
            cmd_benchmark(config_for(config_path, seed_override), bm);
        } else if (rp_cmd->parsed()) {
            rp.out_dir = out_or_default(rp.out_dir, "report", "report");
            cmd_report(rp);
        }
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

}  // namespace refgame::io
