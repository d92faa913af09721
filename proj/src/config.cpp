#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "refgame/io.hpp"

namespace refgame::io {

using nlohmann::json;

std::array<double, 3> DatasetConfig::resolved_ratios() const {
    if (ratios[0] > 0.0 || ratios[1] > 0.0 || ratios[2] > 0.0) return ratios;
    if (kind == "colors-file") return {42.0, 3.0, 1.0};
    return {60.0, 15.0, 1.0};
}

int64_t DatasetConfig::resolved_n_test() const {
    if (n_test > 0) return n_test;
    const auto r = resolved_ratios();
    const double share = r[2] / (r[0] + r[1] + r[2]);
    return std::max<int64_t>(1, std::llround(static_cast<double>(n_games) * share));
}

agents::Variant ModelConfig::parsed_variant() const {
    try {
        return agents::parse_variant(variant);
    } catch (const std::exception&) {
        throw UsageError("config: unknown variant '" + variant + "'");
    }
}

double ModelConfig::resolved_lambda() const {
    return lambda >= 0.0 ? lambda : agents::default_lambda(parsed_variant());
}

int ModelConfig::resolved_max_len(world::GameKind kind) const {
    if (max_len > 0) return max_len;
    return kind == world::GameKind::colors ? 20 : 4;
}

int EvalConfig::resolved_n_eval_listeners(world::GameKind kind) const {
    if (n_eval_listeners > 0) return n_eval_listeners;
    return kind == world::GameKind::colors ? 1 : 9;
}

void RunConfig::validate() const {
    auto bad = [](const std::string& what) { throw UsageError("config: " + what); };

    if (dataset.kind != "shapeworld" && dataset.kind != "colors-file")
        bad("dataset.kind must be 'shapeworld' or 'colors-file', got '" + dataset.kind + "'");
    if (dataset.kind == "colors-file" && dataset.path.empty())
        bad("dataset.path is required when dataset.kind is 'colors-file'");
    if (dataset.n_games <= 0) bad("dataset.n_games must be positive");
    if (dataset.n_test < 0) bad("dataset.n_test must not be negative");
    for (double r : dataset.ratios)
        if (r < 0.0 || !std::isfinite(r)) bad("dataset.ratios entries must be finite and >= 0");
    if (!dataset.holdout.empty()) {
        if (dataset.kind != "shapeworld") bad("dataset.holdout applies to shapeworld only");
        if (dataset.holdout != "red" && dataset.holdout != "square" &&
            dataset.holdout != "combos")
            bad("dataset.holdout must be 'red', 'square', or 'combos', got '" + dataset.holdout +
                "'");
    }
    if (dataset.image_size <= 0 || dataset.image_size % 16 != 0)
        bad("dataset.image_size must be a positive multiple of 16");
    if (dataset.min_token_freq < 1) bad("dataset.min_token_freq must be at least 1");

    model.parsed_variant();
    if (model.sample_count <= 0) bad("model.sample_count must be positive");
    if (!(model.tau > 0.0)) bad("model.tau must be positive");
    if (model.embed_dim <= 0) bad("model.embed_dim must be positive");
    if (model.listener_hidden <= 0) bad("model.listener_hidden must be positive");
    if (model.speaker_hidden < 0) bad("model.speaker_hidden must not be negative");
    if (model.lm_hidden <= 0) bad("model.lm_hidden must be positive");
    if (model.max_len < 0) bad("model.max_len must not be negative");

    if (!(training.lr_speaker > 0.0) || !(training.lr_listener > 0.0) ||
        !(training.lr_lm > 0.0))
        bad("training learning rates must be positive");
    if (training.max_epochs <= 0) bad("training.max_epochs must be positive");
    if (training.batch <= 0) bad("training.batch must be positive");
    if (training.patience <= 0) bad("training.patience must be positive");

    if (eval.n_eval_listeners < 0) bad("eval.n_eval_listeners must not be negative");
    if (eval.speed_games <= 0) bad("eval.speed_games must be positive");
    if (eval.speed_warmup < 0) bad("eval.speed_warmup must not be negative");
}

namespace {

// strict field-by-field readers: every known key is typed, anything else is
// rejected with its full dotted path

template <typename T>
T typed(const json& v, const std::string& path) {
    try {
        return v.get<T>();
    } catch (const json::exception&) {
        throw UsageError("config: key '" + path + "' has the wrong type");
    }
}

void parse_dataset(const json& j, DatasetConfig& out) {
    for (const auto& [key, v] : j.items()) {
        const std::string path = "dataset." + key;
        if (key == "kind")
            out.kind = typed<std::string>(v, path);
        else if (key == "path")
            out.path = typed<std::string>(v, path);
        else if (key == "n_games")
            out.n_games = typed<int64_t>(v, path);
        else if (key == "n_test")
            out.n_test = typed<int64_t>(v, path);
        else if (key == "ratios") {
            const auto r = typed<std::vector<double>>(v, path);
            if (r.size() != 3)
                throw UsageError("config: key 'dataset.ratios' needs exactly 3 entries");
            out.ratios = {r[0], r[1], r[2]};
        } else if (key == "holdout")
            out.holdout = typed<std::string>(v, path);
        else if (key == "image_size")
            out.image_size = typed<int>(v, path);
        else if (key == "min_token_freq")
            out.min_token_freq = typed<int>(v, path);
        else if (key == "seed")
            out.seed = typed<uint64_t>(v, path);
        else
            throw UsageError("config: unknown key '" + path + "'");
    }
}

void parse_model(const json& j, ModelConfig& out) {
    for (const auto& [key, v] : j.items()) {
        const std::string path = "model." + key;
        if (key == "variant")
            out.variant = typed<std::string>(v, path);
        else if (key == "lambda")
            out.lambda = typed<double>(v, path);
        else if (key == "sample_count")
            out.sample_count = typed<int>(v, path);
        else if (key == "tau")
            out.tau = typed<double>(v, path);
        else if (key == "embed_dim")
            out.embed_dim = typed<int64_t>(v, path);
        else if (key == "listener_hidden")
            out.listener_hidden = typed<int64_t>(v, path);
        else if (key == "speaker_hidden")
            out.speaker_hidden = typed<int64_t>(v, path);
        else if (key == "lm_hidden")
            out.lm_hidden = typed<int64_t>(v, path);
        else if (key == "max_len")
            out.max_len = typed<int>(v, path);
        else if (key == "rl_baseline")
            out.rl_baseline = typed<bool>(v, path);
        else
            throw UsageError("config: unknown key '" + path + "'");
    }
}

void parse_training(const json& j, TrainingConfig& out) {
    for (const auto& [key, v] : j.items()) {
        const std::string path = "training." + key;
        if (key == "lr_speaker")
            out.lr_speaker = typed<double>(v, path);
        else if (key == "lr_listener")
            out.lr_listener = typed<double>(v, path);
        else if (key == "lr_lm")
            out.lr_lm = typed<double>(v, path);
        else if (key == "max_epochs")
            out.max_epochs = typed<int>(v, path);
        else if (key == "batch")
            out.batch = typed<int>(v, path);
        else if (key == "patience")
            out.patience = typed<int>(v, path);
        else
            throw UsageError("config: unknown key '" + path + "'");
    }
}

void parse_eval(const json& j, EvalConfig& out) {
    for (const auto& [key, v] : j.items()) {
        const std::string path = "eval." + key;
        if (key == "n_eval_listeners")
            out.n_eval_listeners = typed<int>(v, path);
        else if (key == "speed_games")
            out.speed_games = typed<int>(v, path);
        else if (key == "speed_warmup")
            out.speed_warmup = typed<int>(v, path);
        else if (key == "speed_second_set")
            out.speed_second_set = typed<bool>(v, path);
        else if (key == "include_controls")
            out.include_controls = typed<bool>(v, path);
        else if (key == "measure_speed")
            out.measure_speed = typed<bool>(v, path);
        else if (key == "measure_conventionality")
            out.measure_conventionality = typed<bool>(v, path);
        else
            throw UsageError("config: unknown key '" + path + "'");
    }
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw UsageError(std::string("config: not valid json: ") + e.what());
    }
    if (!j.is_object()) throw UsageError("config: top level must be an object");

    RunConfig cfg;
    for (const auto& [key, v] : j.items()) {
        if (!v.is_object()) throw UsageError("config: section '" + key + "' must be an object");
        if (key == "dataset")
            parse_dataset(v, cfg.dataset);
        else if (key == "model")
            parse_model(v, cfg.model);
        else if (key == "training")
            parse_training(v, cfg.training);
        else if (key == "eval")
            parse_eval(v, cfg.eval);
        else
            throw UsageError("config: unknown section '" + key + "'");
    }
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("config: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str());
}

std::string run_config_to_json(const RunConfig& cfg) {
    json j;
    j["dataset"] = {{"kind", cfg.dataset.kind},
                    {"path", cfg.dataset.path},
                    {"n_games", cfg.dataset.n_games},
                    {"n_test", cfg.dataset.n_test},
                    {"ratios", cfg.dataset.ratios},
                    {"holdout", cfg.dataset.holdout},
                    {"image_size", cfg.dataset.image_size},
                    {"min_token_freq", cfg.dataset.min_token_freq},
                    {"seed", cfg.dataset.seed}};
    j["model"] = {{"variant", cfg.model.variant},
                  {"lambda", cfg.model.lambda},
                  {"sample_count", cfg.model.sample_count},
                  {"tau", cfg.model.tau},
                  {"embed_dim", cfg.model.embed_dim},
                  {"listener_hidden", cfg.model.listener_hidden},
                  {"speaker_hidden", cfg.model.speaker_hidden},
                  {"lm_hidden", cfg.model.lm_hidden},
                  {"max_len", cfg.model.max_len},
                  {"rl_baseline", cfg.model.rl_baseline}};
    j["training"] = {{"lr_speaker", cfg.training.lr_speaker},
                     {"lr_listener", cfg.training.lr_listener},
                     {"lr_lm", cfg.training.lr_lm},
                     {"max_epochs", cfg.training.max_epochs},
                     {"batch", cfg.training.batch},
                     {"patience", cfg.training.patience}};
    j["eval"] = {{"n_eval_listeners", cfg.eval.n_eval_listeners},
                 {"speed_games", cfg.eval.speed_games},
                 {"speed_warmup", cfg.eval.speed_warmup},
                 {"speed_second_set", cfg.eval.speed_second_set},
                 {"include_controls", cfg.eval.include_controls},
                 {"measure_speed", cfg.eval.measure_speed},
                 {"measure_conventionality", cfg.eval.measure_conventionality}};
    return j.dump(2);
}

}  // namespace refgame::io
