#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "refgame/rng.hpp"
#include "refgame/tensor.hpp"

namespace refgame::world {

using ad::TensorPtr;

// ---------------------------------------------------------------- attributes

enum class Color { red, green, blue, yellow, white, gray };
enum class Shape { square, circle, ellipse, rectangle, triangle };

inline constexpr int kNumColors = 6;
inline constexpr int kNumShapes = 5;

const char* color_name(Color c);
const char* shape_name(Shape s);
Color parse_color(const std::string& s);
Shape parse_shape(const std::string& s);

// fill RGB for each color, channels in [0,1]
const std::array<float, 3>& color_rgb(Color c);

struct ShapeSpec {
    Color color = Color::red;
    Shape shape = Shape::square;
    int x = 0, y = 0;  // center, pixel units
    int size = 0;      // full extent, pixels
};

enum class ContextType { shape_sufficient, color_sufficient, both_needed };
enum class ColorsCondition { close, far, split };

const char* context_name(ContextType c);
ContextType parse_context(const std::string& s);
const char* condition_name(ColorsCondition c);
ColorsCondition parse_condition(const std::string& s);

enum class GameKind { shapeworld, colors };

// One reference game: three images, one target. ShapeWorld games carry shape
// specs; Colors games carry solid RGB patches (channels in [0,1]).
struct ReferenceGame {
    GameKind kind = GameKind::shapeworld;
    std::array<ShapeSpec, 3> specs{};
    std::array<std::array<float, 3>, 3> rgb{};
    int target = 0;
    ContextType context = ContextType::both_needed;
    ColorsCondition condition = ColorsCondition::far;
    std::vector<std::string> gold;  // content tokens, no sentinels
};

// ---------------------------------------------------------------- vocabulary

struct Vocabulary {
    std::vector<std::string> tokens;
    std::unordered_map<std::string, int64_t> index;
    int64_t bos = 0, eos = 1, unk = 2;

    int64_t size() const { return static_cast<int64_t>(tokens.size()); }
    int64_t id(const std::string& tok) const;         // unk when absent
    const std::string& token(int64_t id) const;
    std::vector<int64_t> encode(const std::vector<std::string>& toks) const;
    std::vector<std::string> decode(const std::vector<int64_t>& ids) const;

    // 15 tokens: <s> </s> <UNK>, 6 colors, 5 shapes, "shape"
    static Vocabulary shapeworld();
    // sentinels + the given content tokens, in order
    static Vocabulary from_content(const std::vector<std::string>& content);
};

// token classes for utterance analysis: color words, shape words, everything
// else (sentinels, <UNK> and the bare word "shape" count as other)
bool is_color_token(const Vocabulary& v, int64_t id);
bool is_shape_token(const Vocabulary& v, int64_t id);

// ---------------------------------------------------------------- rendering

// Deterministic rasterization of one shape on a black background.
// Returns (3, size, size), channels in [0,1].
TensorPtr render_shape(const ShapeSpec& spec, int image_size);

// All three images of a game stacked as (3, 3, H, W).
TensorPtr render_game(const ReferenceGame& game, int image_size);

// ---------------------------------------------------------------- generation

struct WorldConfig {
    int image_size = 64;
    int min_size = 0, max_size = 0;  // 0: derived from image_size
    std::array<double, 3> context_mix = {1.0, 1.0, 1.0};  // shape-suff, color-suff, both-needed
    double p_full_template = 0.7;  // "<color> <shape>"; rest is "<color> shape"
    int retry_cap = 1000;

    int effective_min_size() const { return min_size > 0 ? min_size : image_size * 3 / 8; }
    int effective_max_size() const { return max_size > 0 ? max_size : image_size * 9 / 16; }
};

ReferenceGame sample_game(Rng& rng, ContextType context, const WorldConfig& cfg);
std::vector<std::string> gold_utterance(const ReferenceGame& game, Rng& rng, const WorldConfig& cfg);

// true when the game's attribute pattern matches its declared context type
bool context_invariant_holds(const ReferenceGame& game);

// ---------------------------------------------------------------- splits

struct Splits {
    // [begin, end) ranges over the game list
    std::pair<int64_t, int64_t> train, validation, test;
    // train subdivided: speaker+internal listener / validation listener /
    // evaluation listeners
    std::array<std::pair<int64_t, int64_t>, 3> thirds;
};

// Largest-remainder split of n games by the given ratios, with the train
// share then snapped down to a multiple of 3 (leftover goes to test) so the
// thirds are exactly equal.
Splits make_splits(int64_t n_games, const std::array<double, 3>& ratios);

// ---------------------------------------------------------------- datasets

struct Dataset {
    GameKind kind = GameKind::shapeworld;
    int image_size = 64;
    uint64_t seed = 0;
    Vocabulary vocab;
    std::vector<ReferenceGame> games;
    Splits splits;
};

Dataset generate_shapeworld(int64_t n_games, const std::array<double, 3>& ratios,
                            const WorldConfig& cfg, uint64_t seed);

struct Holdout {
    enum class Kind { color, shape, combos };
    Kind kind = Kind::color;
    Color color = Color::red;
    Shape shape = Shape::square;

    static const std::vector<std::pair<Color, Shape>>& combo_list();
    bool excludes(Color c, Shape s) const;  // true when (c,s) may not be a training target
};

Holdout parse_holdout(const std::string& s);  // "red" | "square" | "combos"

// Training games never have a held-out target referent; every test game does.
Dataset make_heldout_dataset(const Holdout& holdout, int64_t n_train, int64_t n_test,
                             const std::array<double, 3>& train_ratios, const WorldConfig& cfg,
                             uint64_t seed);

// ---------------------------------------------------------------- colors corpus

// Newline-delimited JSON records: {"rgb": [[r,g,b],[r,g,b],[r,g,b]],
// "target": 0|1|2, "condition": "close"|"far"|"split", "text": "..."}.
// Utterances are lowercased and whitespace-tokenized; the vocabulary is
// built from the train split, replacing tokens seen fewer than min_freq
// times with <UNK>.
Dataset ingest_colors(const std::string& path, int min_freq, const std::array<double, 3>& ratios,
                      int image_size);

// ---------------------------------------------------------------- dataset files

// dir/manifest.json + dir/games.ndjson; loading re-derives splits and vocab
// from the manifest
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

// Rendered-tensor cache: versioned binary header, then per-tensor dims and
// little-endian 32-bit floats.
void save_render_cache(const std::string& path, const std::vector<TensorPtr>& tensors);
std::vector<TensorPtr> load_render_cache(const std::string& path);

// in-memory per-game render memoization used by training/eval loops
class RenderCache {
public:
    RenderCache(const Dataset* ds) : ds_(ds), cache_(ds->games.size()) {}
    const TensorPtr& game_images(int64_t idx);

private:
    const Dataset* ds_;
    std::vector<TensorPtr> cache_;
};

}  // namespace refgame::world
