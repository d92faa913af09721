#include "refgame/world.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace refgame::world {

using nlohmann::json;

// ---------------------------------------------------------------- attributes

namespace {

constexpr const char* kColorNames[kNumColors] = {"red", "green", "blue", "yellow", "white", "gray"};
constexpr const char* kShapeNames[kNumShapes] = {"square", "circle", "ellipse", "rectangle",
                                                 "triangle"};

const std::array<std::array<float, 3>, kNumColors> kRgb = {{
    {1.0f, 0.0f, 0.0f},
    {0.0f, 1.0f, 0.0f},
    {0.0f, 0.0f, 1.0f},
    {1.0f, 1.0f, 0.0f},
    {1.0f, 1.0f, 1.0f},
    {0.5f, 0.5f, 0.5f},
}};

}  // namespace

const char* color_name(Color c) { return kColorNames[static_cast<int>(c)]; }
const char* shape_name(Shape s) { return kShapeNames[static_cast<int>(s)]; }
const std::array<float, 3>& color_rgb(Color c) { return kRgb[static_cast<size_t>(c)]; }

Color parse_color(const std::string& s) {
    for (int i = 0; i < kNumColors; ++i)
        if (s == kColorNames[i]) return static_cast<Color>(i);
    throw std::runtime_error("unknown color '" + s + "'");
}

Shape parse_shape(const std::string& s) {
    for (int i = 0; i < kNumShapes; ++i)
        if (s == kShapeNames[i]) return static_cast<Shape>(i);
    throw std::runtime_error("unknown shape '" + s + "'");
}

const char* context_name(ContextType c) {
    switch (c) {
        case ContextType::shape_sufficient: return "shape-sufficient";
        case ContextType::color_sufficient: return "color-sufficient";
        case ContextType::both_needed: return "both-needed";
    }
    return "?";
}

ContextType parse_context(const std::string& s) {
    if (s == "shape-sufficient") return ContextType::shape_sufficient;
    if (s == "color-sufficient") return ContextType::color_sufficient;
    if (s == "both-needed") return ContextType::both_needed;
    throw std::runtime_error("unknown context type '" + s + "'");
}

const char* condition_name(ColorsCondition c) {
    switch (c) {
        case ColorsCondition::close: return "close";
        case ColorsCondition::far: return "far";
        case ColorsCondition::split: return "split";
    }
    return "?";
}

ColorsCondition parse_condition(const std::string& s) {
    if (s == "close") return ColorsCondition::close;
    if (s == "far") return ColorsCondition::far;
    if (s == "split") return ColorsCondition::split;
    throw std::runtime_error("unknown condition tag '" + s + "'");
}

// ---------------------------------------------------------------- vocabulary

int64_t Vocabulary::id(const std::string& tok) const {
    auto it = index.find(tok);
    return it == index.end() ? unk : it->second;
}

const std::string& Vocabulary::token(int64_t i) const {
    if (i < 0 || i >= size())
        throw std::runtime_error("vocabulary: token id " + std::to_string(i) + " out of range");
    return tokens[static_cast<size_t>(i)];
}

std::vector<int64_t> Vocabulary::encode(const std::vector<std::string>& toks) const {
    std::vector<int64_t> out;
    out.reserve(toks.size());
    for (const auto& t : toks) out.push_back(id(t));
    return out;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int64_t>& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int64_t i : ids) out.push_back(token(i));
    return out;
}

Vocabulary Vocabulary::from_content(const std::vector<std::string>& content) {
    Vocabulary v;
    v.tokens = {"<s>", "</s>", "<UNK>"};
    for (const auto& t : content) v.tokens.push_back(t);
    for (size_t i = 0; i < v.tokens.size(); ++i) v.index[v.tokens[i]] = static_cast<int64_t>(i);
    if (v.index.size() != v.tokens.size())
        throw std::runtime_error("vocabulary: duplicate tokens in content list");
    return v;
}

Vocabulary Vocabulary::shapeworld() {
    std::vector<std::string> content;
    for (const char* c : kColorNames) content.push_back(c);
    for (const char* s : kShapeNames) content.push_back(s);
    content.push_back("shape");
    return from_content(content);
}

bool is_color_token(const Vocabulary& v, int64_t id) {
    const std::string& t = v.token(id);
    for (const char* c : kColorNames)
        if (t == c) return true;
    return false;
}

bool is_shape_token(const Vocabulary& v, int64_t id) {
    const std::string& t = v.token(id);
    for (const char* s : kShapeNames)
        if (t == s) return true;
    return false;
}

// ---------------------------------------------------------------- rendering

namespace {

bool covers(const ShapeSpec& sp, double px, double py) {
    const double dx = px - sp.x, dy = py - sp.y;
    const double h = sp.size / 2.0;
    switch (sp.shape) {
        case Shape::square: return std::fabs(dx) <= h && std::fabs(dy) <= h;
        case Shape::circle: return dx * dx + dy * dy <= h * h;
        case Shape::ellipse: {
            const double b = sp.size / 4.0;
            return (dx * dx) / (h * h) + (dy * dy) / (b * b) <= 1.0;
        }
        case Shape::rectangle: return std::fabs(dx) <= h && std::fabs(dy) <= sp.size / 4.0;
        case Shape::triangle: {
            const double t = dy + h;  // 0 at apex, size at base
            if (t < 0.0 || t > sp.size) return false;
            return std::fabs(dx) <= (t / sp.size) * h;
        }
    }
    return false;
}

}  // namespace

TensorPtr render_shape(const ShapeSpec& spec, int image_size) {
    const double h = spec.size / 2.0;
    if (spec.size < 1 || spec.x - h < 0.0 || spec.x + h > image_size || spec.y - h < 0.0 ||
        spec.y + h > image_size)
        throw std::runtime_error("render_shape: shape extends outside the " +
                                 std::to_string(image_size) + "px image");
    auto img = ad::make_tensor({3, image_size, image_size}, ad::Dtype::F32, false);
    float* p = img->data<float>();
    const auto& rgb = color_rgb(spec.color);
    const int HW = image_size * image_size;
    const int y0 = std::max(0, static_cast<int>(std::floor(spec.y - h)));
    const int y1 = std::min(image_size - 1, static_cast<int>(std::ceil(spec.y + h)));
    const int x0 = std::max(0, static_cast<int>(std::floor(spec.x - h)));
    const int x1 = std::min(image_size - 1, static_cast<int>(std::ceil(spec.x + h)));
    for (int py = y0; py <= y1; ++py) {
        for (int px = x0; px <= x1; ++px) {
            if (!covers(spec, px + 0.5, py + 0.5)) continue;
            const int at = py * image_size + px;
            p[at] = rgb[0];
            p[HW + at] = rgb[1];
            p[2 * HW + at] = rgb[2];
        }
    }
    return img;
}

TensorPtr render_game(const ReferenceGame& game, int image_size) {
    auto out = ad::make_tensor({3, 3, image_size, image_size}, ad::Dtype::F32, false);
    float* p = out->data<float>();
    const int64_t plane = 3LL * image_size * image_size;
    if (game.kind == GameKind::shapeworld) {
        for (int i = 0; i < 3; ++i) {
            auto img = render_shape(game.specs[static_cast<size_t>(i)], image_size);
            std::memcpy(p + i * plane, img->data<float>(), sizeof(float) * static_cast<size_t>(plane));
        }
    } else {
        const int64_t HW = static_cast<int64_t>(image_size) * image_size;
        for (int i = 0; i < 3; ++i)
            for (int c = 0; c < 3; ++c) {
                float* dst = p + i * plane + c * HW;
                const float v = game.rgb[static_cast<size_t>(i)][static_cast<size_t>(c)];
                for (int64_t k = 0; k < HW; ++k) dst[k] = v;
            }
    }
    return out;
}

// ---------------------------------------------------------------- generation

namespace {

Color random_color(Rng& rng) { return static_cast<Color>(rng.below(kNumColors)); }
Shape random_shape(Rng& rng) { return static_cast<Shape>(rng.below(kNumShapes)); }

Color random_color_except(Rng& rng, Color avoid) {
    auto c = static_cast<Color>(rng.below(kNumColors - 1));
    return static_cast<int>(c) >= static_cast<int>(avoid) ? static_cast<Color>(static_cast<int>(c) + 1)
                                                          : c;
}

Shape random_shape_except(Rng& rng, Shape avoid) {
    auto s = static_cast<Shape>(rng.below(kNumShapes - 1));
    return static_cast<int>(s) >= static_cast<int>(avoid) ? static_cast<Shape>(static_cast<int>(s) + 1)
                                                          : s;
}

void place(ShapeSpec& sp, Rng& rng, const WorldConfig& cfg) {
    sp.size = rng.range_int(cfg.effective_min_size(), cfg.effective_max_size());
    const int margin = (sp.size + 1) / 2;
    sp.x = rng.range_int(margin, cfg.image_size - margin);
    sp.y = rng.range_int(margin, cfg.image_size - margin);
}

}  // namespace

ReferenceGame sample_game(Rng& rng, ContextType context, const WorldConfig& cfg) {
    ReferenceGame g;
    g.kind = GameKind::shapeworld;
    g.context = context;

    ShapeSpec target, d1, d2;
    target.color = random_color(rng);
    target.shape = random_shape(rng);
    switch (context) {
        case ContextType::both_needed:
            // one distractor shares the color, the other shares the shape
            d1.color = target.color;
            d1.shape = random_shape_except(rng, target.shape);
            d2.color = random_color_except(rng, target.color);
            d2.shape = target.shape;
            break;
        case ContextType::color_sufficient:
            // target color absent; one distractor repeats the shape so shape
            // alone cannot identify the target
            d1.color = random_color_except(rng, target.color);
            d1.shape = target.shape;
            d2.color = random_color_except(rng, target.color);
            d2.shape = random_shape(rng);
            break;
        case ContextType::shape_sufficient:
            d1.color = target.color;
            d1.shape = random_shape_except(rng, target.shape);
            d2.color = random_color(rng);
            d2.shape = random_shape_except(rng, target.shape);
            break;
    }
    place(target, rng, cfg);
    place(d1, rng, cfg);
    place(d2, rng, cfg);

    g.target = static_cast<int>(rng.below(3));
    const bool swap = rng.below(2) == 1;
    int slot = 0;
    std::array<ShapeSpec, 2> ds = swap ? std::array<ShapeSpec, 2>{d2, d1}
                                       : std::array<ShapeSpec, 2>{d1, d2};
    for (int i = 0; i < 3; ++i) {
        if (i == g.target) g.specs[static_cast<size_t>(i)] = target;
        else g.specs[static_cast<size_t>(i)] = ds[static_cast<size_t>(slot++)];
    }
    g.gold = gold_utterance(g, rng, cfg);
    return g;
}

std::vector<std::string> gold_utterance(const ReferenceGame& game, Rng& rng,
                                        const WorldConfig& cfg) {
    const auto& t = game.specs[static_cast<size_t>(game.target)];
    if (rng.uniform() < cfg.p_full_template) return {color_name(t.color), shape_name(t.shape)};
    return {color_name(t.color), "shape"};
}

bool context_invariant_holds(const ReferenceGame& game) {
    const auto& t = game.specs[static_cast<size_t>(game.target)];
    bool shares_color = false, shares_shape = false, duplicate_pair = false;
    for (int i = 0; i < 3; ++i) {
        if (i == game.target) continue;
        const auto& d = game.specs[static_cast<size_t>(i)];
        if (d.color == t.color) shares_color = true;
        if (d.shape == t.shape) shares_shape = true;
        if (d.color == t.color && d.shape == t.shape) duplicate_pair = true;
    }
    if (duplicate_pair) return false;
    switch (game.context) {
        case ContextType::both_needed: return shares_color && shares_shape;
        case ContextType::color_sufficient: return !shares_color;
        case ContextType::shape_sufficient: return !shares_shape;
    }
    return false;
}

// ---------------------------------------------------------------- splits

Splits make_splits(int64_t n_games, const std::array<double, 3>& ratios) {
    for (double r : ratios)
        if (!(r > 0.0)) throw std::runtime_error("make_splits: ratios must be positive");
    if (n_games < 60)
        throw std::runtime_error("make_splits: need at least 60 games, got " +
                                 std::to_string(n_games));
    const double total = ratios[0] + ratios[1] + ratios[2];
    std::array<int64_t, 3> sizes;
    std::array<double, 3> frac;
    int64_t assigned = 0;
    for (int i = 0; i < 3; ++i) {
        const double share = n_games * ratios[static_cast<size_t>(i)] / total;
        sizes[static_cast<size_t>(i)] = static_cast<int64_t>(std::floor(share));
        frac[static_cast<size_t>(i)] = share - std::floor(share);
        assigned += sizes[static_cast<size_t>(i)];
    }
    // largest remainder takes the leftover seats
    while (assigned < n_games) {
        int best = 0;
        for (int i = 1; i < 3; ++i)
            if (frac[static_cast<size_t>(i)] > frac[static_cast<size_t>(best)]) best = i;
        ++sizes[static_cast<size_t>(best)];
        frac[static_cast<size_t>(best)] = -1.0;
        ++assigned;
    }
    // train must divide into three equal thirds; leftover goes to test
    const int64_t snap = sizes[0] % 3;
    sizes[0] -= snap;
    sizes[2] += snap;
    if (sizes[0] < 3 || sizes[1] < 1 || sizes[2] < 1)
        throw std::runtime_error("make_splits: a split came out empty at n=" +
                                 std::to_string(n_games));

    Splits s;
    s.train = {0, sizes[0]};
    s.validation = {sizes[0], sizes[0] + sizes[1]};
    s.test = {sizes[0] + sizes[1], n_games};
    const int64_t third = sizes[0] / 3;
    for (int i = 0; i < 3; ++i)
        s.thirds[static_cast<size_t>(i)] = {i * third, (i + 1) * third};
    return s;
}

// ---------------------------------------------------------------- datasets

Dataset generate_shapeworld(int64_t n_games, const std::array<double, 3>& ratios,
                            const WorldConfig& cfg, uint64_t seed) {
    Dataset ds;
    ds.kind = GameKind::shapeworld;
    ds.image_size = cfg.image_size;
    ds.seed = seed;
    ds.vocab = Vocabulary::shapeworld();
    ds.splits = make_splits(n_games, ratios);
    Rng root(seed);
    const std::vector<double> mix(cfg.context_mix.begin(), cfg.context_mix.end());
    ds.games.reserve(static_cast<size_t>(n_games));
    for (int64_t i = 0; i < n_games; ++i) {
        Rng g = root.split(static_cast<uint64_t>(i));
        const auto ctx = static_cast<ContextType>(g.categorical(mix));
        ds.games.push_back(sample_game(g, ctx, cfg));
    }
    return ds;
}

const std::vector<std::pair<Color, Shape>>& Holdout::combo_list() {
    static const std::vector<std::pair<Color, Shape>> combos = {
        {Color::red, Shape::circle},
        {Color::blue, Shape::square},
        {Color::yellow, Shape::ellipse},
        {Color::white, Shape::circle},
        {Color::gray, Shape::square},
    };
    return combos;
}

bool Holdout::excludes(Color c, Shape s) const {
    switch (kind) {
        case Kind::color: return c == color;
        case Kind::shape: return s == shape;
        case Kind::combos:
            for (const auto& [hc, hs] : combo_list())
                if (c == hc && s == hs) return true;
            return false;
    }
    return false;
}

Holdout parse_holdout(const std::string& s) {
    Holdout h;
    if (s == "combos") {
        h.kind = Holdout::Kind::combos;
        return h;
    }
    for (int i = 0; i < kNumColors; ++i)
        if (s == kColorNames[i]) {
            h.kind = Holdout::Kind::color;
            h.color = static_cast<Color>(i);
            return h;
        }
    for (int i = 0; i < kNumShapes; ++i)
        if (s == kShapeNames[i]) {
            h.kind = Holdout::Kind::shape;
            h.shape = static_cast<Shape>(i);
            return h;
        }
    throw std::runtime_error("unknown holdout '" + s + "' (want a color, a shape, or 'combos')");
}

Dataset make_heldout_dataset(const Holdout& holdout, int64_t n_train, int64_t n_test,
                             const std::array<double, 3>& train_ratios, const WorldConfig& cfg,
                             uint64_t seed) {
    Dataset ds;
    ds.kind = GameKind::shapeworld;
    ds.image_size = cfg.image_size;
    ds.seed = seed;
    ds.vocab = Vocabulary::shapeworld();

    // train/validation carved out of the first n_train games, all exclusion-
    // clean; the test block holds the held-out targets
    const double tsum = train_ratios[0] + train_ratios[1];
    const int64_t train_sz = static_cast<int64_t>(std::floor(n_train * train_ratios[0] / tsum));
    const int64_t train_snapped = train_sz - train_sz % 3;
    ds.splits.train = {0, train_snapped};
    ds.splits.validation = {train_snapped, n_train};
    ds.splits.test = {n_train, n_train + n_test};
    const int64_t third = train_snapped / 3;
    for (int i = 0; i < 3; ++i)
        ds.splits.thirds[static_cast<size_t>(i)] = {i * third, (i + 1) * third};
    if (third < 1 || n_train - train_snapped < 1 || n_test < 1)
        throw std::runtime_error("make_heldout_dataset: splits came out empty");

    Rng root(seed);
    const std::vector<double> mix(cfg.context_mix.begin(), cfg.context_mix.end());
    ds.games.reserve(static_cast<size_t>(n_train + n_test));
    for (int64_t i = 0; i < n_train + n_test; ++i) {
        Rng g = root.split(static_cast<uint64_t>(i));
        const bool want_heldout = i >= n_train;
        ReferenceGame game;
        int tries = 0;
        for (;;) {
            const auto ctx = static_cast<ContextType>(g.categorical(mix));
            game = sample_game(g, ctx, cfg);
            const auto& t = game.specs[static_cast<size_t>(game.target)];
            if (holdout.excludes(t.color, t.shape) == want_heldout) break;
            if (++tries > cfg.retry_cap)
                throw std::runtime_error("make_heldout_dataset: retry cap exceeded; holdout "
                                         "leaves no admissible games");
        }
        ds.games.push_back(std::move(game));
    }
    return ds;
}

// ---------------------------------------------------------------- colors corpus

Dataset ingest_colors(const std::string& path, int min_freq, const std::array<double, 3>& ratios,
                      int image_size) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("ingest_colors: cannot open '" + path + "'");

    Dataset ds;
    ds.kind = GameKind::colors;
    ds.image_size = image_size;

    std::string line;
    int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw std::runtime_error("ingest_colors: line " + std::to_string(line_no) +
                                     ": malformed record: " + e.what());
        }
        try {
            ReferenceGame g;
            g.kind = GameKind::colors;
            const auto& rgb = rec.at("rgb");
            if (!rgb.is_array() || rgb.size() != 3)
                throw std::runtime_error("'rgb' must hold three triples");
            for (size_t i = 0; i < 3; ++i) {
                if (!rgb[i].is_array() || rgb[i].size() != 3)
                    throw std::runtime_error("'rgb' must hold three triples");
                for (size_t c = 0; c < 3; ++c) {
                    const int v = rgb[i][c].get<int>();
                    if (v < 0 || v > 255) throw std::runtime_error("rgb channel outside 0-255");
                    g.rgb[i][c] = static_cast<float>(v) / 255.0f;
                }
            }
            g.target = rec.at("target").get<int>();
            if (g.target < 0 || g.target > 2) throw std::runtime_error("target outside 0-2");
            g.condition = parse_condition(rec.at("condition").get<std::string>());
            std::string text = rec.at("text").get<std::string>();
            for (auto& ch : text) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
            std::string tok;
            for (char ch : text) {
                if (std::isspace(static_cast<unsigned char>(ch))) {
                    if (!tok.empty()) g.gold.push_back(tok);
                    tok.clear();
                } else {
                    tok.push_back(ch);
                }
            }
            if (!tok.empty()) g.gold.push_back(tok);
            if (g.gold.empty()) throw std::runtime_error("empty utterance");
            ds.games.push_back(std::move(g));
        } catch (const std::exception& e) {
            throw std::runtime_error("ingest_colors: line " + std::to_string(line_no) + ": " +
                                     e.what());
        }
    }
    if (ds.games.empty()) throw std::runtime_error("ingest_colors: no records in '" + path + "'");

    ds.splits = make_splits(static_cast<int64_t>(ds.games.size()), ratios);

    // vocabulary from the train split, thresholded
    std::unordered_map<std::string, int64_t> counts;
    for (int64_t i = ds.splits.train.first; i < ds.splits.train.second; ++i)
        for (const auto& t : ds.games[static_cast<size_t>(i)].gold) ++counts[t];
    std::vector<std::string> content;
    for (const auto& [tok, n] : counts)
        if (n >= min_freq) content.push_back(tok);
    std::sort(content.begin(), content.end());
    ds.vocab = Vocabulary::from_content(content);
    return ds;
}

// ---------------------------------------------------------------- dataset files

namespace {

json splits_to_json(const Splits& s) {
    json j;
    j["train"] = {s.train.first, s.train.second};
    j["validation"] = {s.validation.first, s.validation.second};
    j["test"] = {s.test.first, s.test.second};
    j["thirds"] = json::array();
    for (const auto& t : s.thirds) j["thirds"].push_back({t.first, t.second});
    return j;
}

Splits splits_from_json(const json& j) {
    Splits s;
    s.train = {j.at("train")[0].get<int64_t>(), j.at("train")[1].get<int64_t>()};
    s.validation = {j.at("validation")[0].get<int64_t>(), j.at("validation")[1].get<int64_t>()};
    s.test = {j.at("test")[0].get<int64_t>(), j.at("test")[1].get<int64_t>()};
    for (size_t i = 0; i < 3; ++i)
        s.thirds[i] = {j.at("thirds")[i][0].get<int64_t>(), j.at("thirds")[i][1].get<int64_t>()};
    return s;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
    json manifest;
    manifest["kind"] = ds.kind == GameKind::shapeworld ? "shapeworld" : "colors";
    manifest["image_size"] = ds.image_size;
    manifest["seed"] = ds.seed;
    manifest["count"] = ds.games.size();
    manifest["vocab"] = ds.vocab.tokens;
    manifest["splits"] = splits_to_json(ds.splits);
    {
        std::ofstream out(dir + "/manifest.json");
        if (!out) throw std::runtime_error("save_dataset: cannot write to '" + dir + "'");
        out << manifest.dump(2) << "\n";
    }
    std::ofstream out(dir + "/games.ndjson");
    if (!out) throw std::runtime_error("save_dataset: cannot write to '" + dir + "'");
    for (const auto& g : ds.games) {
        json j;
        if (g.kind == GameKind::shapeworld) {
            j["images"] = json::array();
            for (const auto& sp : g.specs)
                j["images"].push_back({{"color", color_name(sp.color)},
                                       {"shape", shape_name(sp.shape)},
                                       {"x", sp.x},
                                       {"y", sp.y},
                                       {"size", sp.size}});
            j["context"] = context_name(g.context);
        } else {
            j["rgb"] = json::array();
            for (const auto& px : g.rgb) {
                j["rgb"].push_back({static_cast<int>(std::lround(px[0] * 255.0f)),
                                    static_cast<int>(std::lround(px[1] * 255.0f)),
                                    static_cast<int>(std::lround(px[2] * 255.0f))});
            }
            j["condition"] = condition_name(g.condition);
        }
        j["target"] = g.target;
        j["gold"] = g.gold;
        out << j.dump() << "\n";
    }
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream min(dir + "/manifest.json");
    if (!min) throw std::runtime_error("load_dataset: cannot open '" + dir + "/manifest.json'");
    json manifest = json::parse(min);

    Dataset ds;
    const std::string kind = manifest.at("kind").get<std::string>();
    if (kind == "shapeworld") ds.kind = GameKind::shapeworld;
    else if (kind == "colors") ds.kind = GameKind::colors;
    else throw std::runtime_error("load_dataset: unknown kind '" + kind + "'");
    ds.image_size = manifest.at("image_size").get<int>();
    ds.seed = manifest.at("seed").get<uint64_t>();
    std::vector<std::string> toks = manifest.at("vocab").get<std::vector<std::string>>();
    if (toks.size() < 3 || toks[0] != "<s>" || toks[1] != "</s>" || toks[2] != "<UNK>")
        throw std::runtime_error("load_dataset: manifest vocabulary lacks sentinels");
    ds.vocab = Vocabulary::from_content({toks.begin() + 3, toks.end()});
    ds.splits = splits_from_json(manifest.at("splits"));

    std::ifstream in(dir + "/games.ndjson");
    if (!in) throw std::runtime_error("load_dataset: cannot open '" + dir + "/games.ndjson'");
    std::string line;
    int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw std::runtime_error("load_dataset: games.ndjson line " + std::to_string(line_no) +
                                     ": " + e.what());
        }
        ReferenceGame g;
        g.kind = ds.kind;
        if (ds.kind == GameKind::shapeworld) {
            const auto& imgs = j.at("images");
            for (size_t i = 0; i < 3; ++i) {
                auto& sp = g.specs[i];
                sp.color = parse_color(imgs[i].at("color").get<std::string>());
                sp.shape = parse_shape(imgs[i].at("shape").get<std::string>());
                sp.x = imgs[i].at("x").get<int>();
                sp.y = imgs[i].at("y").get<int>();
                sp.size = imgs[i].at("size").get<int>();
            }
            g.context = parse_context(j.at("context").get<std::string>());
        } else {
            const auto& rgb = j.at("rgb");
            for (size_t i = 0; i < 3; ++i)
                for (size_t c = 0; c < 3; ++c)
                    g.rgb[i][c] = static_cast<float>(rgb[i][c].get<int>()) / 255.0f;
            g.condition = parse_condition(j.at("condition").get<std::string>());
        }
        g.target = j.at("target").get<int>();
        g.gold = j.at("gold").get<std::vector<std::string>>();
        ds.games.push_back(std::move(g));
    }
    if (ds.games.size() != manifest.at("count").get<size_t>())
        throw std::runtime_error("load_dataset: game count does not match the manifest");
    return ds;
}

// ---------------------------------------------------------------- render cache file

namespace {

constexpr char kCacheMagic[4] = {'R', 'G', 'R', 'C'};
constexpr uint32_t kCacheVersion = 1;

template <class T>
void put(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::ifstream& in, const char* what) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw std::runtime_error(std::string("render cache: truncated while reading ") + what);
    return v;
}

}  // namespace

void save_render_cache(const std::string& path, const std::vector<TensorPtr>& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("render cache: cannot write '" + path + "'");
    out.write(kCacheMagic, 4);
    put(out, kCacheVersion);
    put(out, static_cast<uint64_t>(tensors.size()));
    for (const auto& t : tensors) {
        if (t->dtype != ad::Dtype::F32)
            throw std::runtime_error("render cache: only 32-bit float tensors are stored");
        put(out, static_cast<uint32_t>(t->shape.size()));
        for (int64_t d : t->shape) put(out, static_cast<uint64_t>(d));
        out.write(reinterpret_cast<const char*>(t->data<float>()),
                  static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(t->numel())));
    }
    if (!out) throw std::runtime_error("render cache: write failed for '" + path + "'");
}

std::vector<TensorPtr> load_render_cache(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("render cache: cannot open '" + path + "'");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kCacheMagic, 4) != 0)
        throw std::runtime_error("render cache: '" + path + "' is not a render cache file");
    const auto version = take<uint32_t>(in, "version");
    if (version != kCacheVersion)
        throw std::runtime_error("render cache: unsupported version " + std::to_string(version));
    const auto count = take<uint64_t>(in, "count");
    std::vector<TensorPtr> out;
    out.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        const auto rank = take<uint32_t>(in, "rank");
        std::vector<int64_t> shape;
        for (uint32_t d = 0; d < rank; ++d)
            shape.push_back(static_cast<int64_t>(take<uint64_t>(in, "dims")));
        auto t = ad::make_tensor(shape, ad::Dtype::F32, false);
        in.read(reinterpret_cast<char*>(t->data<float>()),
                static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(t->numel())));
        if (!in) throw std::runtime_error("render cache: truncated tensor data in '" + path + "'");
        out.push_back(std::move(t));
    }
    return out;
}

const TensorPtr& RenderCache::game_images(int64_t idx) {
    auto& slot = cache_[static_cast<size_t>(idx)];
    if (!slot) slot = render_game(ds_->games[static_cast<size_t>(idx)], ds_->image_size);
    return slot;
}

}  // namespace refgame::world
