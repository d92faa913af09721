#include "refgame/harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace refgame::harness {

namespace {

using nlohmann::json;

// seed-derivation tags, one per independent random stream
constexpr uint64_t kTagInternal = 0x11, kTagInternalRng = 0x12;
constexpr uint64_t kTagValidation = 0x21, kTagValidationRng = 0x22;
constexpr uint64_t kTagEval = 0x31;
constexpr uint64_t kTagCore = 0x41, kTagCoreRng = 0x42;
constexpr uint64_t kTagLm = 0x91, kTagLmRng = 0x92;
constexpr uint64_t kTagGenerate = 0xa1, kTagSpeed = 0xa3, kTagGold = 0xa5, kTagRandom = 0xa6;

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
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

}  // namespace

// ---------------------------------------------------------------------- plan

ExperimentPlan ExperimentPlan::defaults_for(world::GameKind kind) {
    ExperimentPlan plan;
    if (kind == world::GameKind::colors) {
        plan.n_eval_listeners = 1;
        plan.speed_second_set = false;  // no enumeration closure for the colors corpus
    }
    return plan;
}

// ----------------------------------------------------------------- game sets

const world::ReferenceGame& GameSet::game(int64_t pos) const {
    return ds->games[static_cast<size_t>(idx[static_cast<size_t>(pos)])];
}

const TensorPtr& GameSet::images(int64_t pos) const {
    return cache->game_images(idx[static_cast<size_t>(pos)]);
}

std::vector<int64_t> range_indices(std::pair<int64_t, int64_t> r) {
    std::vector<int64_t> out;
    out.reserve(static_cast<size_t>(std::max<int64_t>(0, r.second - r.first)));
    for (int64_t i = r.first; i < r.second; ++i) out.push_back(i);
    return out;
}

GameSet test_set(const world::Dataset& ds, world::RenderCache& cache) {
    return GameSet{&ds, &cache, range_indices(ds.splits.test)};
}

// ----------------------------------------------------------------- efficacy

std::vector<agents::Utterance> generate_utterances(const SpeakFn& speak, const GameSet& set,
                                                   uint64_t seed) {
    if (set.size() == 0) throw std::invalid_argument("harness: empty game set");
    Rng root(seed);
    std::vector<agents::Utterance> out;
    out.reserve(static_cast<size_t>(set.size()));
    for (int64_t pos = 0; pos < set.size(); ++pos) {
        Rng g = root.split(static_cast<uint64_t>(pos));
        out.push_back(speak(pos, set.images(pos), set.game(pos), g));
    }
    return out;
}

std::vector<agents::Utterance> generate_utterances(agents::Speaker& sp, const GameSet& set,
                                                   uint64_t seed) {
    return generate_utterances(
        [&sp](int64_t, const TensorPtr& images, const world::ReferenceGame& game, Rng& rng) {
            return sp.speak(images, game.target, &rng);
        },
        set, seed);
}

SpeakFn gold_replay_speaker(const world::Vocabulary& vocab) {
    return [vocab](int64_t, const TensorPtr&, const world::ReferenceGame& game, Rng&) {
        return agents::Utterance{vocab.encode(game.gold), false};
    };
}

SpeakFn random_token_speaker(const world::Vocabulary& vocab) {
    const int64_t content = vocab.size() - 3;
    return [content](int64_t, const TensorPtr&, const world::ReferenceGame&, Rng& rng) {
        agents::Utterance u;
        const int len = 1 + static_cast<int>(rng.below(2));
        for (int i = 0; i < len; ++i)
            u.ids.push_back(3 + static_cast<int64_t>(rng.below(static_cast<uint64_t>(content))));
        return u;
    };
}

std::vector<JudgeFn> listener_judges(
    const std::vector<std::shared_ptr<agents::LiteralListener>>& listeners) {
    std::vector<JudgeFn> out;
    out.reserve(listeners.size());
    for (const auto& L : listeners) {
        if (!L) throw std::invalid_argument("harness: null listener");
        // image encodings cached by game position; judges are only valid for
        // the game set they are first used on
        auto feats = std::make_shared<std::unordered_map<int64_t, TensorPtr>>();
        out.push_back([L, feats](int64_t pos, const TensorPtr& images, const agents::Utterance& u) {
            auto it = feats->find(pos);
            if (it == feats->end()) it = feats->emplace(pos, L->encode_images_eval(images)).first;
            const auto p = L->prob_cached(it->second, u);
            int best = 0;
            for (int i = 1; i < 3; ++i)
                if (p[static_cast<size_t>(i)] > p[static_cast<size_t>(best)]) best = i;
            return best;
        });
    }
    return out;
}

std::pair<double, double> binomial_ci95(double p_hat, int64_t n) {
    if (n <= 0) throw std::invalid_argument("harness: CI needs a positive sample size");
    const double half = 1.96 * std::sqrt(p_hat * (1.0 - p_hat) / static_cast<double>(n));
    return {std::max(0.0, p_hat - half), std::min(1.0, p_hat + half)};
}

EfficacyResult judge_utterances(const std::vector<agents::Utterance>& utts,
                                const std::vector<JudgeFn>& judges, const GameSet& set) {
    if (static_cast<int64_t>(utts.size()) != set.size())
        throw std::invalid_argument("harness: " + std::to_string(utts.size()) +
                                    " utterances for " + std::to_string(set.size()) + " games");
    if (judges.empty()) throw std::invalid_argument("harness: no judges");
    int64_t hits = 0;
    for (int64_t pos = 0; pos < set.size(); ++pos) {
        if (utts[static_cast<size_t>(pos)].ids.empty()) continue;  // empty decode: miss
        const int target = set.game(pos).target;
        for (const auto& judge : judges)
            if (judge(pos, set.images(pos), utts[static_cast<size_t>(pos)]) == target) ++hits;
    }
    EfficacyResult r;
    r.n_games = set.size();
    r.n_listeners = static_cast<int>(judges.size());
    r.accuracy = static_cast<double>(hits) /
                 (static_cast<double>(r.n_games) * static_cast<double>(judges.size()));
    std::tie(r.ci_low, r.ci_high) = binomial_ci95(r.accuracy, r.n_games);
    return r;
}

EfficacyResult eval_efficacy(agents::Speaker& sp,
                             const std::vector<std::shared_ptr<agents::LiteralListener>>& listeners,
                             const GameSet& set, uint64_t seed) {
    const auto utts = generate_utterances(sp, set, seed);
    const auto judges = listener_judges(listeners);
    return judge_utterances(utts, judges, set);
}

// ---------------------------------------------------------------- concision

TokenBreakdown classify_tokens(const world::Vocabulary& vocab, const std::vector<int64_t>& ids) {
    TokenBreakdown b;
    for (int64_t id : ids) {
        if (world::is_color_token(vocab, id))
            ++b.colors;
        else if (world::is_shape_token(vocab, id))
            ++b.shapes;
        else
            ++b.other;
    }
    return b;
}

ConcisionResult concision_from_utterances(const std::vector<agents::Utterance>& utts,
                                          const GameSet& set) {
    if (static_cast<int64_t>(utts.size()) != set.size())
        throw std::invalid_argument("harness: " + std::to_string(utts.size()) +
                                    " utterances for " + std::to_string(set.size()) + " games");
    const world::ContextType kinds[3] = {world::ContextType::shape_sufficient,
                                         world::ContextType::color_sufficient,
                                         world::ContextType::both_needed};
    ConcisionResult r;
    r.n_games = set.size();
    r.rows.resize(3);
    std::array<TokenBreakdown, 3> sums{};
    for (int i = 0; i < 3; ++i) r.rows[static_cast<size_t>(i)].context = kinds[i];
    for (int64_t pos = 0; pos < set.size(); ++pos) {
        const auto& game = set.game(pos);
        size_t row = 0;
        while (kinds[row] != game.context) ++row;
        const auto b = classify_tokens(set.ds->vocab, utts[static_cast<size_t>(pos)].ids);
        auto& out = r.rows[row];
        out.n_games += 1;
        out.lengths.push_back(static_cast<double>(b.total()));
        sums[row].colors += b.colors;
        sums[row].shapes += b.shapes;
        sums[row].other += b.other;
    }
    for (size_t row = 0; row < 3; ++row) {
        auto& out = r.rows[row];
        if (out.n_games == 0) continue;
        const double n = static_cast<double>(out.n_games);
        out.mean_colors = static_cast<double>(sums[row].colors) / n;
        out.mean_shapes = static_cast<double>(sums[row].shapes) / n;
        out.mean_other = static_cast<double>(sums[row].other) / n;
        double total = 0.0;
        for (double len : out.lengths) total += len;
        out.mean_length = total / n;
    }
    return r;
}

ConcisionResult eval_concision(agents::Speaker& sp, const GameSet& set, uint64_t seed) {
    return concision_from_utterances(generate_utterances(sp, set, seed), set);
}

WelchResult welch_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    WelchResult r;
    if (a.size() < 2 || b.size() < 2) return r;  // too small to test: t=0, p=1
    auto moments = [](const std::vector<double>& xs) {
        double m = 0.0;
        for (double x : xs) m += x;
        m /= static_cast<double>(xs.size());
        double v = 0.0;
        for (double x : xs) v += (x - m) * (x - m);
        v /= static_cast<double>(xs.size() - 1);
        return std::pair<double, double>(m, v);
    };
    const auto [m1, v1] = moments(a);
    const auto [m2, v2] = moments(b);
    const double n1 = static_cast<double>(a.size()), n2 = static_cast<double>(b.size());
    const double se2 = v1 / n1 + v2 / n2;
    if (se2 <= 0.0) return r;  // both groups constant
    r.t = (m1 - m2) / std::sqrt(se2);
    r.df = se2 * se2 / ((v1 / n1) * (v1 / n1) / (n1 - 1.0) + (v2 / n2) * (v2 / n2) / (n2 - 1.0));
    r.p_value = std::erfc(std::abs(r.t) / std::sqrt(2.0));  // normal approximation
    return r;
}

ConcisionComparison compare_concision(const ConcisionResult& r) {
    ConcisionComparison c;
    std::vector<double> both, single;
    for (const auto& row : r.rows) {
        auto& dst = row.context == world::ContextType::both_needed ? both : single;
        dst.insert(dst.end(), row.lengths.begin(), row.lengths.end());
    }
    c.n_both = static_cast<int64_t>(both.size());
    c.n_single = static_cast<int64_t>(single.size());
    auto mean = [](const std::vector<double>& xs) {
        if (xs.empty()) return 0.0;
        double m = 0.0;
        for (double x : xs) m += x;
        return m / static_cast<double>(xs.size());
    };
    c.mean_both = mean(both);
    c.mean_single = mean(single);
    c.difference = c.mean_both - c.mean_single;
    c.welch = welch_t_test(both, single);
    c.significant = c.welch.p_value < 0.05;
    return c;
}

// ------------------------------------------------------------ language model

LanguageModel::LanguageModel(const world::Vocabulary& vocab, int64_t hidden, int64_t embed_dim,
                             uint64_t seed)
    : vocab(vocab), hidden(hidden) {
    Rng rng(seed);
    emb = nn::Embedding(vocab.size(), embed_dim, rng);
    gru = nn::GruCell(embed_dim, hidden, rng);
    out = nn::Linear(hidden, vocab.size(), rng);
}

nn::ParamList LanguageModel::params(const std::string& prefix) const {
    nn::ParamList ps;
    emb.params(ps, prefix + ".emb");
    gru.params(ps, prefix + ".gru");
    out.params(ps, prefix + ".out");
    return ps;
}

TensorPtr LanguageModel::batch_nll(const std::vector<std::vector<int64_t>>& batch) {
    const int64_t b = static_cast<int64_t>(batch.size());
    if (b == 0) throw std::invalid_argument("language model: empty batch");
    const int64_t v = vocab.size();
    size_t max_len = 0;
    int64_t total_tokens = 0;
    for (const auto& seq : batch) {
        for (int64_t id : seq)
            if (id < 0 || id >= v)
                throw std::out_of_range("language model: token id " + std::to_string(id) +
                                        " outside vocabulary (size " + std::to_string(v) + ")");
        max_len = std::max(max_len, seq.size());
        total_tokens += static_cast<int64_t>(seq.size()) + 1;  // + terminator
    }
    TensorPtr h = gru.zero_state(b);
    std::vector<int64_t> prev(static_cast<size_t>(b), vocab.bos);
    TensorPtr acc;
    for (size_t t = 0; t <= max_len; ++t) {
        TensorPtr x = emb.lookup(prev);
        h = gru.step(h, x);
        TensorPtr lp = ad::log_softmax(out.forward(h));  // (B, V)
        std::vector<double> sel(static_cast<size_t>(b * v), 0.0);
        for (int64_t r = 0; r < b; ++r) {
            const auto& seq = batch[static_cast<size_t>(r)];
            if (t < seq.size())
                sel[static_cast<size_t>(r * v + seq[t])] = 1.0;
            else if (t == seq.size())
                sel[static_cast<size_t>(r * v + vocab.eos)] = 1.0;
            prev[static_cast<size_t>(r)] = t < seq.size() ? seq[t] : vocab.eos;
        }
        TensorPtr term = ad::sum(ad::mul(lp, ad::constant({b, v}, sel)));
        acc = acc ? ad::add(acc, term) : term;
    }
    return ad::affine(acc, -1.0 / static_cast<double>(total_tokens), 0.0);
}

std::vector<double> LanguageModel::token_logprobs(const std::vector<int64_t>& ids) {
    const int64_t v = vocab.size();
    for (int64_t id : ids)
        if (id < 0 || id >= v)
            throw std::out_of_range("language model: token id " + std::to_string(id) +
                                    " outside vocabulary (size " + std::to_string(v) + ")");
    ad::NoGradGuard ng;
    TensorPtr h = gru.zero_state(1);
    int64_t prev = vocab.bos;
    std::vector<double> out_lp;
    out_lp.reserve(ids.size());
    for (int64_t id : ids) {
        h = gru.step(h, emb.lookup({prev}));
        TensorPtr lp = ad::log_softmax(out.forward(h));
        out_lp.push_back(lp->read(id));
        prev = id;
    }
    return out_lp;
}

double LanguageModel::per_word_probability(const std::vector<int64_t>& ids) {
    if (ids.empty()) return 0.0;
    const auto lps = token_logprobs(ids);
    double mean = 0.0;
    for (double lp : lps) mean += lp;
    mean /= static_cast<double>(lps.size());
    return std::exp(mean);
}

TrainStats train_unconditional_lm(LanguageModel& lm,
                                  const std::vector<std::vector<int64_t>>& corpus, double lr,
                                  int max_epochs, int batch, Rng& rng) {
    if (corpus.empty()) throw std::invalid_argument("language model: empty corpus");
    if (batch <= 0 || max_epochs <= 0)
        throw std::invalid_argument("language model: batch and epochs must be positive");
    nn::Adam adam(lm.params("lm"), lr);
    std::vector<int64_t> order(corpus.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);

    TrainStats stats;
    for (int epoch = 0; epoch < max_epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        int64_t seen = 0;
        for (size_t at = 0; at < order.size(); at += static_cast<size_t>(batch)) {
            std::vector<std::vector<int64_t>> chunk;
            for (size_t i = at; i < std::min(order.size(), at + static_cast<size_t>(batch)); ++i)
                chunk.push_back(corpus[static_cast<size_t>(order[i])]);
            TensorPtr loss = lm.batch_nll(chunk);
            const double value = loss->item();
            if (!std::isfinite(value))
                throw std::runtime_error("language model training diverged (non-finite loss)");
            ad::backward(loss);
            adam.step();
            adam.zero_grad();
            epoch_loss += value * static_cast<double>(chunk.size());
            seen += static_cast<int64_t>(chunk.size());
        }
        epoch_loss /= static_cast<double>(seen);
        stats.train_loss_history.push_back(epoch_loss);
        stats.final_train_loss = epoch_loss;
        stats.epochs_run = epoch + 1;
        if (epoch_loss < 1e-3) break;  // memorized; nothing left to fit
    }
    return stats;
}

// ----------------------------------------------------------- conventionality

ConventionalityResult conventionality_from_utterances(const std::vector<agents::Utterance>& utts,
                                                      LanguageModel& lm) {
    ConventionalityResult r;
    r.n_games = static_cast<int64_t>(utts.size());
    if (r.n_games == 0) throw std::invalid_argument("harness: no utterances to score");
    double total = 0.0;
    for (const auto& u : utts) total += lm.per_word_probability(u.ids);  // empty scores 0
    r.per_word_probability = total / static_cast<double>(r.n_games);
    return r;
}

ConventionalityResult eval_conventionality(agents::Speaker& sp, LanguageModel& lm,
                                           const GameSet& set, uint64_t seed) {
    if (set.ds->kind != world::GameKind::colors)
        throw std::invalid_argument(
            "conventionality needs the colors corpus: template-generated utterances make the "
            "corpus language model degenerate, so the score is only meaningful for "
            "human-produced language");
    return conventionality_from_utterances(generate_utterances(sp, set, seed), lm);
}

// --------------------------------------------------------------------- speed

SpeedResult eval_speed(agents::Speaker& sp, const GameSet& set, int n, int warmup,
                       uint64_t seed) {
    if (set.size() == 0) throw std::invalid_argument("harness: empty game set");
    if (n <= 0 || warmup < 0)
        throw std::invalid_argument("harness: speed eval needs n > 0 and warmup >= 0");
    const int total = n + warmup;
    // touch every render up front so only generation lands inside the timers
    for (int i = 0; i < std::min<int64_t>(total, set.size()); ++i) set.images(i);

    Rng rng(seed);
    SpeedResult r;
    r.n_games = n;
    r.utterance_set_size = sp.variant == agents::Variant::rsa_full
                               ? static_cast<int64_t>(sp.utterance_set.size())
                               : 0;
    std::vector<double> seconds;
    seconds.reserve(static_cast<size_t>(n));
    for (int i = 0; i < total; ++i) {
        const int64_t pos = i % set.size();
        const TensorPtr& images = set.images(pos);
        const int target = set.game(pos).target;
        const auto t0 = std::chrono::steady_clock::now();
        sp.speak(images, target, &rng);
        const auto t1 = std::chrono::steady_clock::now();
        if (i >= warmup) seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    double m = 0.0;
    for (double s : seconds) m += s;
    m /= static_cast<double>(seconds.size());
    double var = 0.0;
    for (double s : seconds) var += (s - m) * (s - m);
    r.mean_seconds = m;
    r.sd_seconds = seconds.size() > 1
                       ? std::sqrt(var / static_cast<double>(seconds.size() - 1))
                       : 0.0;
    return r;
}

// ------------------------------------------------------------------ protocol

namespace {

bool wants(const ExperimentPlan& plan, agents::Variant v) {
    return std::find(plan.variants.begin(), plan.variants.end(), v) != plan.variants.end();
}

// distinct training gold utterances, the candidate pool for corpus-based
// full RSA (the colors corpus has no enumeration grammar)
std::vector<agents::Utterance> corpus_utterance_set(const world::Dataset& ds,
                                                    const std::vector<int64_t>& idx) {
    std::vector<std::vector<int64_t>> seqs;
    for (int64_t i : idx) {
        auto ids = ds.vocab.encode(ds.games[static_cast<size_t>(i)].gold);
        if (!ids.empty()) seqs.push_back(std::move(ids));
    }
    std::sort(seqs.begin(), seqs.end(), agents::lex_less);
    seqs.erase(std::unique(seqs.begin(), seqs.end()), seqs.end());
    if (seqs.empty()) throw std::runtime_error("protocol: no usable gold utterances");
    std::vector<agents::Utterance> out;
    out.reserve(seqs.size());
    for (auto& s : seqs) out.push_back(agents::Utterance{std::move(s), false});
    return out;
}

}  // namespace

EvalReport run_protocol(const ExperimentPlan& plan, const world::Dataset& ds,
                        world::RenderCache& cache, ProtocolArtifacts& art) {
    if (plan.variants.empty()) throw std::invalid_argument("protocol: no speaker variants");
    if (plan.n_eval_listeners <= 0)
        throw std::invalid_argument("protocol: need at least one evaluation listener");
    for (int k = 0; k < 3; ++k)
        art.thirds[static_cast<size_t>(k)] = range_indices(ds.splits.thirds[static_cast<size_t>(k)]);
    for (const auto& third : art.thirds)
        if (third.empty()) throw std::invalid_argument("protocol: dataset has an empty third");
    const std::vector<int64_t> val_idx = range_indices(ds.splits.validation);
    if (val_idx.empty()) throw std::invalid_argument("protocol: dataset has no validation split");

    auto stage = [&art](const std::string& name, auto&& fn) {
        try {
            fn();
        } catch (const std::exception& e) {
            throw std::runtime_error("protocol stage '" + name + "' failed: " + e.what());
        }
        art.completed_stages.push_back(name);
    };

    agents::ListenerConfig lcfg;
    lcfg.image_size = ds.image_size;
    lcfg.max_epochs = plan.max_epochs;
    lcfg.batch = plan.batch;
    lcfg.patience = plan.patience;

    const bool need_internal = wants(plan, agents::Variant::rsa_full) ||
                               wants(plan, agents::Variant::rsa_srr) ||
                               wants(plan, agents::Variant::amortized) ||
                               wants(plan, agents::Variant::rl);
    const bool need_s0 = wants(plan, agents::Variant::s0) || wants(plan, agents::Variant::rsa_srr);

    if (need_internal)
        stage("internal-listener", [&] {
            art.internal_listener = std::make_shared<agents::LiteralListener>(
                ds.vocab, lcfg, mix_seed(plan.seed, kTagInternal));
            agents::ListenerTrainData data{&ds, &cache, art.thirds[0], val_idx, {}};
            Rng rng(mix_seed(plan.seed, kTagInternalRng));
            art.training["internal-listener"] = train_listener(*art.internal_listener, data, rng);
            art.internal_listener->freeze();
        });

    stage("validation-listener", [&] {
        art.validation_listener = std::make_shared<agents::LiteralListener>(
            ds.vocab, lcfg, mix_seed(plan.seed, kTagValidation));
        agents::ListenerTrainData data{&ds, &cache, art.thirds[1], val_idx, {}};
        Rng rng(mix_seed(plan.seed, kTagValidationRng));
        art.training["validation-listener"] = train_listener(*art.validation_listener, data, rng);
    });

    stage("evaluation-listeners", [&] {
        for (int i = 0; i < plan.n_eval_listeners; ++i) {
            auto L = std::make_shared<agents::LiteralListener>(
                ds.vocab, lcfg, mix_seed(plan.seed, kTagEval + 2 * static_cast<uint64_t>(i)));
            agents::ListenerTrainData data{&ds, &cache, art.thirds[2], val_idx, {}};
            Rng rng(mix_seed(plan.seed, kTagEval + 2 * static_cast<uint64_t>(i) + 1));
            art.training["evaluation-listener-" + std::to_string(i)] =
                train_listener(*L, data, rng);
            art.eval_listeners.push_back(std::move(L));
        }
    });

    auto core_config = [&](bool contextual) {
        agents::SpeakerConfig scfg;
        scfg.contextual = contextual;
        scfg.image_size = ds.image_size;
        scfg.max_len = ds.kind == world::GameKind::colors ? 20 : 4;
        scfg.max_epochs = plan.max_epochs;
        scfg.batch = plan.batch;
        scfg.patience = plan.patience;
        return scfg;
    };
    auto core_seed = [&](agents::Variant v, uint64_t tag) {
        return mix_seed(mix_seed(plan.seed, tag), static_cast<uint64_t>(v));
    };

    if (need_s0)
        stage("s0", [&] {
            auto core = std::make_shared<agents::SpeakerCore>(
                ds.vocab, core_config(false), core_seed(agents::Variant::s0, kTagCore));
            Rng rng(core_seed(agents::Variant::s0, kTagCoreRng));
            art.training["s0"] = agents::train_captioner(*core, ds, cache, art.thirds[0], val_idx,
                                                         *art.validation_listener, rng);
            art.cores["s0"] = std::move(core);
        });

    if (wants(plan, agents::Variant::s0ctx))
        stage("s0-ctx", [&] {
            auto core = std::make_shared<agents::SpeakerCore>(
                ds.vocab, core_config(true), core_seed(agents::Variant::s0ctx, kTagCore));
            Rng rng(core_seed(agents::Variant::s0ctx, kTagCoreRng));
            art.training["s0-ctx"] = agents::train_captioner(*core, ds, cache, art.thirds[0],
                                                             val_idx, *art.validation_listener, rng);
            art.cores["s0-ctx"] = std::move(core);
        });

    if (wants(plan, agents::Variant::amortized))
        stage("amortized", [&] {
            auto core = std::make_shared<agents::SpeakerCore>(
                ds.vocab, core_config(false), core_seed(agents::Variant::amortized, kTagCore));
            Rng rng(core_seed(agents::Variant::amortized, kTagCoreRng));
            art.training["amortized"] = agents::train_amortized(
                *core, *art.internal_listener, ds, cache, art.thirds[0], val_idx,
                *art.validation_listener, agents::default_lambda(agents::Variant::amortized),
                plan.tau, rng);
            art.cores["amortized"] = std::move(core);
        });

    if (wants(plan, agents::Variant::rl))
        stage("reinforce", [&] {
            auto core = std::make_shared<agents::SpeakerCore>(
                ds.vocab, core_config(false), core_seed(agents::Variant::rl, kTagCore));
            Rng rng(core_seed(agents::Variant::rl, kTagCoreRng));
            art.training["reinforce"] =
                agents::train_reinforce(*core, *art.internal_listener, ds, cache, art.thirds[0],
                                        val_idx, *art.validation_listener, plan.rl_baseline, rng);
            art.cores["reinforce"] = std::move(core);
        });

    const bool score_conventionality =
        plan.measure_conventionality && ds.kind == world::GameKind::colors;
    if (score_conventionality)
        stage("language-model", [&] {
            std::vector<std::vector<int64_t>> corpus;
            for (int64_t i : range_indices(ds.splits.train)) {
                auto ids = ds.vocab.encode(ds.games[static_cast<size_t>(i)].gold);
                if (!ids.empty()) corpus.push_back(std::move(ids));
            }
            art.lm = std::make_shared<LanguageModel>(ds.vocab, plan.lm_hidden, 50,
                                                     mix_seed(plan.seed, kTagLm));
            Rng rng(mix_seed(plan.seed, kTagLmRng));
            art.training["language-model"] =
                train_unconditional_lm(*art.lm, corpus, 0.001, plan.lm_max_epochs, plan.batch, rng);
        });

    stage("assemble-speakers", [&] {
        for (agents::Variant v : plan.variants) {
            const std::string name = agents::variant_name(v);
            if (art.speakers.count(name)) continue;
            agents::Speaker sp;
            sp.variant = v;
            sp.lambda = agents::default_lambda(v);
            sp.sample_count = plan.srr_samples;
            switch (v) {
                case agents::Variant::s0:
                    sp.core = art.cores.at("s0");
                    break;
                case agents::Variant::s0ctx:
                    sp.core = art.cores.at("s0-ctx");
                    break;
                case agents::Variant::rsa_full:
                    sp.internal = art.internal_listener;
                    sp.utterance_set =
                        ds.kind == world::GameKind::shapeworld
                            ? agents::enumerate_utterances(ds.vocab, plan.enumeration_policy,
                                                           plan.enumeration_max_len)
                            : corpus_utterance_set(ds, art.thirds[0]);
                    break;
                case agents::Variant::rsa_srr:
                    sp.core = art.cores.at("s0");
                    sp.internal = art.internal_listener;
                    break;
                case agents::Variant::amortized:
                    sp.core = art.cores.at("amortized");
                    break;
                case agents::Variant::rl:
                    sp.core = art.cores.at("reinforce");
                    break;
            }
            art.speakers.emplace(name, std::move(sp));
        }
    });

    EvalReport report;
    stage("report", [&] {
        report.dataset_kind = kind_name(ds.kind);
        report.image_size = ds.image_size;
        report.dataset_label = report.dataset_kind + "-n" + std::to_string(ds.games.size()) +
                               "-px" + std::to_string(ds.image_size) + "-seed" +
                               std::to_string(ds.seed);
        const GameSet tset = test_set(ds, cache);
        report.n_test_games = tset.size();
        const auto judges = listener_judges(art.eval_listeners);

        auto add_rows = [&](const std::string& name, const std::vector<agents::Utterance>& utts) {
            report.efficacy[name] = judge_utterances(utts, judges, tset);
            report.concision[name] = concision_from_utterances(utts, tset);
            if (score_conventionality)
                report.conventionality[name] = conventionality_from_utterances(utts, *art.lm);
        };

        for (agents::Variant v : plan.variants) {
            const std::string name = agents::variant_name(v);
            if (report.efficacy.count(name)) continue;
            const uint64_t seed = mix_seed(mix_seed(plan.seed, kTagGenerate),
                                           static_cast<uint64_t>(v));
            add_rows(name, generate_utterances(art.speakers.at(name), tset, seed));
        }

        if (plan.include_controls) {
            add_rows("gold-replay", generate_utterances(gold_replay_speaker(ds.vocab), tset,
                                                        mix_seed(plan.seed, kTagGold)));
            add_rows("random-tokens", generate_utterances(random_token_speaker(ds.vocab), tset,
                                                          mix_seed(plan.seed, kTagRandom)));
        }

        if (plan.measure_speed) {
            for (agents::Variant v : plan.variants) {
                const std::string name = agents::variant_name(v);
                if (report.speed.count(name)) continue;
                const uint64_t seed =
                    mix_seed(mix_seed(plan.seed, kTagSpeed), static_cast<uint64_t>(v));
                auto& rows = report.speed[name];
                rows.push_back(eval_speed(art.speakers.at(name), tset, plan.speed_games,
                                          plan.speed_warmup, seed));
                if (v == agents::Variant::rsa_full && plan.speed_second_set &&
                    ds.kind == world::GameKind::shapeworld) {
                    agents::Speaker wide = art.speakers.at(name);
                    wide.utterance_set = agents::enumerate_utterances(ds.vocab, "exhaustive",
                                                                      plan.enumeration_max_len);
                    rows.push_back(eval_speed(wide, tset, plan.speed_games, plan.speed_warmup,
                                              mix_seed(seed, 1)));
                }
            }
        }
    });
    return report;
}

EvalReport run_protocol(const ExperimentPlan& plan, const world::Dataset& ds,
                        world::RenderCache& cache) {
    ProtocolArtifacts art;
    return run_protocol(plan, ds, cache, art);
}

// ----------------------------------------------------------- generalization

std::map<std::string, std::map<std::string, EfficacyResult>> eval_generalization(
    const ExperimentPlan& plan, const std::vector<HoldoutRun>& runs) {
    if (runs.empty()) throw std::invalid_argument("harness: no holdout runs");
    std::map<std::string, std::map<std::string, EfficacyResult>> out;
    for (const auto& run : runs) {
        if (!run.ds || !run.cache)
            throw std::invalid_argument("harness: holdout run '" + run.name + "' has no dataset");
        ExperimentPlan sub = plan;
        sub.seed = mix_seed(plan.seed, fnv1a(run.name));
        sub.measure_speed = false;
        sub.measure_conventionality = false;
        EvalReport rep = run_protocol(sub, *run.ds, *run.cache);
        out[run.name] = std::move(rep.efficacy);
    }
    return out;
}

// -------------------------------------------------------------------- reports

namespace {

json efficacy_json(const EfficacyResult& r) {
    return json{{"accuracy", r.accuracy}, {"ci_low", r.ci_low},       {"ci_high", r.ci_high},
                {"n_games", r.n_games},   {"n_listeners", r.n_listeners}};
}

}  // namespace

std::string report_to_json(const EvalReport& report) {
    json j;
    j["dataset"] = {{"label", report.dataset_label},
                    {"kind", report.dataset_kind},
                    {"image_size", report.image_size},
                    {"n_test_games", report.n_test_games}};
    j["efficacy"] = json::object();
    for (const auto& [name, r] : report.efficacy) j["efficacy"][name] = efficacy_json(r);
    j["concision"] = json::object();
    for (const auto& [name, r] : report.concision) {
        json rows = json::array();
        for (const auto& row : r.rows)
            rows.push_back({{"context", world::context_name(row.context)},
                            {"n_games", row.n_games},
                            {"mean_length", row.mean_length},
                            {"mean_color_tokens", row.mean_colors},
                            {"mean_shape_tokens", row.mean_shapes},
                            {"mean_other_tokens", row.mean_other}});
        j["concision"][name] = {{"n_games", r.n_games}, {"contexts", std::move(rows)}};
    }
    j["conventionality"] = json::object();
    for (const auto& [name, r] : report.conventionality)
        j["conventionality"][name] = {{"per_word_probability", r.per_word_probability},
                                      {"n_games", r.n_games}};
    j["speed"] = json::object();
    for (const auto& [name, rows] : report.speed) {
        json arr = json::array();
        for (const auto& r : rows)
            arr.push_back({{"utterance_set_size", r.utterance_set_size},
                           {"mean_seconds", r.mean_seconds},
                           {"sd_seconds", r.sd_seconds},
                           {"n_games", r.n_games}});
        j["speed"][name] = std::move(arr);
    }
    j["generalization"] = json::object();
    for (const auto& [holdout, per_speaker] : report.generalization) {
        json inner = json::object();
        for (const auto& [name, r] : per_speaker) inner[name] = efficacy_json(r);
        j["generalization"][holdout] = std::move(inner);
    }
    return j.dump(2);
}

namespace {

EfficacyResult efficacy_from_json(const json& j) {
    EfficacyResult r;
    r.accuracy = j.at("accuracy").get<double>();
    r.ci_low = j.at("ci_low").get<double>();
    r.ci_high = j.at("ci_high").get<double>();
    r.n_games = j.at("n_games").get<int64_t>();
    r.n_listeners = j.at("n_listeners").get<int>();
    return r;
}

}  // namespace

EvalReport report_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("report: not valid json: ") + e.what());
    }
    EvalReport report;
    try {
        const auto& d = j.at("dataset");
        report.dataset_label = d.at("label").get<std::string>();
        report.dataset_kind = d.at("kind").get<std::string>();
        report.image_size = d.at("image_size").get<int>();
        report.n_test_games = d.at("n_test_games").get<int64_t>();
        for (const auto& [name, r] : j.at("efficacy").items())
            report.efficacy[name] = efficacy_from_json(r);
        for (const auto& [name, r] : j.at("concision").items()) {
            ConcisionResult c;
            c.n_games = r.at("n_games").get<int64_t>();
            for (const auto& row_j : r.at("contexts")) {
                ConcisionRow row;
                row.context = world::parse_context(row_j.at("context").get<std::string>());
                row.n_games = row_j.at("n_games").get<int64_t>();
                row.mean_length = row_j.at("mean_length").get<double>();
                row.mean_colors = row_j.at("mean_color_tokens").get<double>();
                row.mean_shapes = row_j.at("mean_shape_tokens").get<double>();
                row.mean_other = row_j.at("mean_other_tokens").get<double>();
                c.rows.push_back(std::move(row));
            }
            report.concision[name] = std::move(c);
        }
        for (const auto& [name, r] : j.at("conventionality").items())
            report.conventionality[name] = {r.at("per_word_probability").get<double>(),
                                            r.at("n_games").get<int64_t>()};
        for (const auto& [name, rows_j] : j.at("speed").items()) {
            auto& rows = report.speed[name];
            for (const auto& r : rows_j)
                rows.push_back({r.at("mean_seconds").get<double>(),
                                r.at("sd_seconds").get<double>(), r.at("n_games").get<int64_t>(),
                                r.at("utterance_set_size").get<int64_t>()});
        }
        for (const auto& [holdout, per_speaker] : j.at("generalization").items())
            for (const auto& [name, r] : per_speaker.items())
                report.generalization[holdout][name] = efficacy_from_json(r);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("report: unexpected layout: ") + e.what());
    }
    return report;
}

void write_report_json(const EvalReport& report, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write report: " + path);
    f << report_to_json(report) << "\n";
}

void write_report_csvs(const EvalReport& report, const std::string& dir) {
    auto open = [&dir](const std::string& name) {
        std::ofstream f(dir + "/" + name);
        if (!f) throw std::runtime_error("cannot write report table: " + dir + "/" + name);
        return f;
    };

    auto fig3 = open("fig3_efficacy.csv");
    fig3 << "speaker,accuracy,ci_low,ci_high,n_games,n_listeners\n";
    for (const auto& [name, r] : report.efficacy)
        fig3 << name << "," << num(r.accuracy) << "," << num(r.ci_low) << "," << num(r.ci_high)
             << "," << r.n_games << "," << r.n_listeners << "\n";

    auto fig4 = open("fig4_concision.csv");
    fig4 << "speaker,context,n_games,mean_length,mean_color_tokens,mean_shape_tokens,"
            "mean_other_tokens\n";
    for (const auto& [name, r] : report.concision)
        for (const auto& row : r.rows)
            fig4 << name << "," << world::context_name(row.context) << "," << row.n_games << ","
                 << num(row.mean_length) << "," << num(row.mean_colors) << ","
                 << num(row.mean_shapes) << "," << num(row.mean_other) << "\n";

    auto fig5 = open("fig5_conventionality.csv");
    fig5 << "speaker,per_word_probability,n_games\n";
    for (const auto& [name, r] : report.conventionality)
        fig5 << name << "," << num(r.per_word_probability) << "," << r.n_games << "\n";

    auto fig6 = open("fig6_speed.csv");
    fig6 << "speaker,utterance_set_size,mean_seconds,sd_seconds,n_games\n";
    for (const auto& [name, rows] : report.speed)
        for (const auto& r : rows)
            fig6 << name << "," << r.utterance_set_size << "," << num(r.mean_seconds) << ","
                 << num(r.sd_seconds) << "," << r.n_games << "\n";

    auto fig8 = open("fig8_generalization.csv");
    fig8 << "holdout,speaker,accuracy,ci_low,ci_high,n_games,n_listeners\n";
    for (const auto& [holdout, per_speaker] : report.generalization)
        for (const auto& [name, r] : per_speaker)
            fig8 << holdout << "," << name << "," << num(r.accuracy) << "," << num(r.ci_low) << ","
                 << num(r.ci_high) << "," << r.n_games << "," << r.n_listeners << "\n";
}

}  // namespace refgame::harness
