#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <memory>
#include <set>

#include "refgame/gradcheck.hpp"
#include "refgame/speakers.hpp"

using refgame::Rng;
namespace ad = refgame::ad;
namespace nn = refgame::nn;
namespace world = refgame::world;
namespace agents = refgame::agents;
using ad::TensorPtr;
using agents::Utterance;

namespace {

world::WorldConfig tiny_world() {
    world::WorldConfig wc;
    wc.image_size = 16;
    return wc;
}

// a game whose three images are pixel-identical
world::ReferenceGame symmetric_game() {
    world::ReferenceGame g;
    world::ShapeSpec spec{world::Color::red, world::Shape::square, 8, 8, 6};
    g.specs = {spec, spec, spec};
    g.target = 0;
    g.gold = {"red", "square"};
    return g;
}

std::vector<int64_t> index_range(int64_t begin, int64_t end) {
    std::vector<int64_t> idx;
    for (int64_t i = begin; i < end; ++i) idx.push_back(i);
    return idx;
}

// Shared small-scale trained agents; built once, reused read-only by the
// cases below. Training quality only needs to clear loose floors.
struct Desk {
    world::Dataset ds;
    std::unique_ptr<world::RenderCache> cache;
    std::unique_ptr<agents::LiteralListener> listener;
    std::unique_ptr<agents::SpeakerCore> s0;
    std::unique_ptr<agents::SpeakerCore> s0ctx;
    std::vector<int64_t> train_idx, val_idx;
};

agents::ListenerConfig desk_listener_cfg() {
    agents::ListenerConfig lc;
    lc.image_size = 16;
    lc.max_epochs = 10;
    lc.patience = 3;
    return lc;
}

agents::SpeakerConfig desk_speaker_cfg(bool contextual) {
    agents::SpeakerConfig sc;
    sc.contextual = contextual;
    sc.image_size = 16;
    sc.max_epochs = 8;
    sc.patience = 3;
    return sc;
}

Desk& desk() {
    static Desk d = [] {
        Desk d;
        d.ds = world::generate_shapeworld(240, {6.0, 2.0, 2.0}, tiny_world(), 777);
        d.cache = std::make_unique<world::RenderCache>(&d.ds);
        d.train_idx = index_range(d.ds.splits.train.first, d.ds.splits.train.second);
        d.val_idx = index_range(d.ds.splits.validation.first, d.ds.splits.validation.second);

        d.listener =
            std::make_unique<agents::LiteralListener>(d.ds.vocab, desk_listener_cfg(), 1001);
        Rng lrng(2001);
        agents::ListenerTrainData data;
        data.ds = &d.ds;
        data.cache = d.cache.get();
        data.train_idx = d.train_idx;
        data.val_idx = d.val_idx;
        agents::train_listener(*d.listener, data, lrng);

        d.s0 = std::make_unique<agents::SpeakerCore>(d.ds.vocab, desk_speaker_cfg(false), 1002);
        Rng s0rng(2002);
        agents::train_captioner(*d.s0, d.ds, *d.cache, d.train_idx, d.val_idx, *d.listener, s0rng);

        d.s0ctx = std::make_unique<agents::SpeakerCore>(d.ds.vocab, desk_speaker_cfg(true), 1003);
        Rng ctxrng(2003);
        agents::train_captioner(*d.s0ctx, d.ds, *d.cache, d.train_idx, d.val_idx, *d.listener,
                                ctxrng);
        return d;
    }();
    return d;
}

}  // namespace

// ---------------------------------------------------------------- listener

TEST_CASE("listener turns image-utterance dot products into a softmax") {
    auto p = agents::LiteralListener::prob_from_dots({2.0, 0.0, 0.0});
    const double e2 = std::exp(2.0);
    CHECK(p[0] == doctest::Approx(e2 / (e2 + 2.0)).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(1.0 / (e2 + 2.0)).epsilon(1e-12));
    CHECK(p[2] == doctest::Approx(1.0 / (e2 + 2.0)).epsilon(1e-12));
    CHECK(p[0] == doctest::Approx(0.787).epsilon(2e-3));
    CHECK(p[1] == doctest::Approx(0.1065).epsilon(2e-3));
    CHECK(p[0] + p[1] + p[2] == doctest::Approx(1.0).epsilon(1e-12));

    auto u = agents::LiteralListener::prob_from_dots({-1.5, -1.5, -1.5});
    for (double v : u) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("identical images get exactly uniform listener probabilities") {
    agents::LiteralListener L(world::Vocabulary::shapeworld(), desk_listener_cfg(), 7);
    TensorPtr imgs = world::render_game(symmetric_game(), 16);
    Utterance u{{L.vocab.id("red")}, false};
    auto p = L.prob(imgs, u);
    for (int i = 0; i < 3; ++i) CHECK(p[static_cast<size_t>(i)] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("permuting the images permutes the listener distribution") {
    agents::LiteralListener L(world::Vocabulary::shapeworld(), desk_listener_cfg(), 8);
    Rng rng(51);
    auto game = world::sample_game(rng, world::ContextType::both_needed, tiny_world());
    TensorPtr imgs = world::render_game(game, 16);
    const int64_t plane = imgs->numel() / 3;
    TensorPtr swapped = ad::make_tensor(imgs->shape);
    // order (1, 0, 2)
    for (int64_t i = 0; i < plane; ++i) {
        swapped->write(i, imgs->read(plane + i));
        swapped->write(plane + i, imgs->read(i));
        swapped->write(2 * plane + i, imgs->read(2 * plane + i));
    }
    Utterance u{{L.vocab.id("blue"), L.vocab.id("circle")}, false};
    auto p = L.prob(imgs, u);
    auto q = L.prob(swapped, u);
    CHECK(q[0] == doctest::Approx(p[1]).epsilon(1e-12));
    CHECK(q[1] == doctest::Approx(p[0]).epsilon(1e-12));
    CHECK(q[2] == doctest::Approx(p[2]).epsilon(1e-12));
}

TEST_CASE("listener rejects empty and out-of-vocabulary utterances") {
    agents::LiteralListener L(world::Vocabulary::shapeworld(), desk_listener_cfg(), 9);
    TensorPtr imgs = world::render_game(symmetric_game(), 16);
    CHECK_THROWS_WITH_AS(L.prob(imgs, Utterance{}), doctest::Contains("empty utterance"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(L.prob(imgs, Utterance{{99}, false}),
                         doctest::Contains("outside vocabulary"), std::out_of_range);
    CHECK_THROWS_WITH_AS(L.prob(imgs, Utterance{{-1}, false}),
                         doctest::Contains("outside vocabulary"), std::out_of_range);
}

TEST_CASE("listener training score gradients agree with finite differences") {
    ad::CheckModeGuard f64;
    agents::ListenerConfig lc = desk_listener_cfg();
    agents::LiteralListener L(world::Vocabulary::shapeworld(), lc, 10);
    Rng rng(52);
    auto g1 = world::sample_game(rng, world::ContextType::color_sufficient, tiny_world());
    auto g2 = world::sample_game(rng, world::ContextType::shape_sufficient, tiny_world());
    std::vector<TensorPtr> games{world::render_game(g1, 16), world::render_game(g2, 16)};
    std::vector<std::vector<int64_t>> utts{L.vocab.encode(g1.gold), L.vocab.encode(g2.gold)};

    std::vector<TensorPtr> leaves;
    for (auto& p : L.params("listener")) leaves.push_back(p.t);
    auto fn = [&]() {
        auto scores = L.scores_taped(games, utts, /*train_mode=*/true);
        Rng wseed(4242);
        std::vector<double> w(static_cast<size_t>(scores->numel()));
        for (auto& v : w) v = wseed.uniform(-1.0, 1.0);
        return ad::dot(ad::reshape(scores, {scores->numel()}),
                       ad::constant({scores->numel()}, w));
    };
    auto report = ad::gradient_check(fn, leaves, 1e-5, 60, 99);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("listener learns the reference task well above chance") {
    auto& d = desk();
    const double acc =
        agents::listener_gold_accuracy(*d.listener, d.ds, *d.cache, d.val_idx);
    CHECK(acc > 0.5);
}

TEST_CASE("listener trained on mismatched utterances stays near chance") {
    auto& d = desk();
    agents::LiteralListener L(d.ds.vocab, desk_listener_cfg(), 1010);
    agents::ListenerTrainData data;
    data.ds = &d.ds;
    data.cache = d.cache.get();
    data.train_idx = d.train_idx;
    data.val_idx = d.val_idx;
    // pair every game with another game's utterance
    data.train_utterances.resize(d.train_idx.size());
    for (size_t i = 0; i < d.train_idx.size(); ++i) {
        const int64_t other = d.train_idx[(i + 7) % d.train_idx.size()];
        data.train_utterances[i] = d.ds.vocab.encode(d.ds.games[static_cast<size_t>(other)].gold);
    }
    Rng rng(2010);
    agents::TrainStats stats = agents::train_listener(L, data, rng);
    CHECK(stats.best_val_accuracy < 0.55);
}

TEST_CASE("listener training is deterministic for a fixed seed") {
    auto& d = desk();
    agents::ListenerConfig lc = desk_listener_cfg();
    lc.max_epochs = 2;
    lc.patience = 2;
    std::vector<int64_t> small_train = index_range(0, 48);
    std::vector<int64_t> small_val = index_range(48, 72);
    uint64_t hashes[2];
    for (int run = 0; run < 2; ++run) {
        agents::LiteralListener L(d.ds.vocab, lc, 1020);
        agents::ListenerTrainData data;
        data.ds = &d.ds;
        data.cache = d.cache.get();
        data.train_idx = small_train;
        data.val_idx = small_val;
        Rng rng(2020);
        agents::train_listener(L, data, rng);
        hashes[run] = L.param_hash();
    }
    CHECK(hashes[0] == hashes[1]);
}

// ---------------------------------------------------------------- captioner

TEST_CASE("teacher-forced loss at initialization is close to log vocab size") {
    auto& d = desk();
    agents::SpeakerCore sp(d.ds.vocab, desk_speaker_cfg(true), 555);
    std::vector<TensorPtr> games;
    std::vector<int> targets;
    std::vector<std::vector<int64_t>> gold;
    for (int64_t i = 0; i < 8; ++i) {
        games.push_back(d.cache->game_images(i));
        targets.push_back(d.ds.games[static_cast<size_t>(i)].target);
        gold.push_back(d.ds.vocab.encode(d.ds.games[static_cast<size_t>(i)].gold));
    }
    auto loss = sp.batch_nll(games, targets, gold);
    CHECK(loss->item() == doctest::Approx(std::log(15.0)).epsilon(0.08));
}

TEST_CASE("captioner memorizes a single game and reproduces its caption") {
    auto& d = desk();
    agents::SpeakerCore sp(d.ds.vocab, desk_speaker_cfg(false), 556);
    const int64_t gi = 3;
    std::vector<TensorPtr> games{d.cache->game_images(gi)};
    std::vector<int> targets{d.ds.games[gi].target};
    std::vector<std::vector<int64_t>> gold{d.ds.vocab.encode(d.ds.games[gi].gold)};
    REQUIRE(gold[0].size() == 2);

    nn::Adam adam(sp.params("sp"), sp.cfg.lr);
    std::vector<double> history;
    for (int step = 0; step < 150; ++step) {
        auto loss = sp.batch_nll(games, targets, gold);
        history.push_back(loss->item());
        ad::backward(loss);
        adam.step();
        adam.zero_grad();
    }
    CHECK(history.back() < 0.05);
    for (size_t k = 30; k < history.size(); k += 30) CHECK(history[k] < history[k - 30]);

    Utterance u = sp.decode(games[0], targets[0], /*sample=*/false, nullptr);
    CHECK(u.ids == gold[0]);
    CHECK_FALSE(u.truncated);

    // a decode cap shorter than the caption leaves the tail cut and flagged
    sp.cfg.max_len = 1;
    Utterance cut = sp.decode(games[0], targets[0], false, nullptr);
    CHECK(cut.truncated);
    CHECK(cut.ids == std::vector<int64_t>{gold[0][0]});
}

TEST_CASE("teacher-forced loss gradients agree with finite differences") {
    ad::CheckModeGuard f64;
    agents::SpeakerCore sp(world::Vocabulary::shapeworld(), desk_speaker_cfg(true), 557);
    Rng rng(53);
    auto g1 = world::sample_game(rng, world::ContextType::both_needed, tiny_world());
    auto g2 = world::sample_game(rng, world::ContextType::color_sufficient, tiny_world());
    std::vector<TensorPtr> games{world::render_game(g1, 16), world::render_game(g2, 16)};
    std::vector<int> targets{g1.target, g2.target};
    std::vector<std::vector<int64_t>> gold{sp.vocab.encode(g1.gold), sp.vocab.encode(g2.gold)};
    std::vector<TensorPtr> leaves;
    for (auto& p : sp.params("sp")) leaves.push_back(p.t);
    auto fn = [&]() { return sp.batch_nll(games, targets, gold); };
    auto report = ad::gradient_check(fn, leaves, 1e-5, 60, 100);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("trained captioners communicate above chance through the listener") {
    auto& d = desk();
    CHECK(d.s0->trained);
    CHECK(d.s0ctx->trained);
    const double acc0 = agents::core_greedy_accuracy(*d.s0, *d.listener, d.ds, *d.cache, d.val_idx);
    const double acc1 =
        agents::core_greedy_accuracy(*d.s0ctx, *d.listener, d.ds, *d.cache, d.val_idx);
    CHECK(acc0 > 0.4);
    CHECK(acc1 > 0.4);
}

TEST_CASE("contextual features place the target image first") {
    agents::SpeakerCore sp(world::Vocabulary::shapeworld(), desk_speaker_cfg(true), 558);
    Rng rng(54);
    auto game = world::sample_game(rng, world::ContextType::both_needed, tiny_world());
    TensorPtr imgs = world::render_game(game, 16);
    ad::NoGradGuard ng;
    TensorPtr ctx = sp.context_features(imgs, 2, /*training=*/false);
    const int64_t dim = sp.img_enc.out_dim();
    REQUIRE(ctx->shape == std::vector<int64_t>{1, 3 * dim});

    // encode image 2 alone and compare with the leading block
    const int64_t plane = imgs->numel() / 3;
    TensorPtr solo = ad::make_tensor({1, 3, 16, 16});
    for (int64_t i = 0; i < plane; ++i) solo->write(i, imgs->read(2 * plane + i));
    TensorPtr feats = sp.img_enc.encode(solo, false);
    double diff = 0.0;
    for (int64_t j = 0; j < dim; ++j)
        diff = std::max(diff, std::abs(ctx->read(j) - feats->read(j)));
    CHECK(diff == 0.0);
}

// ---------------------------------------------------------------- enumeration

TEST_CASE("utterance cost is linear in content length") {
    CHECK(agents::utterance_cost(Utterance{{3, 9}, false}, 0.5) == doctest::Approx(1.0));
    CHECK(agents::utterance_cost(Utterance{{3}, false}, 1.0) == doctest::Approx(1.0));
    CHECK(agents::utterance_cost(Utterance{{3, 9, 4}, false}, 0.0) == doctest::Approx(0.0));
}

TEST_CASE("grammar enumeration yields the expected candidate inventory") {
    auto vocab = world::Vocabulary::shapeworld();
    auto U = agents::enumerate_utterances(vocab, "grammar");
    CHECK(U.size() == 47);

    std::set<std::vector<int64_t>> seen;
    size_t singles = 0, pairs = 0;
    for (const auto& u : U) {
        CHECK(seen.insert(u.ids).second);  // unique
        for (int64_t id : u.ids) {
            CHECK(id != vocab.bos);
            CHECK(id != vocab.eos);
            CHECK(id != vocab.unk);
        }
        (u.ids.size() == 1 ? singles : pairs) += 1;
    }
    CHECK(singles == 11);
    CHECK(pairs == 36);
    CHECK(seen.count({vocab.id("red")}) == 1);
    CHECK(seen.count({vocab.id("triangle")}) == 1);
    CHECK(seen.count({vocab.id("green"), vocab.id("circle")}) == 1);
    CHECK(seen.count({vocab.id("gray"), vocab.id("shape")}) == 1);
    CHECK(seen.count({vocab.id("shape")}) == 0);  // bare generic noun is not a candidate
    for (size_t i = 1; i < U.size(); ++i) CHECK(agents::lex_less(U[i - 1].ids, U[i].ids));
}

TEST_CASE("exhaustive enumeration covers all short content sequences") {
    auto vocab = world::Vocabulary::shapeworld();
    auto all = agents::enumerate_utterances(vocab, "exhaustive", 2);
    CHECK(all.size() == 156);  // 12 + 12^2

    std::set<std::vector<int64_t>> seen;
    for (const auto& u : all) seen.insert(u.ids);
    for (const auto& u : agents::enumerate_utterances(vocab, "grammar"))
        CHECK(seen.count(u.ids) == 1);
}

TEST_CASE("enumeration rejects oversized requests and unknown policies") {
    auto vocab = world::Vocabulary::shapeworld();
    CHECK_THROWS_WITH_AS(agents::enumerate_utterances(vocab, "exhaustive", 20, 200000),
                         doctest::Contains("budget"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(agents::enumerate_utterances(vocab, "beam"),
                         doctest::Contains("unknown enumeration policy"), std::invalid_argument);
    auto colors_vocab = world::Vocabulary::from_content({"the", "darker", "one"});
    CHECK_THROWS_WITH_AS(agents::enumerate_utterances(colors_vocab, "grammar"),
                         doctest::Contains("lacks"), std::invalid_argument);
}

// ---------------------------------------------------------------- reranking

TEST_CASE("rerank ties are broken toward the lexicographically smallest ids") {
    agents::LiteralListener L(world::Vocabulary::shapeworld(), desk_listener_cfg(), 700);
    TensorPtr imgs = world::render_game(symmetric_game(), 16);
    auto U = agents::enumerate_utterances(L.vocab, "grammar");
    // identical images: every candidate scores log(1/3), an exact 47-way tie
    auto res = agents::speak_rsa_full(L, imgs, 0, U, 0.0);
    CHECK(res.chosen.ids == std::vector<int64_t>{L.vocab.id("red")});
    CHECK(res.index == 0);
    for (double s : res.scores) CHECK(s == res.scores[0]);
    for (double p : res.distribution) CHECK(p == 1.0 / 47.0);

    // duplicate candidates keep the first occurrence
    std::vector<Utterance> dup{U[5], U[5]};
    auto two = agents::rsa_rerank(L, imgs, 0, dup, 0.0);
    CHECK(two.index == 0);
}

TEST_CASE("full reranking matches an independent reimplementation bit for bit") {
    auto& d = desk();
    const int64_t gi = d.val_idx.front();
    const auto& game = d.ds.games[static_cast<size_t>(gi)];
    TensorPtr imgs = d.cache->game_images(gi);
    auto U = agents::enumerate_utterances(d.ds.vocab, "grammar");
    const double lambda = 0.0001;

    auto res = agents::speak_rsa_full(*d.listener, imgs, game.target, U, lambda);
    REQUIRE(res.scores.size() == U.size());

    TensorPtr feats = d.listener->encode_images_eval(imgs);
    std::vector<double> scores(U.size());
    for (size_t i = 0; i < U.size(); ++i) {
        auto p = d.listener->prob_cached(feats, U[i]);
        scores[i] = std::log(std::max(p[static_cast<size_t>(game.target)], 1e-300)) -
                    agents::utterance_cost(U[i], lambda);
    }
    size_t best = 0;
    for (size_t i = 1; i < U.size(); ++i)
        if (scores[i] > scores[best] ||
            (scores[i] == scores[best] && agents::lex_less(U[i].ids, U[best].ids)))
            best = i;
    double mx = scores[0];
    for (double s : scores) mx = std::max(mx, s);
    std::vector<double> dist(U.size());
    double z = 0.0;
    for (size_t i = 0; i < U.size(); ++i) {
        dist[i] = std::exp(scores[i] - mx);
        z += dist[i];
    }
    for (auto& v : dist) v /= z;

    for (size_t i = 0; i < U.size(); ++i) {
        CHECK(res.scores[i] == scores[i]);
        CHECK(res.distribution[i] == dist[i]);
    }
    CHECK(res.index == static_cast<int64_t>(best));
    CHECK(res.chosen.ids == U[best].ids);
}

TEST_CASE("a steep length penalty forces single-token choices") {
    auto& d = desk();
    const int64_t gi = d.val_idx[1];
    TensorPtr imgs = d.cache->game_images(gi);
    auto U = agents::enumerate_utterances(d.ds.vocab, "grammar");
    auto res = agents::speak_rsa_full(*d.listener, imgs,
                                      d.ds.games[static_cast<size_t>(gi)].target, U, 100.0);
    CHECK(res.chosen.ids.size() == 1);
}

TEST_CASE("rerank rejects an empty candidate set") {
    auto& d = desk();
    TensorPtr imgs = d.cache->game_images(0);
    CHECK_THROWS_WITH_AS(agents::speak_rsa_full(*d.listener, imgs, 0, {}, 1.0),
                         doctest::Contains("empty utterance set"), std::invalid_argument);
}

TEST_CASE("sample-rerank draws from the base speaker and reranks the samples") {
    auto& d = desk();
    const int64_t gi = d.val_idx[2];
    const auto& game = d.ds.games[static_cast<size_t>(gi)];
    TensorPtr imgs = d.cache->game_images(gi);

    agents::SpeakerCore fresh(d.ds.vocab, desk_speaker_cfg(false), 558);
    Rng r0(9000);
    CHECK_THROWS_WITH_AS(agents::speak_rsa_srr(fresh, *d.listener, imgs, game.target, 5, 1.0, r0),
                         doctest::Contains("has not been trained"), std::logic_error);
    CHECK_THROWS_WITH_AS(agents::speak_rsa_srr(*d.s0, *d.listener, imgs, game.target, 0, 1.0, r0),
                         doctest::Contains("sample_count"), std::invalid_argument);

    Rng srr_rng(9001);
    auto res = agents::speak_rsa_srr(*d.s0, *d.listener, imgs, game.target, 5, 1.0, srr_rng);

    // replay the same stream: the candidate list (duplicates and all) must
    // reproduce, and reranking it must agree with the returned choice
    Rng replay(9001);
    std::vector<Utterance> cands;
    for (int m = 0; m < 5; ++m) {
        Utterance u = d.s0->decode(imgs, game.target, /*sample=*/true, &replay);
        if (!u.ids.empty()) cands.push_back(u);
    }
    REQUIRE(!cands.empty());
    REQUIRE(res.scores.size() == cands.size());
    auto rr = agents::rsa_rerank(*d.listener, imgs, game.target, cands, 1.0);
    CHECK(rr.chosen.ids == res.chosen.ids);
    CHECK(rr.index == res.index);
    for (size_t i = 0; i < cands.size(); ++i) CHECK(rr.scores[i] == res.scores[i]);
    bool member = false;
    for (const auto& c : cands) member = member || c.ids == res.chosen.ids;
    CHECK(member);
}

// ---------------------------------------------------------------- amortized

TEST_CASE("length penalty arithmetic pins the documented example") {
    CHECK(-std::log(0.5) + 0.02 == doctest::Approx(0.7131).epsilon(1e-4));
}

TEST_CASE("amortized loss is the target surprisal plus the stop penalty") {
    auto& d = desk();
    agents::LiteralListener frozen(d.ds.vocab, desk_listener_cfg(), 801);
    frozen.freeze();
    const int64_t gi = d.train_idx[4];
    const auto& game = d.ds.games[static_cast<size_t>(gi)];
    TensorPtr imgs = d.cache->game_images(gi);
    TensorPtr feats = frozen.encode_images_eval(imgs);

    agents::SpeakerCore sp(d.ds.vocab, desk_speaker_cfg(true), 802);
    const double lambda = 0.01;
    Rng rng(8000);
    auto st = agents::amortized_loss(sp, frozen, imgs, feats, game.target, lambda, 1.0, rng);

    CHECK(st.loss->item() ==
          doctest::Approx(-st.target_logprob + st.cost_value).epsilon(1e-6));

    double cost = 0.0;
    for (size_t t = 0; t < st.stop_probs.size(); ++t)
        cost += lambda * static_cast<double>(t + 1) * (1.0 - st.stop_probs[t]);
    CHECK(st.cost_value == doctest::Approx(cost).epsilon(1e-6));

    // the relaxed pass scored exactly the tokens that were sampled
    if (!st.sampled.ids.empty()) {
        auto p = frozen.prob(imgs, st.sampled);
        CHECK(std::exp(st.target_logprob) ==
              doctest::Approx(p[static_cast<size_t>(game.target)]).epsilon(1e-3));
    }

    // zero length weight, zero penalty
    Rng rng2(8001);
    auto free_len = agents::amortized_loss(sp, frozen, imgs, feats, game.target, 0.0, 1.0, rng2);
    CHECK(free_len.cost_value == 0.0);
}

TEST_CASE("amortized loss trains the speaker, never the listener") {
    auto& d = desk();
    agents::LiteralListener frozen(d.ds.vocab, desk_listener_cfg(), 803);
    frozen.freeze();
    const uint64_t before = frozen.param_hash();
    const int64_t gi = d.train_idx[5];
    TensorPtr imgs = d.cache->game_images(gi);
    TensorPtr feats = frozen.encode_images_eval(imgs);

    agents::SpeakerCore sp(d.ds.vocab, desk_speaker_cfg(true), 804);
    Rng rng(8100);
    auto st = agents::amortized_loss(sp, frozen, imgs, feats,
                                     d.ds.games[static_cast<size_t>(gi)].target, 0.01, 1.0, rng);
    ad::backward(st.loss);
    double grad_mass = 0.0;
    for (auto& p : sp.params("sp"))
        if (p.t->has_grad())
            for (int64_t i = 0; i < p.t->numel(); ++i) grad_mass += std::abs(p.t->grad_read(i));
    CHECK(grad_mass > 0.0);
    CHECK(frozen.param_hash() == before);
}

TEST_CASE("amortized training demands a frozen listener") {
    auto& d = desk();
    agents::LiteralListener open_listener(d.ds.vocab, desk_listener_cfg(), 805);
    agents::SpeakerCore sp(d.ds.vocab, desk_speaker_cfg(true), 806);
    TensorPtr imgs = d.cache->game_images(0);
    TensorPtr feats = open_listener.encode_images_eval(imgs);
    Rng rng(8200);
    CHECK_THROWS_WITH_AS(
        agents::amortized_loss(sp, open_listener, imgs, feats, 0, 0.01, 1.0, rng),
        doctest::Contains("frozen"), std::logic_error);
    CHECK_THROWS_WITH_AS(
        agents::train_amortized(sp, open_listener, d.ds, *d.cache, d.train_idx, d.val_idx,
                                open_listener, 0.01, 1.0, rng),
        doctest::Contains("frozen"), std::logic_error);
}

TEST_CASE("amortized training runs end to end on a small slice") {
    auto& d = desk();
    agents::LiteralListener frozen(d.ds.vocab, desk_listener_cfg(), 807);
    frozen.freeze();
    agents::SpeakerConfig sc = desk_speaker_cfg(true);
    sc.max_epochs = 2;
    sc.patience = 2;
    agents::SpeakerCore sp(d.ds.vocab, sc, 808);
    Rng rng(8300);
    std::vector<int64_t> small_train = index_range(0, 24);
    std::vector<int64_t> small_val = index_range(144, 156);
    auto stats = agents::train_amortized(sp, frozen, d.ds, *d.cache, small_train, small_val,
                                         *d.listener, 0.01, 1.0, rng);
    CHECK(sp.trained);
    CHECK(stats.epochs_run == 2);
    CHECK(stats.train_loss_history.size() == 2);
}

// ---------------------------------------------------------------- reinforcement

TEST_CASE("zero-reward batches leave the policy parameters untouched") {
    // all three images identical and the target at index 2: an argmax
    // listener always answers 0, so every sampled utterance earns reward 0
    world::Dataset ds;
    ds.kind = world::GameKind::shapeworld;
    ds.image_size = 16;
    ds.vocab = world::Vocabulary::shapeworld();
    for (int i = 0; i < 8; ++i) {
        world::ReferenceGame g = symmetric_game();
        g.target = 2;
        ds.games.push_back(g);
    }
    world::RenderCache cache(&ds);
    std::vector<int64_t> train = index_range(0, 6), val = index_range(6, 8);

    agents::LiteralListener ext(ds.vocab, desk_listener_cfg(), 900);
    agents::SpeakerConfig sc = desk_speaker_cfg(true);
    sc.max_epochs = 1;
    agents::SpeakerCore sp(ds.vocab, sc, 901);
    const uint64_t before = nn::values_hash(sp.params("sp"));
    Rng rng(9100);
    auto stats = agents::train_reinforce(sp, ext, ds, cache, train, val, ext, false, rng);
    CHECK(nn::values_hash(sp.params("sp")) == before);
    CHECK(stats.final_mean_reward == 0.0);
}

TEST_CASE("policy gradient drives a bandit to the rewarded arm") {
    auto vocab = world::Vocabulary::from_content({"left", "mid", "right"});
    agents::SpeakerConfig sc = desk_speaker_cfg(false);
    sc.max_len = 1;
    sc.lr = 0.01;
    agents::SpeakerCore sp(vocab, sc, 902);
    TensorPtr imgs = world::render_game(symmetric_game(), 16);
    const int64_t arm = vocab.id("left");

    nn::Adam adam(sp.params("sp"), sc.lr);
    Rng rng(9200);
    for (int step = 0; step < 2000; ++step) {
        auto su = agents::sample_with_logp(sp, imgs, 0, rng);
        const double r = (!su.u.ids.empty() && su.u.ids[0] == arm) ? 1.0 : 0.0;
        if (r != 0.0) {
            ad::backward(ad::affine(su.logp, -r, 0.0));
            adam.step();
        }
        adam.zero_grad();
    }
    ad::NoGradGuard ng;
    TensorPtr h = sp.initial_hidden(sp.context_features(imgs, 0, false));
    h = sp.gru.step(h, sp.emb.lookup({vocab.bos}));
    TensorPtr p = ad::softmax(sp.out.forward(h));
    CHECK(p->read(arm) > 0.9);
}

TEST_CASE("sampled policy gradients average to the exact gradient") {
    // single-token policy over three arms, reward fixed at (1, 0, 0):
    // the objective is p0, whose exact gradient is p0 * (onehot0 - p)
    TensorPtr logits = ad::constant({3}, {0.2, -0.4, 0.1});
    logits->requires_grad = true;
    std::vector<double> p;
    {
        ad::NoGradGuard ng;
        p = ad::softmax(logits)->to_vector();
    }
    const std::array<double, 3> exact{p[0] * (1.0 - p[0]), -p[0] * p[1], -p[0] * p[2]};

    Rng rng(9300);
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) {
        const size_t arm = rng.categorical(p);
        if (arm != 0) continue;  // reward 0 contributes nothing
        std::vector<double> onehot(3, 0.0);
        onehot[arm] = 1.0;
        auto picked = ad::sum(ad::mul(ad::log_softmax(logits), ad::constant({3}, onehot)));
        logits->zero_grad();
        ad::backward(picked);
        for (int j = 0; j < 3; ++j) mean[static_cast<size_t>(j)] += logits->grad_read(j);
    }
    for (auto& v : mean) v /= static_cast<double>(draws);
    for (int j = 0; j < 3; ++j)
        CHECK(std::abs(mean[static_cast<size_t>(j)] - exact[static_cast<size_t>(j)]) <
              0.02 * std::abs(exact[static_cast<size_t>(j)]));
}

// ---------------------------------------------------------------- variants

TEST_CASE("variant names round-trip and carry their length weights") {
    using agents::Variant;
    for (Variant v : {Variant::s0, Variant::s0ctx, Variant::rsa_full, Variant::rsa_srr,
                      Variant::amortized, Variant::rl})
        CHECK(agents::parse_variant(agents::variant_name(v)) == v);
    CHECK_THROWS_WITH_AS(agents::parse_variant("s9"), doctest::Contains("unknown speaker variant"),
                         std::invalid_argument);
    CHECK(agents::default_lambda(Variant::rsa_srr) == 1.0);
    CHECK(agents::default_lambda(Variant::rsa_full) == 0.0001);
    CHECK(agents::default_lambda(Variant::amortized) == 0.01);
    CHECK(agents::default_lambda(Variant::s0) == 0.0);
}

TEST_CASE("the speaker wrapper dispatches to its variant") {
    auto& d = desk();
    const int64_t gi = d.val_idx[3];
    const auto& game = d.ds.games[static_cast<size_t>(gi)];
    TensorPtr imgs = d.cache->game_images(gi);

    agents::Speaker plain;
    plain.variant = agents::Variant::s0;
    CHECK_THROWS_WITH_AS(plain.speak(imgs, game.target, nullptr),
                         doctest::Contains("missing decoder core"), std::logic_error);
    plain.core = std::shared_ptr<agents::SpeakerCore>(d.s0.get(), [](agents::SpeakerCore*) {});
    Utterance via_wrapper = plain.speak(imgs, game.target, nullptr);
    Utterance direct = d.s0->decode(imgs, game.target, false, nullptr);
    CHECK(via_wrapper.ids == direct.ids);

    agents::Speaker full;
    full.variant = agents::Variant::rsa_full;
    full.internal =
        std::shared_ptr<agents::LiteralListener>(d.listener.get(), [](agents::LiteralListener*) {});
    full.utterance_set = agents::enumerate_utterances(d.ds.vocab, "grammar");
    full.lambda = 0.0001;
    Utterance chosen = full.speak(imgs, game.target, nullptr);
    CHECK(chosen.ids ==
          agents::speak_rsa_full(*d.listener, imgs, game.target, full.utterance_set, 0.0001)
              .chosen.ids);

    agents::Speaker srr;
    srr.variant = agents::Variant::rsa_srr;
    srr.core = plain.core;
    srr.internal = full.internal;
    srr.lambda = 1.0;
    CHECK_THROWS_WITH_AS(srr.speak(imgs, game.target, nullptr), doctest::Contains("needs an rng"),
                         std::invalid_argument);

    const double a1 = agents::communicative_accuracy(srr, *d.listener, d.ds, *d.cache, d.val_idx,
                                                     31337);
    const double a2 = agents::communicative_accuracy(srr, *d.listener, d.ds, *d.cache, d.val_idx,
                                                     31337);
    CHECK(a1 == a2);
    CHECK(a1 >= 0.0);
    CHECK(a1 <= 1.0);
}
