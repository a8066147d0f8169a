#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "acllm/ctc.hpp"
#include "acllm/ssl.hpp"

using namespace acllm;

namespace {

ConformerConfig tiny_cfg() {
    ConformerConfig cfg;
    cfg.input_dim = 8;
    cfg.width = 16;
    cfg.depth = 2;
    cfg.heads = 2;
    return cfg;
}

FeatureSequence random_feats(int T, int D, uint64_t seed) {
    Rng rng = make_rng(seed);
    std::normal_distribution<float> g(0.0f, 1.0f);
    FeatureSequence f;
    f.T = T;
    f.D = D;
    f.frames.resize(static_cast<size_t>(T) * D);
    for (auto& v : f.frames) v = g(rng);
    return f;
}

// Exhaustive CTC oracle: sum softmax path probabilities over all (V+1)^T
// label paths whose collapse equals the target.
double ctc_enumeration_oracle(const Tensor& logits, const std::vector<int>& target) {
    const int T = logits.rows(), V1 = logits.cols();
    std::vector<std::vector<double>> y(static_cast<size_t>(T),
                                       std::vector<double>(static_cast<size_t>(V1)));
    for (int t = 0; t < T; ++t) {
        double mx = -1e30, z = 0;
        for (int k = 0; k < V1; ++k)
            mx = std::max(mx, static_cast<double>(logits.values()[static_cast<size_t>(t) * V1 + k]));
        for (int k = 0; k < V1; ++k)
            z += std::exp(logits.values()[static_cast<size_t>(t) * V1 + k] - mx);
        for (int k = 0; k < V1; ++k)
            y[static_cast<size_t>(t)][static_cast<size_t>(k)] =
                std::exp(logits.values()[static_cast<size_t>(t) * V1 + k] - mx) / z;
    }
    double total = 0;
    std::vector<int> path(static_cast<size_t>(T), 0);
    while (true) {
        // collapse
        std::vector<int> col;
        int prev = 0;
        for (int t = 0; t < T; ++t) {
            if (path[static_cast<size_t>(t)] != 0 && path[static_cast<size_t>(t)] != prev)
                col.push_back(path[static_cast<size_t>(t)]);
            prev = path[static_cast<size_t>(t)];
        }
        if (col == target) {
            double p = 1;
            for (int t = 0; t < T; ++t)
                p *= y[static_cast<size_t>(t)][static_cast<size_t>(path[static_cast<size_t>(t)])];
            total += p;
        }
        int i = T - 1;
        while (i >= 0 && path[static_cast<size_t>(i)] == V1 - 1) path[static_cast<size_t>(i--)] = 0;
        if (i < 0) break;
        ++path[static_cast<size_t>(i)];
    }
    return -std::log(total);
}

}  // namespace

TEST_CASE("conformer: one output row per input frame at every block") {
    ParamStore ps;
    ConformerEncoder enc(tiny_cfg(), ps, 1);
    auto f = random_feats(11, 8, 2);
    auto outs = enc.forward(enc.from_features(f));
    CHECK(outs.size() == 2);
    for (const auto& o : outs) {
        CHECK(o.rows() == 11);
        CHECK(o.cols() == 16);
    }
    CHECK_THROWS_AS(ConformerEncoder(ConformerConfig{8, 16, 1, 2}, ps, 1, "x/"),
                    ConfigError);
}

TEST_CASE("conformer: full gradient check through a block stack") {
    ParamStore ps;
    ConformerConfig cfg = tiny_cfg();
    ConformerEncoder enc(cfg, ps, 3);
    Tensor x = random_feats(5, 8, 4).frames.empty()
                   ? Tensor::zeros({5, 8})
                   : Tensor::from({5, 8}, random_feats(5, 8, 4).frames);
    auto f = [&]() { return mean_all(enc.output(x)); };
    CHECK(grad_check(f, ps) < 1e-3);
}

TEST_CASE("ctc_loss: T=1 single token") {
    Tensor logits = Tensor::from({1, 3}, {0.2f, 1.1f, -0.4f});
    // -log softmax[1]
    double mx = 1.1;
    double z = std::exp(0.2 - mx) + std::exp(1.1 - mx) + std::exp(-0.4 - mx);
    double expect = -(1.1 - mx - std::log(z));
    CHECK(ctc_loss(logits, {1}).item() == doctest::Approx(expect).epsilon(1e-5));
}

TEST_CASE("ctc_loss: T=2 single token matches 3-path sum") {
    Rng rng = make_rng(8);
    Tensor logits = Tensor::randn({2, 3}, 1.0f, rng);
    auto prob = [&](int t, int k) {
        double mx = -1e30, z = 0;
        for (int j = 0; j < 3; ++j)
            mx = std::max(mx, static_cast<double>(logits.values()[static_cast<size_t>(t) * 3 + j]));
        for (int j = 0; j < 3; ++j)
            z += std::exp(logits.values()[static_cast<size_t>(t) * 3 + j] - mx);
        return std::exp(logits.values()[static_cast<size_t>(t) * 3 + k] - mx) / z;
    };
    double p = prob(0, 1) * prob(1, 0) + prob(0, 0) * prob(1, 1) + prob(0, 1) * prob(1, 1);
    CHECK(ctc_loss(logits, {1}).item() == doctest::Approx(-std::log(p)).epsilon(1e-5));
}

TEST_CASE("ctc_loss: matches exhaustive enumeration oracle") {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng = make_rng(seed);
        Tensor logits = Tensor::randn({8, 4}, 1.0f, rng);
        std::vector<int> target;
        std::uniform_int_distribution<int> tok(1, 3);
        for (int i = 0; i < 3; ++i) target.push_back(tok(rng));
        double oracle = ctc_enumeration_oracle(logits, target);
        CHECK(ctc_loss(logits, target).item() == doctest::Approx(oracle).epsilon(1e-4));
    }
}

TEST_CASE("ctc_loss: too few frames rejected") {
    Tensor logits = Tensor::zeros({2, 4});
    CHECK_THROWS_AS(ctc_loss(logits, {1, 1}), std::invalid_argument);  // needs 3
    CHECK_THROWS_AS(ctc_loss(logits, {0}), std::out_of_range);
    CHECK(ctc_min_frames({1, 1, 2}) == 4);
}

TEST_CASE("ctc_loss: appending a sure-blank frame leaves loss unchanged") {
    Rng rng = make_rng(12);
    Tensor logits = Tensor::randn({6, 5}, 1.0f, rng);
    std::vector<int> target = {2, 4};
    float base = ctc_loss(logits, target).item();
    std::vector<float> ext(logits.values());
    // near-one blank probability on the appended frame
    ext.push_back(30.0f);
    for (int k = 1; k < 5; ++k) ext.push_back(-30.0f);
    float extended = ctc_loss(Tensor::from({7, 5}, ext), target).item();
    CHECK(extended == doctest::Approx(base).epsilon(1e-5));
}

TEST_CASE("ctc_loss: gradient matches finite differences") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng = make_rng(seed);
        ParamStore ps;
        ps.add("logits", Tensor::randn({6, 4}, 0.8f, rng));
        std::vector<int> target = {1, 3};
        auto f = [&]() { return ctc_loss(ps.params()[0].tensor, target); };
        INFO("seed ", seed);
        CHECK(grad_check(f, ps) < 1e-3);
    }
}

TEST_CASE("ctc_greedy_decode: collapse rules") {
    auto mk = [](std::vector<int> argmaxes, int V1) {
        std::vector<float> v(argmaxes.size() * static_cast<size_t>(V1), 0.0f);
        for (size_t t = 0; t < argmaxes.size(); ++t)
            v[t * static_cast<size_t>(V1) + static_cast<size_t>(argmaxes[t])] = 5.0f;
        return Tensor::from({static_cast<int>(argmaxes.size()), V1}, v);
    };
    CHECK(ctc_greedy_decode(mk({1, 1, 0, 1}, 3)) == std::vector<int>{1, 1});
    CHECK(ctc_greedy_decode(mk({0, 0, 0}, 3)).empty());
    CHECK(ctc_greedy_decode(mk({1, 2, 2, 0, 2}, 3)) == std::vector<int>{1, 2, 2});
}

TEST_CASE("ctc_greedy_decode: random logits match reference collapse oracle") {
    for (uint64_t seed = 1; seed <= 30; ++seed) {
        Rng rng = make_rng(seed);
        Tensor logits = Tensor::randn({12, 6}, 1.0f, rng);
        // independent reimplementation
        std::vector<int> expect;
        int prev = -1;
        for (int t = 0; t < 12; ++t) {
            int arg = 0;
            for (int k = 1; k < 6; ++k)
                if (logits.values()[static_cast<size_t>(t) * 6 + k] >
                    logits.values()[static_cast<size_t>(t) * 6 + arg])
                    arg = k;
            if (arg != 0 && arg != prev) expect.push_back(arg);
            prev = arg;
        }
        CHECK(ctc_greedy_decode(logits) == expect);
    }
}

TEST_CASE("sample_mask: ratio respected, spans contiguous, recorded exactly") {
    MaskSpec ms;
    ms.seed = 4;
    auto m = sample_mask(100, ms);
    int n = static_cast<int>(std::count(m.begin(), m.end(), 1));
    CHECK(n >= 40);
    CHECK(n < 60);
    CHECK(sample_mask(100, ms) == m);  // deterministic
    MaskSpec bad;
    bad.mask_ratio = 1.5f;
    CHECK_THROWS_AS(sample_mask(10, bad), ConfigError);
}

TEST_CASE("ssl_step: uniform predictions give ln K") {
    ConformerConfig cfg = tiny_cfg();
    SslModel model(cfg, 64, 5);
    // zero the head so logits are the bias (uniform)
    std::fill(model.head_w.values().begin(), model.head_w.values().end(), 0.0f);
    auto f = random_feats(20, cfg.input_dim, 6);
    LabelSequence labels(20, 3);
    MaskSpec ms;
    ms.seed = 1;
    OptimizerConfig oc;
    oc.learning_rate = 0.0f;  // measure the loss without moving weights
    Optimizer opt(model.store, oc);
    float loss = ssl_step(model, {{&f, &labels}}, ms, opt);
    CHECK(loss == doctest::Approx(std::log(64.0)).epsilon(1e-4));
}

TEST_CASE("ssl_step: loss equals CE recomputed over recorded masked positions") {
    ConformerConfig cfg = tiny_cfg();
    SslModel model(cfg, 8, 7);
    auto f = random_feats(15, cfg.input_dim, 8);
    Rng rng = make_rng(9);
    LabelSequence labels(15);
    for (auto& l : labels) l = std::uniform_int_distribution<int>(0, 7)(rng);
    MaskSpec ms;
    ms.seed = 2;
    OptimizerConfig oc;
    oc.learning_rate = 0.0f;
    Optimizer opt(model.store, oc);
    float loss = ssl_step(model, {{&f, &labels}}, ms, opt);

    // position-wise recomputation oracle
    GradGuard no_grad(false);
    MaskSpec item_ms = ms;
    item_ms.seed = mix_seed(ms.seed, static_cast<uint64_t>(0));
    auto mask = sample_mask(15, item_ms);
    Tensor logits = model.logits(f, mask);
    double total = 0;
    int n = 0;
    for (int t = 0; t < 15; ++t) {
        if (!mask[static_cast<size_t>(t)]) continue;
        double mx = -1e30, z = 0;
        for (int k = 0; k < 8; ++k)
            mx = std::max(mx, static_cast<double>(logits.values()[static_cast<size_t>(t) * 8 + k]));
        for (int k = 0; k < 8; ++k)
            z += std::exp(logits.values()[static_cast<size_t>(t) * 8 + k] - mx);
        total -= logits.values()[static_cast<size_t>(t) * 8 + labels[static_cast<size_t>(t)]] -
                 mx - std::log(z);
        ++n;
    }
    CHECK(loss == doctest::Approx(total / n).epsilon(1e-4));
}

TEST_CASE("ssl_step: mask embedding gradient nonzero, unmasked rows uninvolved") {
    ConformerConfig cfg = tiny_cfg();
    SslModel model(cfg, 8, 11);
    auto f = random_feats(12, cfg.input_dim, 12);
    LabelSequence labels(12, 1);
    MaskSpec ms;
    ms.seed = 3;
    OptimizerConfig oc;
    oc.learning_rate = 0.0f;
    Optimizer opt(model.store, oc);
    ssl_step(model, {{&f, &labels}}, ms, opt);
    double g = 0;
    for (float x : model.mask_emb.grad()) g += std::abs(x);
    CHECK(g > 0);

    // changing an unmasked frame's label does not change the loss
    MaskSpec item_ms = ms;
    item_ms.seed = mix_seed(ms.seed, static_cast<uint64_t>(0));
    auto mask = sample_mask(12, item_ms);
    int unmasked = -1;
    for (int t = 0; t < 12; ++t)
        if (!mask[static_cast<size_t>(t)]) unmasked = t;
    REQUIRE(unmasked >= 0);
    LabelSequence altered = labels;
    altered[static_cast<size_t>(unmasked)] = 5;
    Optimizer opt2(model.store, oc);
    float a = ssl_step(model, {{&f, &labels}}, ms, opt2);
    float b = ssl_step(model, {{&f, &altered}}, ms, opt2);
    CHECK(a == b);
}

TEST_CASE("ssl training: loss decreases over 200 steps (20-step moving average)") {
    ConformerConfig cfg = tiny_cfg();
    SslModel model(cfg, 8, 21);
    auto cb = init_random_projection(cfg.input_dim, 4, 8, 99);
    std::vector<FeatureSequence> feats;
    std::vector<LabelSequence> labels;
    for (int i = 0; i < 4; ++i) {
        feats.push_back(random_feats(18, cfg.input_dim, 100 + static_cast<uint64_t>(i)));
        labels.push_back(label_frames(feats.back(), cb));
    }
    OptimizerConfig oc;
    oc.learning_rate = 2e-3f;
    Optimizer opt(model.store, oc);
    std::vector<float> losses;
    for (int s = 0; s < 200; ++s) {
        MaskSpec ms;
        ms.seed = mix_seed(777, static_cast<uint64_t>(s));
        size_t i = static_cast<size_t>(s) % feats.size();
        losses.push_back(ssl_step(model, {{&feats[i], &labels[i]}}, ms, opt));
    }
    auto avg = [&](int from) {
        double a = 0;
        for (int s = from; s < from + 20; ++s) a += losses[static_cast<size_t>(s)];
        return a / 20;
    };
    CHECK(avg(180) < avg(0));
}

TEST_CASE("probe_layers: argmin selection and frozen encoder") {
    ConformerConfig cfg = tiny_cfg();
    ParamStore ps;
    ConformerEncoder enc(cfg, ps, 31);
    std::vector<ProbeItem> train, eval;
    Rng rng = make_rng(32);
    for (int i = 0; i < 6; ++i) {
        ProbeItem it;
        it.feats = random_feats(16, cfg.input_dim, 200 + static_cast<uint64_t>(i));
        for (int k = 0; k < 3; ++k)
            it.target.push_back(std::uniform_int_distribution<int>(1, 4)(rng));
        (i < 4 ? train : eval).push_back(std::move(it));
    }
    std::vector<std::vector<float>> before;
    for (const auto& p : ps.params()) before.push_back(p.tensor.values());
    auto report = probe_layers(enc, train, eval, 4, 50, 33);
    REQUIRE(report.per_layer_wer.size() == 2);
    for (double w : report.per_layer_wer)
        CHECK(report.per_layer_wer[static_cast<size_t>(report.selected_layer)] <= w);
    for (size_t i = 0; i < ps.params().size(); ++i)
        CHECK(ps.params()[i].tensor.values() == before[i]);  // bit-identical
    CHECK(report.to_json().find("selected_layer") != std::string::npos);
    CHECK_THROWS_AS(probe_layers(enc, {}, eval, 4, 10, 1), std::invalid_argument);
}

TEST_CASE("iterate_tokenizer: relabel matches manual recomputation") {
    ConformerConfig cfg = tiny_cfg();
    ParamStore ps;
    ConformerEncoder enc(cfg, ps, 41);
    std::vector<FeatureSequence> feats;
    std::vector<const FeatureSequence*> seqs;
    for (int i = 0; i < 3; ++i)
        feats.push_back(random_feats(14, cfg.input_dim, 300 + static_cast<uint64_t>(i)));
    for (const auto& f : feats) seqs.push_back(&f);
    auto iter = iterate_tokenizer(enc, seqs, 1, 4, 10, 42);
    CHECK(iter.codebook.source_layer == 1);
    CHECK(iter.codebook.kind == "kmeans");
    REQUIRE(iter.labels.size() == 3);
    GradGuard no_grad(false);
    for (size_t i = 0; i < seqs.size(); ++i) {
        auto rep = enc.block_output(enc.from_features(*seqs[i]), 1);
        CHECK(label_frames(rep.values(), seqs[i]->T, cfg.width, iter.codebook) ==
              iter.labels[i]);
    }
}
