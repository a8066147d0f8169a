#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "acllm/model.hpp"

using namespace acllm;

namespace {

AcllmConfig tiny_acllm() {
    AcllmConfig cfg;
    cfg.enc.input_dim = 6;
    cfg.enc.width = 8;
    cfg.enc.depth = 2;
    cfg.enc.heads = 2;
    cfg.lm_width = 8;
    cfg.lm_depth = 2;
    cfg.lm_heads = 2;
    return cfg;
}

TextVocab tiny_vocab() {
    CorpusSpec spec;
    spec.n_wordlike = 10;
    spec.n_charlike = 4;
    spec.n_homophone_groups = 2;
    Lexicon lex = build_lexicon(spec, 3);
    return TextVocab::build(lex, 2);
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

double row_log_softmax_at(const std::vector<float>& logits, size_t row, int V, int k) {
    const float* r = logits.data() + row * static_cast<size_t>(V);
    double mx = r[0];
    for (int j = 1; j < V; ++j) mx = std::max(mx, static_cast<double>(r[j]));
    double z = 0;
    for (int j = 0; j < V; ++j) z += std::exp(r[j] - mx);
    return r[k] - mx - std::log(z);
}

}  // namespace

TEST_CASE("vocab: specials, round trips, unknown token") {
    TextVocab v = tiny_vocab();
    CHECK(v.id("<bos>") == TextVocab::BOS);
    CHECK(v.id("<eos>") == TextVocab::EOS);
    CHECK(v.id("<sil>") == TextVocab::SIL);
    CHECK(v.size() <= 256);
    for (const auto& w : error_units(kCtxInstruction, "wordlike")) CHECK(v.contains(w));
    CHECK(v.group_token(0) != v.group_token(1));
    CHECK_THROWS_AS(v.group_token(2), std::out_of_range);
    CHECK_THROWS_AS(v.id("definitely-not-a-token"), std::out_of_range);

    auto ids = v.tokenize("Transcribe the speech", "wordlike");
    CHECK(v.detokenize(ids, "wordlike") == "Transcribe the speech");
    // charlike round trip over the single-character surfaces
    CorpusSpec spec;
    spec.n_wordlike = 10;
    spec.n_charlike = 4;
    spec.n_homophone_groups = 2;
    Lexicon lex = build_lexicon(spec, 3);
    std::string chars;
    for (const auto& w : lex.words)
        if (w.language == "charlike") chars += w.surface;
    auto cids = v.tokenize(chars, "charlike");
    CHECK(cids.size() == chars.size());
    CHECK(v.detokenize(cids, "charlike") == chars);
}

TEST_CASE("prompt layout: loss mask covers transcript + final EOS only") {
    TextVocab v = tiny_vocab();
    std::vector<int> tr = {v.group_token(0), TextVocab::SIL, v.group_token(1)};
    PromptLayout L = build_prompt(v, {}, tr, 5);
    int masked = 0;
    for (size_t i = 0; i < L.loss_mask.size(); ++i) masked += L.loss_mask[i];
    CHECK(masked == static_cast<int>(tr.size()) + 1);
    CHECK(L.tokens.back() == TextVocab::EOS);
    CHECK(L.loss_mask.back() == 1);
    CHECK(L.audio_len == 5);
    for (int i = 0; i < 5; ++i) CHECK(L.tokens[static_cast<size_t>(L.audio_begin + i)] == -1);
    CHECK(L.tokens[static_cast<size_t>(L.audio_begin - 1)] == TextVocab::AUDIO_BEGIN);
    CHECK(L.tokens[static_cast<size_t>(L.audio_begin + 5)] == TextVocab::AUDIO_END);
    // plain instruction bytes
    auto instr = v.tokenize(kInstruction, "wordlike");
    for (size_t i = 0; i < instr.size(); ++i)
        CHECK(L.tokens[1 + i] == instr[i]);
    // transcript segment detokenizes to the reference
    std::vector<int> seg(L.tokens.begin() + L.transcript_begin, L.tokens.end() - 1);
    CHECK(seg == tr);
    CHECK(L.to_json().find("loss_mask") != std::string::npos);
}

TEST_CASE("prompt layout: context variant") {
    TextVocab v = tiny_vocab();
    std::vector<int> ctx = v.tokenize("earlier we spoke about", "wordlike");
    std::vector<int> tr = {v.group_token(0)};
    PromptLayout L = build_prompt(v, ctx, tr, 3);
    CHECK(L.tokens[1] == TextVocab::CTX_BEGIN);
    CHECK(L.tokens[2 + ctx.size()] == TextVocab::CTX_END);
    // loss mask never covers context
    for (size_t i = 0; i < static_cast<size_t>(L.transcript_begin); ++i)
        CHECK(L.loss_mask[i] == 0);
    // context instruction follows the CTX block
    auto instr = v.tokenize(kCtxInstruction, "wordlike");
    size_t at = 3 + ctx.size();
    for (size_t i = 0; i < instr.size(); ++i) CHECK(L.tokens[at + i] == instr[i]);
    CHECK_THROWS_AS(build_prompt(v, ctx, {}, 3), std::invalid_argument);
}

TEST_CASE("convert: splice arithmetic and identity projection") {
    AcllmConfig cfg = tiny_acllm();
    cfg.enc.width = 16;
    cfg.lm_width = 64;  // = splice * width, square projection
    AcllmModel m(cfg, tiny_vocab(), 1);
    Rng rng = make_rng(2);
    Tensor enc8 = Tensor::randn({8, 16}, 1.0f, rng);
    CHECK(m.convert(enc8).rows() == 2);
    Tensor enc7 = Tensor::randn({7, 16}, 1.0f, rng);
    CHECK(m.convert(enc7).rows() == 2);
    CHECK(m.convert(enc8).cols() == 64);

    // identity projection reproduces the raw concatenation
    std::fill(m.conv_w.values().begin(), m.conv_w.values().end(), 0.0f);
    for (int i = 0; i < 64; ++i) m.conv_w.values()[static_cast<size_t>(i) * 64 + i] = 1.0f;
    Tensor out = m.convert(enc8);
    for (int t = 0; t < 2; ++t)
        for (int j = 0; j < 64; ++j)
            CHECK(out.values()[static_cast<size_t>(t) * 64 + j] ==
                  doctest::Approx(enc8.values()[static_cast<size_t>(t) * 64 + j]));
}

TEST_CASE("item_loss: CE recomputed over exactly |transcript|+1 positions") {
    AcllmConfig cfg = tiny_acllm();
    TextVocab v = tiny_vocab();
    AcllmModel m(cfg, v, 7);
    auto f = random_feats(10, cfg.enc.input_dim, 8);
    std::vector<int> tr = {v.group_token(0), TextVocab::SIL};
    GradGuard no_grad(false);
    float loss = m.item_loss(f, tr, {}).item();

    // manual recomputation from the forward logits
    Tensor audio = m.audio_embeddings(f);
    PromptLayout L = build_prompt(v, {}, tr, audio.rows());
    std::vector<int> prefix(L.tokens.begin(), L.tokens.begin() + L.audio_begin);
    std::vector<int> suffix(L.tokens.begin() + L.audio_begin + L.audio_len,
                            L.tokens.end());
    Tensor embs = concat_rows({m.lm->embed(prefix), audio, m.lm->embed(suffix)});
    Tensor logits = m.lm->forward_embs(embs);
    double total = 0;
    int n = 0;
    for (int i = 0; i + 1 < L.length(); ++i)
        if (L.loss_mask[static_cast<size_t>(i + 1)]) {
            total -= row_log_softmax_at(logits.values(), static_cast<size_t>(i),
                                        v.size(), L.tokens[static_cast<size_t>(i + 1)]);
            ++n;
        }
    CHECK(n == static_cast<int>(tr.size()) + 1);
    CHECK(loss == doctest::Approx(total / n).epsilon(1e-4));
}

TEST_CASE("sft_step: frozen LM bytes and pure-text logits unchanged") {
    AcllmConfig cfg = tiny_acllm();
    TextVocab v = tiny_vocab();
    AcllmModel m(cfg, v, 9);
    m.set_lm_frozen(true);
    std::vector<std::vector<float>> lm_before;
    for (const auto& p : m.store.params())
        if (p.name.rfind("lm/", 0) == 0) lm_before.push_back(p.tensor.values());
    std::vector<int> probe = {TextVocab::BOS, v.group_token(0), TextVocab::SIL};
    GradGuard* guard = nullptr;
    std::vector<float> probe_logits_before;
    {
        GradGuard no_grad(false);
        probe_logits_before = m.lm->forward_embs(m.lm->embed(probe)).values();
    }
    (void)guard;

    auto f = random_feats(12, cfg.enc.input_dim, 10);
    std::vector<SftItem> batch(1);
    batch[0].feats = &f;
    batch[0].transcript = {v.group_token(1)};
    OptimizerConfig oc;
    oc.learning_rate = 1e-3f;
    Optimizer opt(m.store, oc);
    for (int s = 0; s < 10; ++s) sft_step(m, batch, opt);

    size_t i = 0;
    for (const auto& p : m.store.params())
        if (p.name.rfind("lm/", 0) == 0) CHECK(p.tensor.values() == lm_before[i++]);
    {
        GradGuard no_grad(false);
        CHECK(m.lm->forward_embs(m.lm->embed(probe)).values() == probe_logits_before);
    }

    // converter moved (nonzero gradient path)
    double g = 0;
    for (float x : m.conv_w.grad()) g += std::abs(x);
    CHECK(g > 0);
}

TEST_CASE("sft_step / context_sft_step: preconditions") {
    AcllmConfig cfg = tiny_acllm();
    TextVocab v = tiny_vocab();
    AcllmModel m(cfg, v, 11);
    auto f = random_feats(8, cfg.enc.input_dim, 12);
    OptimizerConfig oc;
    Optimizer opt(m.store, oc);

    std::vector<SftItem> plain(1);
    plain[0].feats = &f;
    plain[0].transcript = {v.group_token(0)};
    CHECK_THROWS_AS(sft_step(m, plain, opt), ConfigError);  // LM not frozen
    m.set_lm_frozen(true);

    std::vector<SftItem> empty_tr(1);
    empty_tr[0].feats = &f;
    CHECK_THROWS_AS(sft_step(m, empty_tr, opt), std::invalid_argument);

    std::vector<SftItem> triple(1);
    triple[0].feats = &f;
    triple[0].transcript = {v.group_token(0)};
    triple[0].triple = true;
    triple[0].context = v.tokenize("earlier we spoke about", "wordlike");
    CHECK_THROWS_AS(sft_step(m, triple, opt), std::invalid_argument);
    CHECK_THROWS_AS(context_sft_step(m, triple, 1.0f, opt), ConfigError);

    std::vector<SftItem> broken = triple;
    broken[0].context.clear();
    CHECK_THROWS_AS(context_sft_step(m, broken, 0.3f, opt), std::invalid_argument);

    CHECK(context_sft_step(m, triple, 0.3f, opt) > 0.0f);
}

TEST_CASE("dual route: teacher-forced logprobs equal stepwise cache decode") {
    AcllmConfig cfg = tiny_acllm();
    TextVocab v = tiny_vocab();
    AcllmModel m(cfg, v, 13);
    auto f = random_feats(9, cfg.enc.input_dim, 14);
    std::vector<int> ctx = v.tokenize("recall the notes about", "wordlike");
    std::vector<int> tr = {v.group_token(0), TextVocab::SIL, v.group_token(1)};
    GradGuard no_grad(false);

    Tensor audio = m.audio_embeddings(f);
    PromptLayout L = build_prompt(v, ctx, tr, audio.rows());
    std::vector<int> prefix(L.tokens.begin(), L.tokens.begin() + L.audio_begin);
    std::vector<int> suffix(L.tokens.begin() + L.audio_begin + L.audio_len,
                            L.tokens.end());
    Tensor embs = concat_rows({m.lm->embed(prefix), audio, m.lm->embed(suffix)});
    Tensor logits = m.lm->forward_embs(embs);

    LmKvCache cache = m.lm->make_cache();
    const int W = m.lm->width();
    std::vector<std::vector<float>> step_logits;
    for (int i = 0; i + 1 < L.length(); ++i)
        step_logits.push_back(m.lm->step(cache, embs.values().data() +
                                                    static_cast<size_t>(i) * W));

    for (int i = 0; i + 1 < L.length(); ++i) {
        if (!L.loss_mask[static_cast<size_t>(i + 1)]) continue;
        int tok = L.tokens[static_cast<size_t>(i + 1)];
        double graph = row_log_softmax_at(logits.values(), static_cast<size_t>(i),
                                          v.size(), tok);
        double stepped = row_log_softmax_at(step_logits[static_cast<size_t>(i)], 0,
                                            v.size(), tok);
        CHECK(graph == doctest::Approx(stepped).epsilon(1e-4));
    }
}

TEST_CASE("pretrain_lm: beats its init and the unigram oracle, deterministic") {
    // toy language: deterministic bigram chains are learnable, unigram is not
    TextVocab v = tiny_vocab();
    std::vector<std::vector<int>> corpus, heldout;
    Rng rng = make_rng(15);
    const int V = v.size();
    std::uniform_int_distribution<int> start(7, V - 1);
    for (int i = 0; i < 60; ++i) {
        std::vector<int> seq = {TextVocab::BOS};
        int t = start(rng);
        for (int k = 0; k < 8; ++k) {
            seq.push_back(t);
            t = 7 + (t * 3 + 1) % (V - 7);  // fixed successor function
        }
        seq.push_back(TextVocab::EOS);
        (i < 50 ? corpus : heldout).push_back(seq);
    }
    auto run = [&](uint64_t seed) {
        ParamStore ps;
        DecoderLM lm(V, 16, 2, 2, 2, ps, seed);
        auto report = pretrain_lm(lm, ps, corpus, heldout, 150, 4, 5e-3f, seed);
        std::vector<float> emb = ps.params()[0].tensor.values();
        return std::make_tuple(report, emb);
    };
    auto [report, emb1] = run(99);
    CHECK(report.ppl_final < report.ppl_init);
    CHECK(report.ppl_final < report.ppl_unigram);
    auto [report2, emb2] = run(99);
    CHECK(emb1 == emb2);
    CHECK(report2.ppl_final == report.ppl_final);

    ParamStore ps;
    DecoderLM lm(V, 16, 2, 2, 2, ps, 1);
    CHECK_THROWS_AS(pretrain_lm(lm, ps, {}, heldout, 10, 2, 1e-3f, 1),
                    std::invalid_argument);
}

TEST_CASE("composite SFT loss gradient check (converter + one encoder norm)") {
    AcllmConfig cfg = tiny_acllm();
    TextVocab v = tiny_vocab();
    AcllmModel m(cfg, v, 17);
    auto f = random_feats(7, cfg.enc.input_dim, 18);
    std::vector<int> tr = {v.group_token(0), v.group_token(1)};
    // freeze everything except the converter and one layernorm so finite
    // differences stay cheap; gradients still flow through the whole stack
    for (auto& p : m.store.params())
        if (p.name != "conv/w" && p.name != "conv/b" && p.name != "enc/b0/ln_ffn_g")
            p.set_frozen(true);
    auto loss = [&]() { return m.item_loss(f, tr, {}); };
    CHECK(grad_check(loss, m.store) < 1e-3);
}
