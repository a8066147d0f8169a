#include "acllm/decode.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace acllm {

namespace {

std::vector<float> log_softmax(const std::vector<float>& logits) {
    float mx = logits[0];
    for (float x : logits) mx = std::max(mx, x);
    double z = 0;
    for (float x : logits) z += std::exp(x - mx);
    const float lz = mx + static_cast<float>(std::log(z));
    std::vector<float> out(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
    return out;
}

struct BeamItem {
    Hypothesis hyp;
    std::unique_ptr<SeqModel::State> primary;  // context pass when present
    std::unique_ptr<SeqModel::State> other;    // context-free pass, if distinct
};

struct Candidate {
    size_t parent;
    int token;
    double score;
    double lp_primary, lp_other;
};

bool better(const Candidate& a, const Candidate& b,
            const std::vector<BeamItem>& items) {
    if (a.score != b.score) return a.score > b.score;
    // lexicographically smallest extended token sequence wins ties
    const auto& ta = items[a.parent].hyp.tokens;
    const auto& tb = items[b.parent].hyp.tokens;
    size_t na = ta.size() + 1, nb = tb.size() + 1;
    for (size_t i = 0; i < std::min(na, nb); ++i) {
        int xa = i < ta.size() ? ta[i] : a.token;
        int xb = i < tb.size() ? tb[i] : b.token;
        if (xa != xb) return xa < xb;
    }
    return na < nb;
}

bool hyp_better(const Hypothesis& a, const Hypothesis& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.tokens < b.tokens;
}

// Shared advance logic: clone parent states, push the token, bookkeep both
// conditionings and the finished flag.
BeamItem extend(const SeqModel& m, const BeamItem& parent, const Candidate& c,
                bool has_ctx, double ranking_score) {
    BeamItem it;
    it.hyp = parent.hyp;
    it.hyp.tokens.push_back(c.token);
    it.hyp.score = ranking_score;
    if (has_ctx) {
        it.hyp.logp_ctx = parent.hyp.logp_ctx + c.lp_primary;
        it.hyp.logp_noctx = parent.hyp.logp_noctx + c.lp_other;
    } else {
        it.hyp.logp_noctx = parent.hyp.logp_noctx + c.lp_primary;
        it.hyp.logp_ctx = it.hyp.logp_noctx;
    }
    if (c.token == m.eos()) {
        it.hyp.finished = true;
        it.hyp.tokens.pop_back();  // EOS is bookkept, not emitted
        return it;
    }
    it.primary = parent.primary->clone();
    m.advance(*it.primary, c.token);
    if (parent.other) {
        it.other = parent.other->clone();
        m.advance(*it.other, c.token);
    }
    return it;
}

NBestList finalize(std::vector<Hypothesis> finished, std::vector<BeamItem>& beam,
                   int nbest) {
    NBestList out;
    if (finished.empty()) {
        out.fallback_unfinished = true;
        for (auto& it : beam) finished.push_back(it.hyp);
    }
    std::sort(finished.begin(), finished.end(), hyp_better);
    if (static_cast<int>(finished.size()) > nbest) finished.resize(static_cast<size_t>(nbest));
    out.hyps = std::move(finished);
    return out;
}

}  // namespace

double joint_score(const Hypothesis& h, double alpha) {
    if (alpha < 0) throw std::invalid_argument("joint_score: alpha must be >= 0");
    const double wc = alpha / (1.0 + alpha);
    return wc * h.logp_ctx + (1.0 - wc) * h.logp_noctx;
}

NBestList beam_search(const SeqModel& m, int beam_size, int max_len, int nbest) {
    if (beam_size < 1) throw std::invalid_argument("beam_search: beam_size >= 1");
    const bool has_ctx = m.has_context();
    std::vector<BeamItem> beam(1);
    beam[0].primary = m.start(has_ctx);
    if (has_ctx) beam[0].other = m.start(false);
    std::vector<Hypothesis> finished;

    for (int step = 0; step < max_len && !beam.empty(); ++step) {
        std::vector<Candidate> cands;
        for (size_t i = 0; i < beam.size(); ++i) {
            auto lp = m.logprobs(*beam[i].primary);
            std::vector<float> lo;
            if (beam[i].other) lo = m.logprobs(*beam[i].other);
            for (int tok = 0; tok < m.vocab_size(); ++tok) {
                Candidate c;
                c.parent = i;
                c.token = tok;
                c.lp_primary = lp[static_cast<size_t>(tok)];
                c.lp_other = beam[i].other ? lo[static_cast<size_t>(tok)] : c.lp_primary;
                c.score = beam[i].hyp.score + c.lp_primary;
                cands.push_back(c);
            }
        }
        std::sort(cands.begin(), cands.end(),
                  [&](const Candidate& a, const Candidate& b) {
                      return better(a, b, beam);
                  });
        std::vector<BeamItem> next;
        for (const auto& c : cands) {
            if (static_cast<int>(next.size()) >= beam_size) break;
            BeamItem it = extend(m, beam[c.parent], c, has_ctx, c.score);
            if (it.hyp.finished)
                finished.push_back(it.hyp);
            else
                next.push_back(std::move(it));
        }
        beam = std::move(next);
    }
    return finalize(std::move(finished), beam, nbest);
}

NBestList joint_beam_search(const SeqModel& m, const JointConfig& cfg) {
    if (!m.has_context())
        throw std::invalid_argument("joint_beam_search: context required");
    if (cfg.alpha < 0) throw std::invalid_argument("joint_beam_search: alpha >= 0");
    if (cfg.beam_size < 1) throw std::invalid_argument("joint_beam_search: beam_size >= 1");
    if (cfg.prune_top_k < 1 || cfg.prune_top_k > m.vocab_size())
        throw std::invalid_argument("joint_beam_search: prune_top_k out of range");
    const double wc = cfg.alpha / (1.0 + cfg.alpha);

    std::vector<BeamItem> beam(1);
    beam[0].primary = m.start(true);
    beam[0].other = m.start(false);
    std::vector<Hypothesis> finished;

    for (int step = 0; step < cfg.max_len && !beam.empty(); ++step) {
        std::vector<Candidate> cands;
        for (size_t i = 0; i < beam.size(); ++i) {
            auto lpc = m.logprobs(*beam[i].primary);
            auto lpn = m.logprobs(*beam[i].other);
            // acoustic pruning: survivors are the top-k context-free tokens
            std::vector<int> order(static_cast<size_t>(m.vocab_size()));
            for (int t = 0; t < m.vocab_size(); ++t) order[static_cast<size_t>(t)] = t;
            std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                return lpn[static_cast<size_t>(a)] > lpn[static_cast<size_t>(b)];
            });
            for (int k = 0; k < cfg.prune_top_k; ++k) {
                int tok = order[static_cast<size_t>(k)];
                Candidate c;
                c.parent = i;
                c.token = tok;
                c.lp_primary = lpc[static_cast<size_t>(tok)];
                c.lp_other = lpn[static_cast<size_t>(tok)];
                c.score = beam[i].hyp.score + wc * c.lp_primary + (1.0 - wc) * c.lp_other;
                cands.push_back(c);
            }
        }
        std::sort(cands.begin(), cands.end(),
                  [&](const Candidate& a, const Candidate& b) {
                      return better(a, b, beam);
                  });
        std::vector<BeamItem> next;
        for (const auto& c : cands) {
            if (static_cast<int>(next.size()) >= cfg.beam_size) break;
            BeamItem it = extend(m, beam[c.parent], c, true, c.score);
            if (it.hyp.finished)
                finished.push_back(it.hyp);
            else
                next.push_back(std::move(it));
        }
        beam = std::move(next);
    }
    return finalize(std::move(finished), beam, cfg.beam_size);
}

// ---------------------------------------------------------------------------
// model adapter

struct AcllmSeqModel::CacheState : SeqModel::State {
    LmKvCache cache;
    std::vector<float> pending;  // next-token logprobs

    std::unique_ptr<State> clone() const override {
        return std::make_unique<CacheState>(*this);
    }
};

AcllmSeqModel::AcllmSeqModel(const AcllmModel& m, const FeatureSequence& f,
                             std::vector<int> context, int max_positions)
    : model_(m), context_(std::move(context)) {
    GradGuard no_grad(false);
    Tensor audio = m.audio_embeddings(f);
    const int W = m.lm->width();

    auto prefill = [&](bool with_ctx) {
        auto st = std::make_unique<CacheState>();
        st->cache = m.lm->make_cache();
        std::vector<int> pre = {TextVocab::BOS};
        if (with_ctx) {
            pre.push_back(TextVocab::CTX_BEGIN);
            pre.insert(pre.end(), context_.begin(), context_.end());
            pre.push_back(TextVocab::CTX_END);
        }
        const char* instr = with_ctx ? kCtxInstruction : kInstruction;
        for (int id : m.vocab.tokenize(instr, "wordlike")) pre.push_back(id);
        pre.push_back(TextVocab::AUDIO_BEGIN);

        std::vector<float> logits;
        for (int tok : pre) {
            auto emb = m.lm->embedding_row(tok);
            logits = m.lm->step(st->cache, emb.data());
        }
        for (int t = 0; t < audio.rows(); ++t)
            logits = m.lm->step(st->cache,
                                audio.values().data() + static_cast<size_t>(t) * W);
        auto end_emb = m.lm->embedding_row(TextVocab::AUDIO_END);
        logits = m.lm->step(st->cache, end_emb.data());
        st->pending = log_softmax(logits);
        return st;
    };

    base_noctx_ = prefill(false);
    prompt_len_noctx_ = static_cast<CacheState*>(base_noctx_.get())->cache.len;
    if (!context_.empty()) {
        base_ctx_ = prefill(true);
        prompt_len_ctx_ = static_cast<CacheState*>(base_ctx_.get())->cache.len;
    } else {
        prompt_len_ctx_ = prompt_len_noctx_;
    }
    if (max_positions > 0 &&
        std::max(prompt_len_ctx_, prompt_len_noctx_) > max_positions)
        throw std::invalid_argument("decode: prompt exceeds max positions");
}

int AcllmSeqModel::vocab_size() const { return model_.lm->vocab_size(); }

std::unique_ptr<SeqModel::State> AcllmSeqModel::start(bool with_context) const {
    if (with_context && base_ctx_) return base_ctx_->clone();
    return base_noctx_->clone();
}

std::vector<float> AcllmSeqModel::logprobs(const State& s) const {
    return static_cast<const CacheState&>(s).pending;
}

void AcllmSeqModel::advance(State& s, int token) const {
    auto& st = static_cast<CacheState&>(s);
    auto emb = model_.lm->embedding_row(token);
    st.pending = log_softmax(model_.lm->step(st.cache, emb.data()));
}

int AcllmSeqModel::prompt_length(bool with_context) const {
    return with_context ? prompt_len_ctx_ : prompt_len_noctx_;
}

NBestList decode_utterance(const AcllmModel& m, const FeatureSequence& f,
                           const std::vector<int>& context, int beam_size,
                           int max_len, int nbest) {
    AcllmSeqModel sm(m, f, context);
    return beam_search(sm, beam_size, max_len, nbest);
}

NBestList decode_joint(const AcllmModel& m, const FeatureSequence& f,
                       const std::vector<int>& context, const JointConfig& cfg) {
    AcllmSeqModel sm(m, f, context);
    return joint_beam_search(sm, cfg);
}

// ---------------------------------------------------------------------------
// long-form

std::vector<uint8_t> vad_silence_mask(const FeatureSequence& f) {
    std::vector<float> mean(static_cast<size_t>(f.T));
    float lo = 1e30f, hi = -1e30f;
    for (int t = 0; t < f.T; ++t) {
        float s = 0;
        for (int d = 0; d < f.D; ++d) s += f.row(t)[d];
        mean[static_cast<size_t>(t)] = s / f.D;
        lo = std::min(lo, mean[static_cast<size_t>(t)]);
        hi = std::max(hi, mean[static_cast<size_t>(t)]);
    }
    const float thresh = lo + 0.3f * (hi - lo);
    std::vector<uint8_t> silent(static_cast<size_t>(f.T));
    for (int t = 0; t < f.T; ++t)
        silent[static_cast<size_t>(t)] = mean[static_cast<size_t>(t)] < thresh ? 1 : 0;
    return silent;
}

LongformResult decode_longform(const AcllmModel& m, const FeatureSequence& f,
                               const std::string& mode, int beam_size,
                               int max_positions, int vad_min_run) {
    auto decode_span = [&](int b, int e) {
        FeatureSequence seg;
        seg.T = e - b;
        seg.D = f.D;
        seg.frames.assign(f.frames.begin() + static_cast<size_t>(b) * f.D,
                          f.frames.begin() + static_cast<size_t>(e) * f.D);
        AcllmSeqModel sm(m, seg, {}, mode == "unsegmented" ? max_positions : 0);
        int max_len = seg.T / 8 + 8;
        NBestList nb = beam_search(sm, beam_size, max_len, 1);
        return m.vocab.detokenize(nb.hyps.at(0).tokens, "wordlike");
    };

    LongformResult out;
    if (mode == "unsegmented") {
        out.segments.push_back({0, f.T});
        out.transcript = decode_span(0, f.T);
        return out;
    }
    if (mode != "vad_segmented")
        throw std::invalid_argument("decode_longform: unknown mode " + mode);

    auto silent = vad_silence_mask(f);
    // separators are silence runs >= vad_min_run
    std::vector<std::pair<int, int>> spans;
    int t = 0;
    while (t < f.T) {
        if (silent[static_cast<size_t>(t)]) {
            int r = t;
            while (r < f.T && silent[static_cast<size_t>(r)]) ++r;
            t = r;
            continue;
        }
        int b = t;
        while (t < f.T) {
            if (!silent[static_cast<size_t>(t)]) {
                ++t;
                continue;
            }
            int r = t;
            while (r < f.T && silent[static_cast<size_t>(r)]) ++r;
            if (r - t >= vad_min_run) break;  // separator: end of span
            t = r;
        }
        spans.push_back({b, t});
    }
    if (spans.empty()) spans.push_back({0, f.T});
    for (const auto& [b, e] : spans) {
        std::string part = decode_span(b, e);
        if (!out.transcript.empty() && !part.empty()) out.transcript += ' ';
        out.transcript += part;
        out.segments.push_back({b, e});
    }
    return out;
}

std::string nbest_to_jsonl(const std::string& id, const NBestList& nbest,
                           const TextVocab& vocab, const std::string& language,
                           double alpha) {
    std::string out;
    for (size_t r = 0; r < nbest.hyps.size(); ++r) {
        const auto& h = nbest.hyps[r];
        nlohmann::json j = {{"id", id},
                            {"rank", r},
                            {"tokens", h.tokens},
                            {"text", vocab.detokenize(h.tokens, language)},
                            {"logp_ctx", h.logp_ctx},
                            {"logp_noctx", h.logp_noctx},
                            {"joint_score", joint_score(h, alpha)}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

}  // namespace acllm
