#include "acllm/mwer.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace acllm {

double hypothesis_reward(const std::vector<std::string>& ref,
                         const std::vector<std::string>& hyp,
                         const std::vector<std::vector<std::string>>& keywords,
                         const RewardSpec& spec) {
    if (spec.kind == "wer") return edit_distance(ref, hyp).rate();
    if (spec.kind == "weighted_wer") {
        if (spec.keyword_weight < 1)
            throw std::invalid_argument("reward: keyword_weight must be >= 1");
        return weighted_wer(ref, hyp, keywords, spec.keyword_weight);
    }
    throw std::invalid_argument("reward: unknown kind " + spec.kind);
}

double mwer_term(const std::vector<double>& logps, const std::vector<double>& rewards) {
    const size_t n = logps.size();
    if (n < 2 || rewards.size() != n)
        throw std::invalid_argument("mwer_term: need >= 2 matching hypotheses");
    double mx = logps[0];
    for (double l : logps) mx = std::max(mx, l);
    double z = 0;
    for (double l : logps) z += std::exp(l - mx);
    double wbar = 0;
    for (double w : rewards) wbar += w;
    wbar /= static_cast<double>(n);
    double term = 0;
    for (size_t i = 0; i < n; ++i)
        term += std::exp(logps[i] - mx) / z * (rewards[i] - wbar);
    return term / static_cast<double>(n);
}

Tensor mwer_loss(const AcllmModel& m, const FeatureSequence& f,
                 const std::vector<int>& context,
                 const std::vector<std::vector<int>>& hyp_tokens,
                 const std::vector<double>& rewards,
                 const std::vector<int>& ref_transcript, float lambda) {
    const size_t n = hyp_tokens.size();
    if (n < 2) throw std::invalid_argument("mwer_loss: need >= 2 hypotheses");
    if (rewards.size() != n)
        throw std::invalid_argument("mwer_loss: rewards/hypotheses mismatch");
    for (const auto& h : hyp_tokens)
        if (h.empty()) throw std::invalid_argument("mwer_loss: empty hypothesis");

    std::vector<Tensor> logps;
    for (const auto& h : hyp_tokens) {
        // item_loss is mean CE over the |h|+1 scored positions, so the total
        // hypothesis log-prob is minus that mean times the position count
        Tensor ce = m.item_loss(f, h, context);
        logps.push_back(scale(ce, -static_cast<float>(h.size() + 1)));
    }
    Tensor p = softmax_rows(stack_scalars(logps));
    double wbar = 0;
    for (double w : rewards) wbar += w;
    wbar /= static_cast<double>(n);
    std::vector<float> rel(n);
    for (size_t i = 0; i < n; ++i)
        rel[i] = static_cast<float>((rewards[i] - wbar) / static_cast<double>(n));
    Tensor term = dot_const(p, rel);
    Tensor ce_ref = m.item_loss(f, ref_transcript, context);
    return add(term, scale(ce_ref, lambda));
}

// ---------------------------------------------------------------------------
// hypothesis service

HypothesisService::HypothesisService(const AcllmConfig& cfg, const TextVocab& vocab,
                                     int max_staleness_steps)
    : max_staleness_(max_staleness_steps) {
    if (max_staleness_ < 0)
        throw std::invalid_argument("service: max_staleness_steps >= 0");
    snapshot_ = std::make_unique<AcllmModel>(cfg, vocab, 1);
}

void HypothesisService::publish(const ParamStore& trainer_store, int trainer_step) {
    std::lock_guard<std::mutex> lk(mu_);
    for (const auto& p : trainer_store.params()) {
        Parameter* dst = snapshot_->store.find(p.name);
        if (!dst) throw std::invalid_argument("service: unknown parameter " + p.name);
        dst->tensor.impl->v = p.tensor.impl->v;
    }
    ++version_;
    published_step_ = trainer_step;
}

bool HypothesisService::fresh(int trainer_step) const {
    std::lock_guard<std::mutex> lk(mu_);
    return version_ > 0 && trainer_step - published_step_ <= max_staleness_;
}

int HypothesisService::snapshot_version() const {
    std::lock_guard<std::mutex> lk(mu_);
    return version_;
}

ServiceResponse HypothesisService::request(const ServiceRequest& r, int trainer_step,
                                           int beam_size, int max_len) const {
    std::lock_guard<std::mutex> lk(mu_);
    if (version_ == 0 || trainer_step - published_step_ > max_staleness_)
        throw std::runtime_error("service: snapshot stale, publish required");
    if (!r.feats) throw std::invalid_argument("service: request without features");
    GradGuard no_grad(false);
    ServiceResponse resp;
    resp.id = r.id;
    resp.snapshot_version = version_;
    AcllmSeqModel sm(*snapshot_, *r.feats, r.context);
    resp.nbest = beam_search(sm, beam_size, max_len, r.n);
    return resp;
}

// ---------------------------------------------------------------------------
// RL loop

namespace {

std::vector<std::string> token_strings(const TextVocab& v, const std::vector<int>& ids) {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(v.text(id));
    return out;
}

}  // namespace

RlReport rl_train(AcllmModel& m, const std::vector<RlItem>& items,
                  const RlConfig& cfg, HypothesisService& svc, Optimizer& opt) {
    if (items.empty()) throw std::invalid_argument("rl_train: empty item list");
    if (!m.lm_frozen()) throw ConfigError("rl_train: LM must be frozen");
    if (cfg.nbest < 2) throw std::invalid_argument("rl_train: nbest >= 2");

    RlReport report;
    for (int step = cfg.start_step; step < cfg.steps; ++step) {
        if (!svc.fresh(step)) {
            svc.publish(m.store, step);
            ++report.publishes;
        }
        Rng rng = make_rng(mix_seed(cfg.seed, static_cast<uint64_t>(step)));
        const RlItem& it = items[rng() % items.size()];

        ServiceRequest req;
        req.id = "step-" + std::to_string(step);
        req.feats = it.feats;
        req.context = it.context;
        req.n = cfg.nbest;
        ServiceResponse resp = svc.request(req, step, cfg.beam_size, cfg.max_len);

        std::vector<std::vector<int>> hyps;
        std::set<std::vector<int>> seen;
        for (const auto& h : resp.nbest.hyps)
            if (!h.tokens.empty() && seen.insert(h.tokens).second)
                hyps.push_back(h.tokens);

        Tensor loss = [&] {
            if (hyps.size() < 2) {
                ++report.ce_only_steps;
                return m.item_loss(*it.feats, it.transcript, it.context);
            }
            std::vector<std::string> ref = token_strings(m.vocab, it.transcript);
            std::vector<double> rewards;
            for (const auto& h : hyps)
                rewards.push_back(hypothesis_reward(ref, token_strings(m.vocab, h),
                                                    it.keywords, cfg.reward));
            return mwer_loss(m, *it.feats, it.context, hyps, rewards,
                             it.transcript, cfg.lambda);
        }();
        opt.zero_grad();
        loss.backward();
        opt.step();
        report.losses.push_back(loss.item());
    }
    return report;
}

}  // namespace acllm
