#pragma once

#include <mutex>

#include "acllm/decode.hpp"
#include "acllm/metrics.hpp"

namespace acllm {

// Sequence-level training: N-best hypotheses are scored by an error-rate
// reward and the model is pushed toward the low-reward ones, interpolated
// with the usual cross entropy.

struct RewardSpec {
    std::string kind = "wer";  // "wer" | "weighted_wer"
    double keyword_weight = 3.0;
};

// Reward of one hypothesis against the reference, in the chosen metric.
// kind "wer" ignores keywords and equals weighted_wer with weight 1.
double hypothesis_reward(const std::vector<std::string>& ref,
                         const std::vector<std::string>& hyp,
                         const std::vector<std::vector<std::string>>& keywords,
                         const RewardSpec& spec);

// Relative-reward expectation over an N-best: (1/N) sum p_i (W_i - Wbar)
// with p = softmax(logps) and Wbar the mean reward. Scalar form for oracles.
double mwer_term(const std::vector<double>& logps, const std::vector<double>& rewards);

// Differentiable loss: hypothesis log-probs are recomputed through the graph
// by teacher-forcing each hypothesis, then the relative-reward term is added
// to lambda times the reference cross entropy. Needs >= 2 non-empty
// hypotheses.
Tensor mwer_loss(const AcllmModel& m, const FeatureSequence& f,
                 const std::vector<int>& context,
                 const std::vector<std::vector<int>>& hyp_tokens,
                 const std::vector<double>& rewards,
                 const std::vector<int>& ref_transcript, float lambda);

struct ServiceRequest {
    std::string id;
    const FeatureSequence* feats = nullptr;
    std::vector<int> context;
    int n = 4;
};

struct ServiceResponse {
    std::string id;
    int snapshot_version = 0;
    NBestList nbest;
};

// Decoupled hypothesis generator: holds a read-only weight snapshot behind a
// lock, swapped atomically by publish(). Requests against a snapshot more
// than max_staleness_steps behind the trainer are refused.
class HypothesisService {
public:
    HypothesisService(const AcllmConfig& cfg, const TextVocab& vocab,
                      int max_staleness_steps);

    void publish(const ParamStore& trainer_store, int trainer_step);
    ServiceResponse request(const ServiceRequest& r, int trainer_step,
                            int beam_size, int max_len) const;

    bool fresh(int trainer_step) const;
    int snapshot_version() const;
    int max_staleness_steps() const { return max_staleness_; }

private:
    mutable std::mutex mu_;
    std::unique_ptr<AcllmModel> snapshot_;
    int version_ = 0;
    int published_step_ = -1;
    int max_staleness_ = 0;
};

struct RlItem {
    const FeatureSequence* feats = nullptr;
    std::vector<int> transcript;
    std::vector<int> context;  // empty for plain pairs
    std::vector<std::vector<std::string>> keywords;
};

struct RlConfig {
    RewardSpec reward;
    float lambda = 0.01f;
    int nbest = 4;
    int beam_size = 4;
    int max_len = 24;
    int steps = 50;
    int start_step = 0;  // resume point; per-step seeds are absolute
    int max_staleness_steps = 2;
    uint64_t seed = 0;
};

struct RlReport {
    std::vector<float> losses;
    int publishes = 0;
    int ce_only_steps = 0;  // items whose N-best collapsed below 2 hypotheses
};

// Sequence-level fine-tuning starting from the context-SFT weights. The LM
// must be frozen; hypotheses come from the service under its staleness bound.
RlReport rl_train(AcllmModel& m, const std::vector<RlItem>& items,
                  const RlConfig& cfg, HypothesisService& svc, Optimizer& opt);

}  // namespace acllm
