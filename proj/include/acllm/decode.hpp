#pragma once

#include <memory>
#include <string>
#include <vector>

#include "acllm/model.hpp"

namespace acllm {

// Beam decoding over an abstract next-token scorer. The two conditionings
// (with and without context) run as parallel passes over the same search so
// every hypothesis carries both log-probabilities.

class SeqModel {
public:
    virtual ~SeqModel() = default;

    struct State {
        virtual ~State() = default;
        virtual std::unique_ptr<State> clone() const = 0;
    };

    virtual int vocab_size() const = 0;
    virtual int eos() const = 0;
    virtual bool has_context() const = 0;
    // fresh state positioned right after the (context?, instruction, audio)
    // prompt; with_context selects the conditioning
    virtual std::unique_ptr<State> start(bool with_context) const = 0;
    // log P(next token | state), full vocab, log-softmax normalized
    virtual std::vector<float> logprobs(const State& s) const = 0;
    virtual void advance(State& s, int token) const = 0;
};

struct Hypothesis {
    std::vector<int> tokens;  // emitted tokens, EOS excluded
    double logp_ctx = 0;
    double logp_noctx = 0;
    double score = 0;  // ranking score used by the search that produced it
    bool finished = false;
};

struct JointConfig {
    double alpha = 1.0;
    int beam_size = 4;
    int prune_top_k = 8;
    int max_len = 32;
};

struct NBestList {
    std::vector<Hypothesis> hyps;        // sorted by score, descending
    bool fallback_unfinished = false;    // no hypothesis finished within max_len
};

// Eq. score = alpha/(1+alpha) * logp_ctx + 1/(1+alpha) * logp_noctx.
double joint_score(const Hypothesis& h, double alpha);

// Length-synchronous beam over the primary conditioning (context when
// present). Both logp fields populated.
NBestList beam_search(const SeqModel& m, int beam_size, int max_len, int nbest);

// Context fusion: per step, candidates restricted to the prune_top_k tokens
// by context-free probability, scored by the per-step alpha interpolation.
NBestList joint_beam_search(const SeqModel& m, const JointConfig& cfg);

// Wraps a trained model + one utterance; prefilled once, states clone cheap.
class AcllmSeqModel : public SeqModel {
public:
    AcllmSeqModel(const AcllmModel& m, const FeatureSequence& f,
                  std::vector<int> context, int max_positions = 0);

    int vocab_size() const override;
    int eos() const override { return TextVocab::EOS; }
    bool has_context() const override { return !context_.empty(); }
    std::unique_ptr<State> start(bool with_context) const override;
    std::vector<float> logprobs(const State& s) const override;
    void advance(State& s, int token) const override;

    int prompt_length(bool with_context) const;

private:
    struct CacheState;
    const AcllmModel& model_;
    std::vector<int> context_;
    std::unique_ptr<State> base_ctx_, base_noctx_;
    int prompt_len_ctx_ = 0, prompt_len_noctx_ = 0;
};

NBestList decode_utterance(const AcllmModel& m, const FeatureSequence& f,
                           const std::vector<int>& context, int beam_size,
                           int max_len, int nbest);
NBestList decode_joint(const AcllmModel& m, const FeatureSequence& f,
                       const std::vector<int>& context, const JointConfig& cfg);

struct LongformResult {
    std::string transcript;
    std::vector<std::pair<int, int>> segments;  // [begin, end) frame ranges
};

// mode "unsegmented": single pass over the whole item (errors if the prompt
// would exceed max_positions). mode "vad_segmented": split on low-energy
// frame runs >= vad_min_run and decode each segment independently.
LongformResult decode_longform(const AcllmModel& m, const FeatureSequence& f,
                               const std::string& mode, int beam_size,
                               int max_positions = 512, int vad_min_run = 6);

// Silence detection shared with decode_longform, exposed for tests.
std::vector<uint8_t> vad_silence_mask(const FeatureSequence& f);

std::string nbest_to_jsonl(const std::string& id, const NBestList& nbest,
                           const TextVocab& vocab, const std::string& language,
                           double alpha);

}  // namespace acllm
