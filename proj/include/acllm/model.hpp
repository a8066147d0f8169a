#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "acllm/conformer.hpp"
#include "acllm/optim.hpp"

namespace acllm {

// Audio-conditioned decoder LM: conformer encoder output is spliced 4:1 and
// projected into the LM embedding space, then decoded alongside instruction,
// optional context, and transcript tokens. The LM stays frozen through all
// speech fine-tuning.

extern const char* const kInstruction;
extern const char* const kCtxInstruction;

class TextVocab {
public:
    static constexpr int BOS = 0;
    static constexpr int EOS = 1;
    static constexpr int CTX_BEGIN = 2;
    static constexpr int CTX_END = 3;
    static constexpr int AUDIO_BEGIN = 4;
    static constexpr int AUDIO_END = 5;
    static constexpr int SIL = 6;

    TextVocab();

    int add(const std::string& s);        // idempotent
    int id(const std::string& s) const;   // throws on unknown token
    bool contains(const std::string& s) const;
    const std::string& text(int id) const;
    int size() const { return static_cast<int>(strings_.size()); }

    // wordlike: whitespace split; charlike: one token per character.
    std::vector<int> tokenize(const std::string& text, const std::string& language) const;
    std::string detokenize(const std::vector<int>& ids, const std::string& language) const;

    int group_token(int group) const;  // ambiguity marker token per homophone group
    int n_groups() const { return n_groups_; }

    // specials + instruction words + context template words + lexicon
    // surfaces + one marker token per homophone group
    static TextVocab build(const Lexicon& lex, int n_homophone_groups);

private:
    std::vector<std::string> strings_;
    std::map<std::string, int> index_;
    std::vector<int> group_tokens_;
    int n_groups_ = 0;
};

struct PromptLayout {
    std::vector<int> tokens;        // -1 at injected-audio positions
    std::vector<uint8_t> loss_mask; // true exactly on transcript tokens + final EOS
    int audio_begin = -1;
    int audio_len = 0;
    int transcript_begin = -1;

    int length() const { return static_cast<int>(tokens.size()); }
    std::string to_json() const;
};

// [BOS] [CTX_BEGIN context CTX_END]? instruction AUDIO_BEGIN audio AUDIO_END
// transcript EOS; the context-bearing variant uses the context instruction.
PromptLayout build_prompt(const TextVocab& v, const std::vector<int>& context,
                          const std::vector<int>& transcript, int audio_len);

struct LmKvCache {
    int len = 0;
    std::vector<std::vector<float>> k, v;  // per layer, len * width
};

class DecoderLM {
public:
    DecoderLM(int vocab, int width, int depth, int heads, int ffn_mult,
              ParamStore& store, uint64_t seed, const std::string& prefix = "lm/");

    // graph (training) path
    Tensor embed(const std::vector<int>& ids) const;
    Tensor forward_embs(const Tensor& embs) const;  // T x vocab logits

    // cached (inference) path; must agree with the graph path within 1e-4
    LmKvCache make_cache() const;
    std::vector<float> step(LmKvCache& c, const float* emb_row) const;
    std::vector<float> embedding_row(int id) const;

    int width() const { return width_; }
    int vocab_size() const { return vocab_; }
    int depth() const { return depth_; }
    const std::string& prefix() const { return prefix_; }
    void set_frozen(ParamStore& store, bool frozen) const;

private:
    struct Block {
        Tensor ln1_g, ln1_b, wq, wk, wv, wo;
        Tensor ln2_g, ln2_b, ffn1, ffn1_b, ffn2, ffn2_b;
    };
    int vocab_, width_, depth_, heads_, hidden_;
    std::string prefix_;
    Tensor emb_, lnf_g_, lnf_b_, head_;
    std::vector<Block> blocks_;
};

// Text-only LM training (next-token CE over whole sequences). audio_jitter
// adds Gaussian noise to the embedded positions between AUDIO_BEGIN and
// AUDIO_END so the later-frozen LM tolerates continuous audio embeddings
// that land off the discrete embedding manifold.
float lm_train_step(DecoderLM& lm, const std::vector<const std::vector<int>*>& batch,
                    Optimizer& opt, float audio_jitter = 0, Rng* rng = nullptr);
double lm_perplexity(const DecoderLM& lm, const std::vector<std::vector<int>>& heldout);
double unigram_perplexity(const std::vector<std::vector<int>>& train,
                          const std::vector<std::vector<int>>& heldout, int vocab);
// Trains in place; reports held-out perplexity before and after.
struct PretrainReport {
    double ppl_init = 0, ppl_final = 0, ppl_unigram = 0;
};
PretrainReport pretrain_lm(DecoderLM& lm, ParamStore& store,
                           const std::vector<std::vector<int>>& corpus,
                           const std::vector<std::vector<int>>& heldout, int steps,
                           int batch_size, float lr, uint64_t seed,
                           float audio_jitter = 0);

struct AcllmConfig {
    ConformerConfig enc;
    int lm_width = 128;
    int lm_depth = 4;
    int lm_heads = 4;
    int lm_ffn_mult = 2;
    int splice = 4;
};

struct AcllmModel {
    AcllmConfig cfg;
    TextVocab vocab;
    ParamStore store;
    std::unique_ptr<ConformerEncoder> encoder;
    Tensor conv_w, conv_b;  // (splice * enc.width) x lm_width
    std::unique_ptr<DecoderLM> lm;

    AcllmModel(const AcllmConfig& cfg, TextVocab vocab, uint64_t seed);
    AcllmModel(const AcllmModel&) = delete;

    // splice groups of `splice` frames along the feature axis (zero padded)
    // and project; T' = ceil(T / splice)
    Tensor convert(const Tensor& enc_out) const;
    Tensor audio_embeddings(const FeatureSequence& f) const;

    // teacher-forced CE over the loss-masked positions of the prompt
    Tensor item_loss(const FeatureSequence& f, const std::vector<int>& transcript,
                     const std::vector<int>& context) const;

    void set_lm_frozen(bool frozen);
    bool lm_frozen() const;
};

struct SftItem {
    const FeatureSequence* feats = nullptr;
    const Utterance* utt = nullptr;  // set when fresh renderings are possible
    std::vector<int> transcript;
    std::vector<int> context;  // tokens; empty for plain pairs
    bool triple = false;
};

// Plain pairs only; LM must be frozen.
float sft_step(AcllmModel& m, const std::vector<SftItem>& batch, Optimizer& opt);
// Mixed triples and plain pairs; mix_ratio documents the intended triple
// fraction and must be in (0, 1).
float context_sft_step(AcllmModel& m, const std::vector<SftItem>& batch,
                       float mix_ratio, Optimizer& opt);

}  // namespace acllm
