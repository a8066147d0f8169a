#pragma once

#include "acllm/checkpoint.hpp"
#include "acllm/evalharness.hpp"
#include "acllm/mwer.hpp"
#include "acllm/ssl.hpp"

namespace acllm {

// Stage-wise training recipe: ssl_iter1 -> ssl_iter2 -> sft -> context_sft
// -> rl, each stage consuming the previous checkpoint. All stage seeds fan
// out from one global seed; every step derives its own seed so an
// interrupted stage resumes bit-exactly from a partial checkpoint.

struct SslStageConfig {
    int K = 48;
    int proj_dim = 16;
    MaskSpec mask;  // seed ignored; derived per step
    int steps = 250;
    int batch = 4;
    float lr = 1e-3f;
    float lr_final = 0;  // > 0: linear decay to this rate over the stage
    int probe_steps = 200;
    int probe_train_items = 24;
    int probe_eval_items = 16;
    int kmeans_iters = 12;
};

struct SftStageConfig {
    int lm_steps = 500;
    int lm_batch = 8;
    float lm_lr = 3e-3f;
    float lm_jitter = 0;  // embedding noise on audio spans during LM pretraining
    int steps = 500;
    int batch = 4;
    float lr = 1e-3f;
    float lr_final = 0;  // > 0: linear decay to this rate over the stage
    int aug_time_masks = 0;  // zeroed feature spans per training item
    int aug_span = 8;        // max masked span length in frames
    float aug_feat_noise = 0;  // per-step Gaussian noise std on features
    bool aug_resynth = false;  // re-render items with fresh durations + noise
    bool include_longform = true;  // long-form items as extra SFT pairs
};

struct ContextSftStageConfig {
    int steps = 300;
    int batch = 4;
    float lr = 1e-3f;
    float lr_final = 0;  // > 0: linear decay to this rate over the stage
    int aug_time_masks = 0;  // zeroed feature spans per training item
    int aug_span = 8;
    float aug_feat_noise = 0;  // per-step Gaussian noise std on features
    bool aug_resynth = false;  // re-render items with fresh durations + noise
    float mix_ratio = 0.3f;  // triple fraction per batch
};

struct RlStageConfig {
    RewardSpec reward{"weighted_wer", 3.0};
    float lambda = 0.01f;
    int nbest = 4;
    int beam_size = 4;
    int max_len = 24;
    int steps = 60;
    int max_staleness_steps = 2;
    float lr = 3e-4f;
    float triple_ratio = 0.33f;  // strict triples mixed into the RL pool
};

struct PipelineConfig {
    CorpusSpec corpus;
    AcllmConfig model;
    SslStageConfig ssl;
    SftStageConfig sft;
    ContextSftStageConfig context_sft;
    RlStageConfig rl;
    JointConfig decode;
    uint64_t seed = 1;
    std::string out_dir = "out";
};

std::string config_to_json(const PipelineConfig& cfg);
// Accepts a JSON document or a flat TOML subset (key = value lines with
// [section] headers, dotted keys flattened).
PipelineConfig config_from_text(const std::string& text);
PipelineConfig load_config_file(const std::string& path);
std::string config_hash(const PipelineConfig& cfg);  // hash of canonical JSON
// Hash of the config subset that can influence a checkpoint of the given
// stage (corpus, model, seed, plus the stage sections up to it). Embedded in
// checkpoints so later stages may override their own hyperparameters without
// breaking lineage.
std::string lineage_hash(const PipelineConfig& cfg, const std::string& stage);
uint64_t stage_seed(const PipelineConfig& cfg, const std::string& stage);

// One run owns its output directory; a second concurrent run fails fast.
class DirLock {
public:
    explicit DirLock(const std::string& dir);
    ~DirLock();
    DirLock(const DirLock&) = delete;

private:
    std::string path_;
};

// LM pretraining text: prompt-shaped token sequences whose audio span is a
// repeated token stand-in. Homophones appear in the stand-in as their group
// marker; the transcript resolves the marker from context when present,
// from a preceding introducer word when one occurs, and to the canonical
// member otherwise. This teaches the frozen LM copy + disambiguation.
std::vector<std::vector<int>> build_lm_corpus(const CorpusData& corpus,
                                              const TextVocab& vocab,
                                              uint64_t seed);

// Long-form training pairs: concatenated group features + transcript.
struct LongformPair {
    FeatureSequence feats;
    std::string transcript;
};
std::vector<LongformPair> longform_pairs(const CorpusData& corpus,
                                         const std::string& split);

// Executes one stage and writes <out_dir>/<stage>.aclk. Stages after
// ssl_iter1 require the previous stage's checkpoint (rl strictly requires
// context_sft). If stop_after is positive and smaller than the stage's step
// budget, a partial checkpoint <stage>.part.aclk is written instead; a
// subsequent call resumes from it and reaches weights identical to an
// uninterrupted run. Returns the written checkpoint path.
std::string run_stage(const std::string& stage, const PipelineConfig& cfg,
                      const std::string& input_ckpt = "", int stop_after = -1);

// Rebuilds the trained model from a checkpoint at sft stage or later.
std::unique_ptr<AcllmModel> model_from_checkpoint(const PipelineConfig& cfg,
                                                  const CorpusData& corpus,
                                                  const Checkpoint& ckpt);

// Scaling study: for each (width, depth) trains SSL iteration 1 and a short
// SFT on identical data and schedule, records validation loss, parameter
// count and greedy WER, and fits the three lines.
ScalingSummary run_scaling_study(const PipelineConfig& cfg,
                                 const std::vector<std::pair<int, int>>& sizes);

// Stage comparison table over {sft, context_sft, rl} checkpoints.
EvalReport run_ablation_grid(const PipelineConfig& cfg, const CorpusData& corpus,
                             const std::string& sft_ckpt,
                             const std::string& context_sft_ckpt,
                             const std::string& rl_ckpt);

}  // namespace acllm
