#pragma once

#include <map>
#include <optional>

#include "acllm/decode.hpp"
#include "acllm/metrics.hpp"

namespace acllm {

// Decoding-based evaluation over corpus splits, plus the line fits used by
// the scaling study. Reports are pure functions of (weights, split, config).

struct EvalOptions {
    int beam_size = 4;
    int max_len = 28;
    JointConfig joint;          // used when an item carries context
    bool use_context = true;    // strip context when false
    double keyword_weight = 3.0;
    int max_items = 0;          // 0 = whole split
};

struct EvalReport {
    std::string config_hash;
    std::string checkpoint_id;
    std::string weighting = "token_weighted";  // per-split rate aggregation
    // split -> metric -> value; metric keys: wer, weighted_wer, keyword_f1,
    // recall
    std::map<std::string, std::map<std::string, double>> splits;

    std::string to_json() const;
    std::string to_table() const;  // aligned plain text
};

// Greedy/beam transcription of one utterance; context honored when present
// and enabled (joint search with opts.joint).
std::string transcribe(const AcllmModel& m, const FeatureSequence& f,
                       const Utterance& u, const EvalOptions& opts);

// WER (token-weighted), plus weighted_wer and keyword_f1 when the split
// carries keywords, plus recall on context splits.
std::map<std::string, double> evaluate_split(const AcllmModel& m,
                                             const CorpusData& corpus,
                                             const std::string& split,
                                             const EvalOptions& opts);

EvalReport evaluate_model(const AcllmModel& m, const CorpusData& corpus,
                          const std::vector<std::string>& splits,
                          const EvalOptions& opts);

// Long-form groups: features are the concatenation of the group's sentences.
struct LongformItem {
    std::string group;
    FeatureSequence feats;
    std::vector<std::string> ref;        // concatenated transcript units
    bool crosses_homophone = false;      // a non-canonical homophone is
                                         // introduced in an earlier sentence
};
std::vector<LongformItem> longform_items(const CorpusData& corpus,
                                         const std::string& split);

struct LongformEval {
    double wer_unsegmented = 0;
    double wer_vad = 0;
    double tagged_wer_unsegmented = 0;  // crosses_homophone subset
    double tagged_wer_vad = 0;
    int tagged_items = 0;
};
LongformEval evaluate_longform(const AcllmModel& m, const CorpusData& corpus,
                               const std::string& split, int beam_size,
                               int max_positions = 4096, int vad_min_run = 4);

// least squares y = a*x + b plus Pearson correlation
struct LineFit {
    double slope = 0;
    double intercept = 0;
    double pearson_r = 0;
};
LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y);

struct ScalingRecord {
    int width = 0;
    int depth = 0;
    size_t param_count = 0;
    double pretrain_loss = 0;       // SSL validation loss
    double post_sft_greedy_wer = 0;
};

struct ScalingSummary {
    std::vector<ScalingRecord> records;
    LineFit params_to_loss;   // x = log2(params)
    LineFit params_to_wer;
    LineFit loss_to_wer;

    std::string to_json() const;
    std::string to_csv() const;
};

// Fits from already-trained records (>= 3 required).
ScalingSummary summarize_scaling(const std::vector<ScalingRecord>& records);

}  // namespace acllm
