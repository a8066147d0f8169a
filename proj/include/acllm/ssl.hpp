#pragma once

#include <memory>
#include <vector>

#include "acllm/conformer.hpp"
#include "acllm/ctc.hpp"
#include "acllm/optim.hpp"
#include "acllm/quantizer.hpp"

namespace acllm {

// Masked-label-prediction pretraining over tokenizer labels, plus the layer
// probe used to pick the representation layer for tokenizer iteration two.

struct MaskSpec {
    int span_frames = 5;
    float mask_ratio = 0.4f;
    uint64_t seed = 0;
};

// Contiguous non-overlapping spans until ratio * T frames are masked.
std::vector<uint8_t> sample_mask(int T, const MaskSpec& spec);

// Encoder + learned mask embedding (replaces masked input rows before the
// input projection) + linear label head.
struct SslModel {
    ConformerConfig cfg;
    int K;
    ParamStore store;
    std::unique_ptr<ConformerEncoder> encoder;
    Tensor mask_emb;         // 1 x input_dim
    Tensor head_w, head_b;   // width x K

    SslModel(const ConformerConfig& cfg, int K, uint64_t seed);
    SslModel(const SslModel&) = delete;

    // Masked input -> per-frame label logits (T x K).
    Tensor logits(const FeatureSequence& f, const std::vector<uint8_t>& mask) const;
};

struct SslBatchItem {
    const FeatureSequence* feats;
    const LabelSequence* labels;
};

// One optimizer step; loss is CE over masked frames only, averaged by the
// total masked count across the batch. A batch with zero masked frames is an
// error.
float ssl_step(SslModel& model, const std::vector<SslBatchItem>& batch,
               const MaskSpec& mask, Optimizer& opt);

// Same loss without the update, for validation.
float ssl_eval_loss(const SslModel& model, const std::vector<SslBatchItem>& batch,
                    const MaskSpec& mask);

struct ProbeItem {
    FeatureSequence feats;
    std::vector<int> target;  // tokens in [1, vocab]
};

struct ProbeReport {
    std::vector<double> per_layer_wer;
    int selected_layer = 0;

    std::string to_json() const;
};

// Trains a fresh linear map + CTC head on each frozen block output for a
// fixed step budget, scores greedy decoding, selects the argmin layer
// (ties -> shallowest). The encoder parameters are left untouched.
ProbeReport probe_layers(const ConformerEncoder& enc, const std::vector<ProbeItem>& train,
                         const std::vector<ProbeItem>& eval, int vocab, int steps,
                         uint64_t seed);

struct TokenizerIteration {
    Codebook codebook;                  // kmeans kind, source_layer recorded
    std::vector<LabelSequence> labels;  // parallel to the input sequences
};

// K-means over selected-layer representations, then relabels every sequence.
TokenizerIteration iterate_tokenizer(const ConformerEncoder& enc,
                                     const std::vector<const FeatureSequence*>& seqs,
                                     int selected_layer, int K, int kmeans_iters,
                                     uint64_t seed, int max_points = 20000);

}  // namespace acllm
