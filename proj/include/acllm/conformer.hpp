#pragma once

#include <string>
#include <vector>

#include "acllm/corpus.hpp"
#include "acllm/optim.hpp"
#include "acllm/tensor.hpp"

namespace acllm {

// Conformer speech encoder: per block, self-attention with rotary positions,
// a depthwise convolution module, and a feedforward module, each with a
// pre-layernorm residual. No subsampling; one output row per input frame.

struct ConformerConfig {
    int input_dim = 24;
    int width = 96;
    int depth = 4;
    int heads = 4;
    int conv_kernel = 5;
    int ffn_mult = 2;
};

class ConformerEncoder {
public:
    // Registers freshly initialized weights under prefix in the store.
    ConformerEncoder(const ConformerConfig& cfg, ParamStore& store, uint64_t seed,
                     const std::string& prefix = "enc/");

    // x: T x input_dim. Returns one T x width tensor per block, in depth order.
    std::vector<Tensor> forward(const Tensor& x) const;
    Tensor output(const Tensor& x) const { return forward(x).back(); }
    Tensor block_output(const Tensor& x, int layer) const;

    Tensor from_features(const FeatureSequence& f) const;

    const ConformerConfig& config() const { return cfg_; }
    const std::string& prefix() const { return prefix_; }
    void set_frozen(ParamStore& store, bool frozen) const;

private:
    struct Block {
        Tensor ln_att_g, ln_att_b, wq, wk, wv, wo;
        Tensor ln_conv_g, ln_conv_b, conv_dw, conv_pw, conv_pw_b;
        Tensor ln_ffn_g, ln_ffn_b, ffn1, ffn1_b, ffn2, ffn2_b;
    };
    ConformerConfig cfg_;
    std::string prefix_;
    Tensor in_proj_, in_proj_b_;
    std::vector<Block> blocks_;
};

}  // namespace acllm
