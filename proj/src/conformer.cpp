#include "acllm/conformer.hpp"

#include <cmath>
#include <stdexcept>

namespace acllm {

ConformerEncoder::ConformerEncoder(const ConformerConfig& cfg, ParamStore& store,
                                   uint64_t seed, const std::string& prefix)
    : cfg_(cfg), prefix_(prefix) {
    if (cfg.depth < 2) throw ConfigError("conformer depth must be >= 2");
    if (cfg.width % cfg.heads != 0)
        throw ConfigError("conformer width must divide by heads");
    Rng rng = make_rng(seed);
    const float w_std = 1.0f / std::sqrt(static_cast<float>(cfg.width));
    auto weight = [&](const std::string& name, int r, int c, float std) {
        return store.add(prefix + name, Tensor::randn({r, c}, std, rng, true)).tensor;
    };
    auto gain = [&](const std::string& name, int c) {
        return store.add(prefix + name, Tensor::full({1, c}, 1.0f, true)).tensor;
    };
    auto bias = [&](const std::string& name, int c) {
        return store.add(prefix + name, Tensor::zeros({1, c}, true)).tensor;
    };

    in_proj_ = weight("in_proj", cfg.input_dim, cfg.width,
                      1.0f / std::sqrt(static_cast<float>(cfg.input_dim)));
    in_proj_b_ = bias("in_proj_b", cfg.width);
    const int hidden = cfg.width * cfg.ffn_mult;
    for (int l = 0; l < cfg.depth; ++l) {
        std::string p = "b" + std::to_string(l) + "/";
        Block b;
        b.ln_att_g = gain(p + "ln_att_g", cfg.width);
        b.ln_att_b = bias(p + "ln_att_b", cfg.width);
        b.wq = weight(p + "wq", cfg.width, cfg.width, w_std);
        b.wk = weight(p + "wk", cfg.width, cfg.width, w_std);
        b.wv = weight(p + "wv", cfg.width, cfg.width, w_std);
        b.wo = weight(p + "wo", cfg.width, cfg.width, w_std);
        b.ln_conv_g = gain(p + "ln_conv_g", cfg.width);
        b.ln_conv_b = bias(p + "ln_conv_b", cfg.width);
        b.conv_dw = weight(p + "conv_dw", cfg.conv_kernel, cfg.width,
                           1.0f / std::sqrt(static_cast<float>(cfg.conv_kernel)));
        b.conv_pw = weight(p + "conv_pw", cfg.width, cfg.width, w_std);
        b.conv_pw_b = bias(p + "conv_pw_b", cfg.width);
        b.ln_ffn_g = gain(p + "ln_ffn_g", cfg.width);
        b.ln_ffn_b = bias(p + "ln_ffn_b", cfg.width);
        b.ffn1 = weight(p + "ffn1", cfg.width, hidden, w_std);
        b.ffn1_b = bias(p + "ffn1_b", hidden);
        b.ffn2 = weight(p + "ffn2", hidden, cfg.width,
                        1.0f / std::sqrt(static_cast<float>(hidden)));
        b.ffn2_b = bias(p + "ffn2_b", cfg.width);
        blocks_.push_back(std::move(b));
    }
}

std::vector<Tensor> ConformerEncoder::forward(const Tensor& x) const {
    if (x.cols() != cfg_.input_dim)
        throw std::invalid_argument("conformer: input width mismatch");
    Tensor h = add_rowvec(matmul(x, in_proj_), in_proj_b_);
    std::vector<Tensor> outs;
    outs.reserve(blocks_.size());
    for (const auto& b : blocks_) {
        Tensor a = layernorm(h, b.ln_att_g, b.ln_att_b);
        Tensor q = rope(matmul(a, b.wq), cfg_.heads);
        Tensor k = rope(matmul(a, b.wk), cfg_.heads);
        Tensor v = matmul(a, b.wv);
        Tensor att = matmul(multi_head_attention(q, k, v, cfg_.heads, false), b.wo);
        h = add(h, att);

        Tensor c = layernorm(h, b.ln_conv_g, b.ln_conv_b);
        c = gelu(depthwise_conv1d(c, b.conv_dw));
        c = add_rowvec(matmul(c, b.conv_pw), b.conv_pw_b);
        h = add(h, c);

        Tensor f = layernorm(h, b.ln_ffn_g, b.ln_ffn_b);
        f = add_rowvec(matmul(gelu(add_rowvec(matmul(f, b.ffn1), b.ffn1_b)), b.ffn2),
                       b.ffn2_b);
        h = add(h, f);
        outs.push_back(h);
    }
    return outs;
}

Tensor ConformerEncoder::block_output(const Tensor& x, int layer) const {
    if (layer < 0 || layer >= cfg_.depth)
        throw std::out_of_range("conformer: block index out of range");
    auto outs = forward(x);
    return outs[static_cast<size_t>(layer)];
}

Tensor ConformerEncoder::from_features(const FeatureSequence& f) const {
    return Tensor::from({f.T, f.D}, f.frames);
}

void ConformerEncoder::set_frozen(ParamStore& store, bool frozen) const {
    for (auto& p : store.params())
        if (p.name.rfind(prefix_, 0) == 0) p.set_frozen(frozen);
}

}  // namespace acllm
