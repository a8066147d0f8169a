#include "acllm/ssl.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "acllm/metrics.hpp"

namespace acllm {

std::vector<uint8_t> sample_mask(int T, const MaskSpec& spec) {
    if (spec.mask_ratio <= 0.0f || spec.mask_ratio >= 1.0f)
        throw ConfigError("mask_ratio must be in (0, 1)");
    if (spec.span_frames < 1) throw ConfigError("span_frames must be >= 1");
    std::vector<uint8_t> mask(static_cast<size_t>(T), 0);
    const int target = std::max(1, static_cast<int>(spec.mask_ratio * T));
    std::vector<int> starts(static_cast<size_t>(T));
    std::iota(starts.begin(), starts.end(), 0);
    Rng rng = make_rng(spec.seed);
    std::shuffle(starts.begin(), starts.end(), rng);
    int masked = 0;
    for (int s : starts) {
        if (masked >= target) break;
        int end = std::min(T, s + spec.span_frames);
        bool overlap = false;
        for (int t = s; t < end && !overlap; ++t) overlap = mask[static_cast<size_t>(t)];
        if (overlap) continue;
        for (int t = s; t < end; ++t) mask[static_cast<size_t>(t)] = 1;
        masked += end - s;
    }
    return mask;
}

SslModel::SslModel(const ConformerConfig& cfg_in, int K_in, uint64_t seed)
    : cfg(cfg_in), K(K_in) {
    encoder = std::make_unique<ConformerEncoder>(cfg, store, mix_seed(seed, "enc"));
    Rng rng = make_rng(mix_seed(seed, "ssl_head"));
    mask_emb = store
                   .add("ssl/mask_emb",
                        Tensor::randn({1, cfg.input_dim}, 0.5f, rng, true))
                   .tensor;
    head_w = store
                 .add("ssl/head_w",
                      Tensor::randn({cfg.width, K},
                                    1.0f / std::sqrt(static_cast<float>(cfg.width)),
                                    rng, true))
                 .tensor;
    head_b = store.add("ssl/head_b", Tensor::zeros({1, K}, true)).tensor;
}

Tensor SslModel::logits(const FeatureSequence& f, const std::vector<uint8_t>& mask) const {
    if (static_cast<int>(mask.size()) != f.T)
        throw std::invalid_argument("ssl: mask length mismatch");
    // constant input with masked rows zeroed, plus mask-indicator column times
    // the learned embedding, so gradient reaches mask_emb only at masked rows
    std::vector<float> base(f.frames);
    std::vector<float> ind(static_cast<size_t>(f.T), 0.0f);
    for (int t = 0; t < f.T; ++t)
        if (mask[static_cast<size_t>(t)]) {
            ind[static_cast<size_t>(t)] = 1.0f;
            std::fill_n(base.begin() + static_cast<size_t>(t) * f.D, f.D, 0.0f);
        }
    Tensor x = add(Tensor::from({f.T, f.D}, std::move(base)),
                   matmul(Tensor::from({f.T, 1}, std::move(ind)), mask_emb));
    Tensor h = encoder->output(x);
    return add_rowvec(matmul(h, head_w), head_b);
}

namespace {

Tensor ssl_batch_loss(const SslModel& model, const std::vector<SslBatchItem>& batch,
                      const MaskSpec& mask) {
    if (batch.empty()) throw std::invalid_argument("ssl_step: empty batch");
    std::vector<Tensor> losses;
    std::vector<float> weights;
    int total_masked = 0;
    std::vector<int> counts;
    for (size_t i = 0; i < batch.size(); ++i) {
        const auto& item = batch[i];
        if (static_cast<int>(item.labels->size()) != item.feats->T)
            throw std::invalid_argument("ssl_step: labels misaligned with frames");
        MaskSpec ms = mask;
        ms.seed = mix_seed(mask.seed, i);
        auto m = sample_mask(item.feats->T, ms);
        int n = static_cast<int>(std::count(m.begin(), m.end(), 1));
        if (n == 0) throw std::invalid_argument("ssl_step: zero masked frames");
        Tensor logits = model.logits(*item.feats, m);
        losses.push_back(cross_entropy_rows(logits, *item.labels, m));
        counts.push_back(n);
        total_masked += n;
    }
    for (int n : counts)
        weights.push_back(static_cast<float>(n) / static_cast<float>(total_masked));
    return dot_const(stack_scalars(losses), weights);
}

}  // namespace

float ssl_step(SslModel& model, const std::vector<SslBatchItem>& batch,
               const MaskSpec& mask, Optimizer& opt) {
    Tensor loss = ssl_batch_loss(model, batch, mask);
    opt.zero_grad();
    loss.backward();
    opt.step();
    return loss.item();
}

float ssl_eval_loss(const SslModel& model, const std::vector<SslBatchItem>& batch,
                    const MaskSpec& mask) {
    GradGuard no_grad(false);
    return ssl_batch_loss(model, batch, mask).item();
}

std::string ProbeReport::to_json() const {
    nlohmann::json j = {{"per_layer_wer", per_layer_wer},
                        {"selected_layer", selected_layer}};
    return j.dump();
}

ProbeReport probe_layers(const ConformerEncoder& enc, const std::vector<ProbeItem>& train,
                         const std::vector<ProbeItem>& eval, int vocab, int steps,
                         uint64_t seed) {
    if (train.empty() || eval.empty())
        throw std::invalid_argument("probe_layers: empty labeled set");
    const int depth = enc.config().depth;
    const int width = enc.config().width;

    // cache frozen representations once per item, all layers
    std::vector<std::vector<std::vector<float>>> reps_train(static_cast<size_t>(depth));
    std::vector<std::vector<std::vector<float>>> reps_eval(static_cast<size_t>(depth));
    {
        GradGuard no_grad(false);
        for (const auto& it : train) {
            auto outs = enc.forward(enc.from_features(it.feats));
            for (int l = 0; l < depth; ++l)
                reps_train[static_cast<size_t>(l)].push_back(
                    outs[static_cast<size_t>(l)].values());
        }
        for (const auto& it : eval) {
            auto outs = enc.forward(enc.from_features(it.feats));
            for (int l = 0; l < depth; ++l)
                reps_eval[static_cast<size_t>(l)].push_back(
                    outs[static_cast<size_t>(l)].values());
        }
    }

    ProbeReport report;
    for (int l = 0; l < depth; ++l) {
        ParamStore ps;
        Rng rng = make_rng(mix_seed(seed, "probe_init"));  // same init per layer
        Tensor w = ps.add("w", Tensor::randn({width, vocab + 1},
                                             1.0f / std::sqrt(static_cast<float>(width)),
                                             rng, true))
                       .tensor;
        Tensor b = ps.add("b", Tensor::zeros({1, vocab + 1}, true)).tensor;
        OptimizerConfig oc;
        oc.learning_rate = 5e-3f;
        Optimizer opt(ps, oc);
        Rng order = make_rng(mix_seed(seed, "probe_order"));
        for (int s = 0; s < steps; ++s) {
            size_t i = std::uniform_int_distribution<size_t>(0, train.size() - 1)(order);
            const auto& it = train[i];
            Tensor rep = Tensor::from({it.feats.T, width},
                                      reps_train[static_cast<size_t>(l)][i]);
            Tensor logits = add_rowvec(matmul(rep, w), b);
            Tensor loss = ctc_loss(logits, it.target);
            opt.zero_grad();
            loss.backward();
            opt.step();
        }
        // greedy token error rate on the held-out probe items
        GradGuard no_grad(false);
        int errors = 0, ref_len = 0;
        for (size_t i = 0; i < eval.size(); ++i) {
            const auto& it = eval[i];
            Tensor rep = Tensor::from({it.feats.T, width},
                                      reps_eval[static_cast<size_t>(l)][i]);
            Tensor logits = add_rowvec(matmul(rep, w), b);
            auto hyp = ctc_greedy_decode(logits);
            std::vector<std::string> r, h;
            for (int tok : it.target) r.push_back(std::to_string(tok));
            for (int tok : hyp) h.push_back(std::to_string(tok));
            auto st = edit_distance(r, h);
            errors += st.errors();
            ref_len += st.ref_len;
        }
        report.per_layer_wer.push_back(static_cast<double>(errors) / ref_len);
    }
    report.selected_layer = 0;
    for (int l = 1; l < depth; ++l)
        if (report.per_layer_wer[static_cast<size_t>(l)] <
            report.per_layer_wer[static_cast<size_t>(report.selected_layer)])
            report.selected_layer = l;
    return report;
}

TokenizerIteration iterate_tokenizer(const ConformerEncoder& enc,
                                     const std::vector<const FeatureSequence*>& seqs,
                                     int selected_layer, int K, int kmeans_iters,
                                     uint64_t seed, int max_points) {
    if (seqs.empty()) throw std::invalid_argument("iterate_tokenizer: no sequences");
    GradGuard no_grad(false);
    const int width = enc.config().width;

    std::vector<std::vector<float>> reps;
    reps.reserve(seqs.size());
    size_t total_rows = 0;
    for (const auto* f : seqs) {
        reps.push_back(enc.block_output(enc.from_features(*f), selected_layer).values());
        total_rows += static_cast<size_t>(f->T);
    }

    // deterministic stride subsample for the k-means fit
    const size_t stride = std::max<size_t>(1, total_rows / static_cast<size_t>(max_points));
    std::vector<float> points;
    size_t row_index = 0;
    for (size_t i = 0; i < reps.size(); ++i) {
        const int T = seqs[i]->T;
        for (int t = 0; t < T; ++t, ++row_index)
            if (row_index % stride == 0)
                points.insert(points.end(),
                              reps[i].begin() + static_cast<size_t>(t) * width,
                              reps[i].begin() + static_cast<size_t>(t + 1) * width);
    }
    const int N = static_cast<int>(points.size() / static_cast<size_t>(width));

    TokenizerIteration out;
    out.codebook = kmeans_fit(points, N, width, K, kmeans_iters, seed);
    out.codebook.source_layer = selected_layer;
    for (size_t i = 0; i < reps.size(); ++i)
        out.labels.push_back(label_frames(reps[i], seqs[i]->T, width, out.codebook));
    return out;
}

}  // namespace acllm
