#include "acllm/model.hpp"

#include <json.hpp>

#include <cmath>
#include <stdexcept>

namespace acllm {

const char* const kInstruction = "Transcribe the speech into text:";
const char* const kCtxInstruction =
    "There are relevant contexts, transcribe the speech into text:";

// ---------------------------------------------------------------------------
// vocab

TextVocab::TextVocab() {
    for (const char* s : {"<bos>", "<eos>", "<ctx>", "</ctx>", "<audio>", "</audio>",
                          "<sil>"})
        add(s);
}

int TextVocab::add(const std::string& s) {
    auto it = index_.find(s);
    if (it != index_.end()) return it->second;
    int id = static_cast<int>(strings_.size());
    strings_.push_back(s);
    index_[s] = id;
    return id;
}

int TextVocab::id(const std::string& s) const {
    auto it = index_.find(s);
    if (it == index_.end()) throw std::out_of_range("vocab: unknown token '" + s + "'");
    return it->second;
}

bool TextVocab::contains(const std::string& s) const { return index_.count(s) > 0; }

const std::string& TextVocab::text(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("vocab: bad token id");
    return strings_[static_cast<size_t>(id)];
}

std::vector<int> TextVocab::tokenize(const std::string& text,
                                     const std::string& language) const {
    std::vector<int> out;
    if (language == "charlike") {
        for (char c : text)
            if (c != ' ') out.push_back(id(std::string(1, c)));
        return out;
    }
    for (const auto& w : error_units(text, "wordlike")) out.push_back(id(w));
    return out;
}

std::string TextVocab::detokenize(const std::vector<int>& ids,
                                  const std::string& language) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i && language != "charlike") out += ' ';
        out += text(ids[i]);
    }
    return out;
}

int TextVocab::group_token(int group) const {
    if (group < 0 || group >= n_groups_)
        throw std::out_of_range("vocab: bad homophone group");
    return group_tokens_[static_cast<size_t>(group)];
}

TextVocab TextVocab::build(const Lexicon& lex, int n_homophone_groups) {
    TextVocab v;
    for (const char* instr : {kInstruction, kCtxInstruction})
        for (const auto& w : error_units(instr, "wordlike")) v.add(w);
    for (const auto& w : context_template_words()) v.add(w);
    for (const auto& w : lex.words) v.add(w.surface);
    for (int g = 0; g < n_homophone_groups; ++g)
        v.group_tokens_.push_back(v.add("<g" + std::to_string(g) + ">"));
    v.n_groups_ = n_homophone_groups;
    return v;
}

// ---------------------------------------------------------------------------
// prompt layout

PromptLayout build_prompt(const TextVocab& v, const std::vector<int>& context,
                          const std::vector<int>& transcript, int audio_len) {
    if (transcript.empty()) throw std::invalid_argument("prompt: empty transcript");
    if (audio_len < 1) throw std::invalid_argument("prompt: empty audio");
    PromptLayout L;
    auto push = [&](int tok, bool loss) {
        L.tokens.push_back(tok);
        L.loss_mask.push_back(loss ? 1 : 0);
    };
    push(TextVocab::BOS, false);
    if (!context.empty()) {
        push(TextVocab::CTX_BEGIN, false);
        for (int t : context) push(t, false);
        push(TextVocab::CTX_END, false);
    }
    const char* instr = context.empty() ? kInstruction : kCtxInstruction;
    for (const auto& w : error_units(instr, "wordlike")) push(v.id(w), false);
    push(TextVocab::AUDIO_BEGIN, false);
    L.audio_begin = L.length();
    L.audio_len = audio_len;
    for (int i = 0; i < audio_len; ++i) push(-1, false);
    push(TextVocab::AUDIO_END, false);
    L.transcript_begin = L.length();
    for (int t : transcript) push(t, true);
    push(TextVocab::EOS, true);
    return L;
}

std::string PromptLayout::to_json() const {
    nlohmann::json j = {{"tokens", tokens},
                        {"loss_mask", loss_mask},
                        {"audio_begin", audio_begin},
                        {"audio_len", audio_len},
                        {"transcript_begin", transcript_begin}};
    return j.dump();
}

// ---------------------------------------------------------------------------
// decoder LM

DecoderLM::DecoderLM(int vocab, int width, int depth, int heads, int ffn_mult,
                     ParamStore& store, uint64_t seed, const std::string& prefix)
    : vocab_(vocab), width_(width), depth_(depth), heads_(heads),
      hidden_(width * ffn_mult), prefix_(prefix) {
    if (width % heads != 0 || (width / heads) % 2 != 0)
        throw ConfigError("lm: width must split into even-dimension heads");
    Rng rng = make_rng(seed);
    const float w_std = 1.0f / std::sqrt(static_cast<float>(width));
    auto weight = [&](const std::string& name, int r, int c, float std) {
        return store.add(prefix + name, Tensor::randn({r, c}, std, rng, true)).tensor;
    };
    auto gain = [&](const std::string& name, int c) {
        return store.add(prefix + name, Tensor::full({1, c}, 1.0f, true)).tensor;
    };
    auto bias = [&](const std::string& name, int c) {
        return store.add(prefix + name, Tensor::zeros({1, c}, true)).tensor;
    };
    emb_ = weight("emb", vocab, width, 0.5f * w_std * 4);
    for (int l = 0; l < depth; ++l) {
        std::string p = "b" + std::to_string(l) + "/";
        Block b;
        b.ln1_g = gain(p + "ln1_g", width);
        b.ln1_b = bias(p + "ln1_b", width);
        b.wq = weight(p + "wq", width, width, w_std);
        b.wk = weight(p + "wk", width, width, w_std);
        b.wv = weight(p + "wv", width, width, w_std);
        b.wo = weight(p + "wo", width, width, w_std);
        b.ln2_g = gain(p + "ln2_g", width);
        b.ln2_b = bias(p + "ln2_b", width);
        b.ffn1 = weight(p + "ffn1", width, hidden_, w_std);
        b.ffn1_b = bias(p + "ffn1_b", hidden_);
        b.ffn2 = weight(p + "ffn2", hidden_, width,
                        1.0f / std::sqrt(static_cast<float>(hidden_)));
        b.ffn2_b = bias(p + "ffn2_b", width);
        blocks_.push_back(std::move(b));
    }
    lnf_g_ = gain("lnf_g", width);
    lnf_b_ = bias("lnf_b", width);
    head_ = weight("head", width, vocab, w_std);
}

Tensor DecoderLM::embed(const std::vector<int>& ids) const {
    return embedding_rows(emb_, ids);
}

Tensor DecoderLM::forward_embs(const Tensor& embs) const {
    if (embs.cols() != width_)
        throw std::invalid_argument("lm: embedding width mismatch");
    Tensor h = embs;
    for (const auto& b : blocks_) {
        Tensor a = layernorm(h, b.ln1_g, b.ln1_b);
        Tensor q = rope(matmul(a, b.wq), heads_);
        Tensor k = rope(matmul(a, b.wk), heads_);
        Tensor v = matmul(a, b.wv);
        h = add(h, matmul(multi_head_attention(q, k, v, heads_, true), b.wo));
        Tensor f = layernorm(h, b.ln2_g, b.ln2_b);
        f = add_rowvec(matmul(gelu(add_rowvec(matmul(f, b.ffn1), b.ffn1_b)), b.ffn2),
                       b.ffn2_b);
        h = add(h, f);
    }
    return matmul(layernorm(h, lnf_g_, lnf_b_), head_);
}

LmKvCache DecoderLM::make_cache() const {
    LmKvCache c;
    c.k.resize(static_cast<size_t>(depth_));
    c.v.resize(static_cast<size_t>(depth_));
    return c;
}

std::vector<float> DecoderLM::embedding_row(int id) const {
    if (id < 0 || id >= vocab_) throw std::out_of_range("lm: bad token id");
    const float* row = emb_.values().data() + static_cast<size_t>(id) * width_;
    return {row, row + width_};
}

namespace {

void ln_row(const float* x, const float* g, const float* b, int W, float* out) {
    float m = 0;
    for (int i = 0; i < W; ++i) m += x[i];
    m /= W;
    float var = 0;
    for (int i = 0; i < W; ++i) var += (x[i] - m) * (x[i] - m);
    var /= W;
    float is = 1.0f / std::sqrt(var + 1e-5f);
    for (int i = 0; i < W; ++i) out[i] = (x[i] - m) * is * g[i] + b[i];
}

void matvec(const float* x, const float* w, int in, int out_dim, float* out) {
    for (int j = 0; j < out_dim; ++j) out[j] = 0;
    for (int i = 0; i < in; ++i) {
        const float xi = x[i];
        const float* wr = w + static_cast<size_t>(i) * out_dim;
        for (int j = 0; j < out_dim; ++j) out[j] += xi * wr[j];
    }
}

void rope_row(float* x, int heads, int dh, int pos) {
    for (int h = 0; h < heads; ++h)
        for (int i = 0; i < dh / 2; ++i) {
            float theta = static_cast<float>(pos) *
                          std::pow(10000.0f, -2.0f * i / dh);
            float c = std::cos(theta), s = std::sin(theta);
            int a = h * dh + 2 * i, b = a + 1;
            float xa = x[a], xb = x[b];
            x[a] = xa * c - xb * s;
            x[b] = xa * s + xb * c;
        }
}

float gelu1(float x) {
    constexpr float k = 0.7978845608028654f;
    return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

}  // namespace

std::vector<float> DecoderLM::step(LmKvCache& c, const float* emb_row) const {
    const int W = width_, H = heads_, dh = W / H;
    const float scl = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<float> x(emb_row, emb_row + W);
    std::vector<float> a(static_cast<size_t>(W)), q(static_cast<size_t>(W)),
        k(static_cast<size_t>(W)), v(static_cast<size_t>(W)),
        att(static_cast<size_t>(W)), tmp(static_cast<size_t>(W));
    std::vector<float> hid(static_cast<size_t>(hidden_));
    const int pos = c.len;
    for (int l = 0; l < depth_; ++l) {
        const auto& b = blocks_[static_cast<size_t>(l)];
        ln_row(x.data(), b.ln1_g.values().data(), b.ln1_b.values().data(), W, a.data());
        matvec(a.data(), b.wq.values().data(), W, W, q.data());
        matvec(a.data(), b.wk.values().data(), W, W, k.data());
        matvec(a.data(), b.wv.values().data(), W, W, v.data());
        rope_row(q.data(), H, dh, pos);
        rope_row(k.data(), H, dh, pos);
        auto& ck = c.k[static_cast<size_t>(l)];
        auto& cv = c.v[static_cast<size_t>(l)];
        ck.insert(ck.end(), k.begin(), k.end());
        cv.insert(cv.end(), v.begin(), v.end());
        const int n = pos + 1;
        for (int h = 0; h < H; ++h) {
            // scores over all cached positions for this head
            std::vector<float> sc(static_cast<size_t>(n));
            float mx = -1e30f;
            for (int t = 0; t < n; ++t) {
                const float* kt = ck.data() + static_cast<size_t>(t) * W + h * dh;
                float s = 0;
                for (int i = 0; i < dh; ++i) s += q[static_cast<size_t>(h * dh + i)] * kt[i];
                sc[static_cast<size_t>(t)] = s * scl;
                mx = std::max(mx, sc[static_cast<size_t>(t)]);
            }
            float z = 0;
            for (int t = 0; t < n; ++t) {
                sc[static_cast<size_t>(t)] = std::exp(sc[static_cast<size_t>(t)] - mx);
                z += sc[static_cast<size_t>(t)];
            }
            for (int i = 0; i < dh; ++i) att[static_cast<size_t>(h * dh + i)] = 0;
            for (int t = 0; t < n; ++t) {
                const float p = sc[static_cast<size_t>(t)] / z;
                const float* vt = cv.data() + static_cast<size_t>(t) * W + h * dh;
                for (int i = 0; i < dh; ++i)
                    att[static_cast<size_t>(h * dh + i)] += p * vt[i];
            }
        }
        matvec(att.data(), b.wo.values().data(), W, W, tmp.data());
        for (int i = 0; i < W; ++i) x[static_cast<size_t>(i)] += tmp[static_cast<size_t>(i)];

        ln_row(x.data(), b.ln2_g.values().data(), b.ln2_b.values().data(), W, a.data());
        matvec(a.data(), b.ffn1.values().data(), W, hidden_, hid.data());
        for (int i = 0; i < hidden_; ++i)
            hid[static_cast<size_t>(i)] =
                gelu1(hid[static_cast<size_t>(i)] + b.ffn1_b.values()[static_cast<size_t>(i)]);
        matvec(hid.data(), b.ffn2.values().data(), hidden_, W, tmp.data());
        for (int i = 0; i < W; ++i)
            x[static_cast<size_t>(i)] += tmp[static_cast<size_t>(i)] +
                                         b.ffn2_b.values()[static_cast<size_t>(i)];
    }
    ++c.len;
    ln_row(x.data(), lnf_g_.values().data(), lnf_b_.values().data(), W, a.data());
    std::vector<float> logits(static_cast<size_t>(vocab_));
    matvec(a.data(), head_.values().data(), W, vocab_, logits.data());
    for (float lv : logits)
        if (!std::isfinite(lv)) throw NumericError("lm step: non-finite logits");
    return logits;
}

void DecoderLM::set_frozen(ParamStore& store, bool frozen) const {
    for (auto& p : store.params())
        if (p.name.rfind(prefix_, 0) == 0) p.set_frozen(frozen);
}

// ---------------------------------------------------------------------------
// text-only training

float lm_train_step(DecoderLM& lm, const std::vector<const std::vector<int>*>& batch,
                    Optimizer& opt, float audio_jitter, Rng* rng) {
    if (batch.empty()) throw std::invalid_argument("lm_train_step: empty batch");
    std::vector<Tensor> losses;
    std::vector<float> weights;
    int total = 0;
    std::vector<int> counts;
    for (const auto* seq : batch) {
        if (seq->size() < 2)
            throw std::invalid_argument("lm_train_step: sequence too short");
        std::vector<int> input(seq->begin(), seq->end() - 1);
        std::vector<int> targets(seq->begin() + 1, seq->end());
        std::vector<uint8_t> mask(targets.size(), 1);
        Tensor embs = lm.embed(input);
        if (audio_jitter > 0 && rng) {
            std::normal_distribution<float> g(0.0f, audio_jitter);
            std::vector<float> noise(static_cast<size_t>(embs.rows()) * embs.cols(),
                                     0.0f);
            bool inside = false;
            for (size_t i = 0; i < input.size(); ++i) {
                if (input[i] == TextVocab::AUDIO_END) inside = false;
                if (inside)
                    for (int k = 0; k < embs.cols(); ++k)
                        noise[i * static_cast<size_t>(embs.cols()) + k] = g(*rng);
                if (input[i] == TextVocab::AUDIO_BEGIN) inside = true;
            }
            embs = add(embs, Tensor::from({embs.rows(), embs.cols()}, std::move(noise)));
        }
        Tensor logits = lm.forward_embs(embs);
        losses.push_back(cross_entropy_rows(logits, targets, mask));
        counts.push_back(static_cast<int>(targets.size()));
        total += counts.back();
    }
    for (int n : counts)
        weights.push_back(static_cast<float>(n) / static_cast<float>(total));
    Tensor loss = dot_const(stack_scalars(losses), weights);
    opt.zero_grad();
    loss.backward();
    opt.step();
    return loss.item();
}

double lm_perplexity(const DecoderLM& lm, const std::vector<std::vector<int>>& heldout) {
    if (heldout.empty()) throw std::invalid_argument("lm_perplexity: empty set");
    GradGuard no_grad(false);
    double nll = 0;
    int count = 0;
    for (const auto& seq : heldout) {
        if (seq.size() < 2) continue;
        std::vector<int> input(seq.begin(), seq.end() - 1);
        Tensor logits = lm.forward_embs(lm.embed(input));
        const int V = lm.vocab_size();
        for (size_t i = 0; i + 1 < seq.size(); ++i) {
            const float* row = logits.values().data() + i * static_cast<size_t>(V);
            double mx = row[0];
            for (int k = 1; k < V; ++k) mx = std::max(mx, static_cast<double>(row[k]));
            double z = 0;
            for (int k = 0; k < V; ++k) z += std::exp(row[k] - mx);
            nll -= row[seq[i + 1]] - mx - std::log(z);
            ++count;
        }
    }
    return std::exp(nll / count);
}

double unigram_perplexity(const std::vector<std::vector<int>>& train,
                          const std::vector<std::vector<int>>& heldout, int vocab) {
    std::vector<double> counts(static_cast<size_t>(vocab), 1.0);  // add-one
    double total = vocab;
    for (const auto& seq : train)
        for (int t : seq) {
            counts[static_cast<size_t>(t)] += 1;
            total += 1;
        }
    double nll = 0;
    int n = 0;
    for (const auto& seq : heldout)
        for (size_t i = 1; i < seq.size(); ++i) {
            nll -= std::log(counts[static_cast<size_t>(seq[i])] / total);
            ++n;
        }
    return std::exp(nll / n);
}

PretrainReport pretrain_lm(DecoderLM& lm, ParamStore& store,
                           const std::vector<std::vector<int>>& corpus,
                           const std::vector<std::vector<int>>& heldout, int steps,
                           int batch_size, float lr, uint64_t seed,
                           float audio_jitter) {
    if (corpus.empty()) throw std::invalid_argument("pretrain_lm: empty corpus");
    PretrainReport report;
    report.ppl_init = lm_perplexity(lm, heldout);
    report.ppl_unigram = unigram_perplexity(corpus, heldout, lm.vocab_size());
    OptimizerConfig oc;
    oc.learning_rate = lr;
    Optimizer opt(store, oc);
    for (int s = 0; s < steps; ++s) {
        Rng rng = make_rng(mix_seed(seed, static_cast<uint64_t>(s)));
        std::vector<const std::vector<int>*> batch;
        std::uniform_int_distribution<size_t> pick(0, corpus.size() - 1);
        for (int i = 0; i < batch_size; ++i) batch.push_back(&corpus[pick(rng)]);
        lm_train_step(lm, batch, opt, audio_jitter, &rng);
    }
    report.ppl_final = lm_perplexity(lm, heldout);
    return report;
}

// ---------------------------------------------------------------------------
// assembled model

AcllmModel::AcllmModel(const AcllmConfig& cfg_in, TextVocab vocab_in, uint64_t seed)
    : cfg(cfg_in), vocab(std::move(vocab_in)) {
    encoder = std::make_unique<ConformerEncoder>(cfg.enc, store, mix_seed(seed, "enc"));
    Rng rng = make_rng(mix_seed(seed, "conv"));
    const int spliced = cfg.splice * cfg.enc.width;
    conv_w = store
                 .add("conv/w", Tensor::randn({spliced, cfg.lm_width},
                                              1.0f / std::sqrt(static_cast<float>(spliced)),
                                              rng, true))
                 .tensor;
    conv_b = store.add("conv/b", Tensor::zeros({1, cfg.lm_width}, true)).tensor;
    lm = std::make_unique<DecoderLM>(vocab.size(), cfg.lm_width, cfg.lm_depth,
                                     cfg.lm_heads, cfg.lm_ffn_mult, store,
                                     mix_seed(seed, "lm"));
}

Tensor AcllmModel::convert(const Tensor& enc_out) const {
    if (enc_out.rows() < 1) throw std::invalid_argument("convert: empty input");
    return add_rowvec(matmul(splice_rows(enc_out, cfg.splice), conv_w), conv_b);
}

Tensor AcllmModel::audio_embeddings(const FeatureSequence& f) const {
    return convert(encoder->output(encoder->from_features(f)));
}

Tensor AcllmModel::item_loss(const FeatureSequence& f, const std::vector<int>& transcript,
                             const std::vector<int>& context) const {
    Tensor audio = audio_embeddings(f);
    PromptLayout L = build_prompt(vocab, context, transcript, audio.rows());
    std::vector<int> prefix(L.tokens.begin(), L.tokens.begin() + L.audio_begin);
    std::vector<int> suffix(L.tokens.begin() + L.audio_begin + L.audio_len,
                            L.tokens.end());
    Tensor embs = concat_rows({lm->embed(prefix), audio, lm->embed(suffix)});
    Tensor logits = lm->forward_embs(embs);
    const int n = L.length();
    std::vector<int> targets(static_cast<size_t>(n - 1), 0);
    std::vector<uint8_t> mask(static_cast<size_t>(n - 1), 0);
    for (int i = 0; i + 1 < n; ++i) {
        targets[static_cast<size_t>(i)] = std::max(0, L.tokens[static_cast<size_t>(i + 1)]);
        mask[static_cast<size_t>(i)] = L.loss_mask[static_cast<size_t>(i + 1)];
    }
    return cross_entropy_rows(slice_rows(logits, 0, n - 1), targets, mask);
}

void AcllmModel::set_lm_frozen(bool frozen) { lm->set_frozen(store, frozen); }

bool AcllmModel::lm_frozen() const {
    for (const auto& p : store.params())
        if (p.name.rfind(lm->prefix(), 0) == 0) return p.frozen;
    return false;
}

// ---------------------------------------------------------------------------
// fine-tuning steps

namespace {

float batch_step(AcllmModel& m, const std::vector<SftItem>& batch, Optimizer& opt) {
    std::vector<Tensor> losses;
    for (const auto& it : batch) {
        if (it.transcript.empty())
            throw std::invalid_argument("sft: empty transcript");
        losses.push_back(m.item_loss(*it.feats, it.transcript, it.context));
    }
    std::vector<float> w(losses.size(), 1.0f / static_cast<float>(losses.size()));
    Tensor loss = dot_const(stack_scalars(losses), w);
    opt.zero_grad();
    loss.backward();
    opt.step();
    return loss.item();
}

}  // namespace

float sft_step(AcllmModel& m, const std::vector<SftItem>& batch, Optimizer& opt) {
    if (batch.empty()) throw std::invalid_argument("sft_step: empty batch");
    if (!m.lm_frozen()) throw ConfigError("sft_step: LM must be frozen");
    for (const auto& it : batch)
        if (it.triple || !it.context.empty())
            throw std::invalid_argument("sft_step: plain pairs only");
    return batch_step(m, batch, opt);
}

float context_sft_step(AcllmModel& m, const std::vector<SftItem>& batch,
                       float mix_ratio, Optimizer& opt) {
    if (batch.empty()) throw std::invalid_argument("context_sft_step: empty batch");
    if (!(mix_ratio > 0.0f && mix_ratio < 1.0f))
        throw ConfigError("context_sft_step: mix ratio must be in (0, 1)");
    if (!m.lm_frozen()) throw ConfigError("context_sft_step: LM must be frozen");
    for (const auto& it : batch)
        if (it.triple && it.context.empty())
            throw std::invalid_argument("context_sft_step: triple missing context");
    return batch_step(m, batch, opt);
}

}  // namespace acllm
