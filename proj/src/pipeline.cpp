#include "acllm/pipeline.hpp"

#include <json.hpp>

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace acllm {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// configuration

namespace {

template <typename T>
void get(const json& o, const char* k, T& field) {
    if (o.contains(k)) field = o.at(k).get<T>();
}

json corpus_to_json(const CorpusSpec& s) {
    return {{"n_wordlike", s.n_wordlike},
            {"n_charlike", s.n_charlike},
            {"n_homophone_groups", s.n_homophone_groups},
            {"homophone_group_size", s.homophone_group_size},
            {"n_keywords", s.n_keywords},
            {"n_accents", s.n_accents},
            {"noise_level", s.noise_level},
            {"min_words", s.min_words},
            {"max_words", s.max_words},
            {"min_phoneme_dur", s.min_phoneme_dur},
            {"max_phoneme_dur", s.max_phoneme_dur},
            {"n_train", s.n_train},
            {"n_dev", s.n_dev},
            {"n_eval_multidomain", s.n_eval_multidomain},
            {"n_eval_accent", s.n_eval_accent},
            {"n_eval_hardcase", s.n_eval_hardcase},
            {"n_context_train", s.n_context_train},
            {"n_eval_context_strict", s.n_eval_context_strict},
            {"n_eval_context_loose", s.n_eval_context_loose},
            {"n_rl", s.n_rl},
            {"n_longform_train", s.n_longform_train},
            {"n_longform_eval", s.n_longform_eval},
            {"longform_min_sents", s.longform_min_sents},
            {"longform_max_sents", s.longform_max_sents},
            {"sample_rate", s.sample_rate},
            {"window", s.window},
            {"hop", s.hop},
            {"n_mels", s.n_mels},
            {"accent_shift_hz", s.accent_shift_hz}};
}

void corpus_from_json(const json& j, CorpusSpec& s) {
    get(j, "n_wordlike", s.n_wordlike);
    get(j, "n_charlike", s.n_charlike);
    get(j, "n_homophone_groups", s.n_homophone_groups);
    get(j, "homophone_group_size", s.homophone_group_size);
    get(j, "n_keywords", s.n_keywords);
    get(j, "n_accents", s.n_accents);
    get(j, "noise_level", s.noise_level);
    get(j, "min_words", s.min_words);
    get(j, "max_words", s.max_words);
    get(j, "min_phoneme_dur", s.min_phoneme_dur);
    get(j, "max_phoneme_dur", s.max_phoneme_dur);
    get(j, "n_train", s.n_train);
    get(j, "n_dev", s.n_dev);
    get(j, "n_eval_multidomain", s.n_eval_multidomain);
    get(j, "n_eval_accent", s.n_eval_accent);
    get(j, "n_eval_hardcase", s.n_eval_hardcase);
    get(j, "n_context_train", s.n_context_train);
    get(j, "n_eval_context_strict", s.n_eval_context_strict);
    get(j, "n_eval_context_loose", s.n_eval_context_loose);
    get(j, "n_rl", s.n_rl);
    get(j, "n_longform_train", s.n_longform_train);
    get(j, "n_longform_eval", s.n_longform_eval);
    get(j, "longform_min_sents", s.longform_min_sents);
    get(j, "longform_max_sents", s.longform_max_sents);
    get(j, "sample_rate", s.sample_rate);
    get(j, "window", s.window);
    get(j, "hop", s.hop);
    get(j, "n_mels", s.n_mels);
    get(j, "accent_shift_hz", s.accent_shift_hz);
}

json model_to_json(const AcllmConfig& m) {
    return {{"enc",
             {{"input_dim", m.enc.input_dim},
              {"width", m.enc.width},
              {"depth", m.enc.depth},
              {"heads", m.enc.heads},
              {"conv_kernel", m.enc.conv_kernel},
              {"ffn_mult", m.enc.ffn_mult}}},
            {"lm_width", m.lm_width},
            {"lm_depth", m.lm_depth},
            {"lm_heads", m.lm_heads},
            {"lm_ffn_mult", m.lm_ffn_mult},
            {"splice", m.splice}};
}

void model_from_json(const json& j, AcllmConfig& m) {
    if (j.contains("enc")) {
        const json& e = j.at("enc");
        get(e, "input_dim", m.enc.input_dim);
        get(e, "width", m.enc.width);
        get(e, "depth", m.enc.depth);
        get(e, "heads", m.enc.heads);
        get(e, "conv_kernel", m.enc.conv_kernel);
        get(e, "ffn_mult", m.enc.ffn_mult);
    }
    get(j, "lm_width", m.lm_width);
    get(j, "lm_depth", m.lm_depth);
    get(j, "lm_heads", m.lm_heads);
    get(j, "lm_ffn_mult", m.lm_ffn_mult);
    get(j, "splice", m.splice);
}

}  // namespace

std::string config_to_json(const PipelineConfig& cfg) {
    json j = {{"corpus", corpus_to_json(cfg.corpus)},
              {"model", model_to_json(cfg.model)},
              {"ssl",
               {{"K", cfg.ssl.K},
                {"proj_dim", cfg.ssl.proj_dim},
                {"mask_span", cfg.ssl.mask.span_frames},
                {"mask_ratio", cfg.ssl.mask.mask_ratio},
                {"steps", cfg.ssl.steps},
                {"batch", cfg.ssl.batch},
                {"lr", cfg.ssl.lr},
                {"lr_final", cfg.ssl.lr_final},
                {"probe_steps", cfg.ssl.probe_steps},
                {"probe_train_items", cfg.ssl.probe_train_items},
                {"probe_eval_items", cfg.ssl.probe_eval_items},
                {"kmeans_iters", cfg.ssl.kmeans_iters}}},
              {"sft",
               {{"lm_steps", cfg.sft.lm_steps},
                {"lm_batch", cfg.sft.lm_batch},
                {"lm_lr", cfg.sft.lm_lr},
                {"lm_jitter", cfg.sft.lm_jitter},
                {"steps", cfg.sft.steps},
                {"batch", cfg.sft.batch},
                {"lr", cfg.sft.lr},
                {"lr_final", cfg.sft.lr_final},
                {"aug_time_masks", cfg.sft.aug_time_masks},
                {"aug_span", cfg.sft.aug_span},
                {"aug_feat_noise", cfg.sft.aug_feat_noise},
                {"aug_resynth", cfg.sft.aug_resynth},
                {"include_longform", cfg.sft.include_longform}}},
              {"context_sft",
               {{"steps", cfg.context_sft.steps},
                {"batch", cfg.context_sft.batch},
                {"lr", cfg.context_sft.lr},
                {"lr_final", cfg.context_sft.lr_final},
                {"aug_time_masks", cfg.context_sft.aug_time_masks},
                {"aug_span", cfg.context_sft.aug_span},
                {"aug_feat_noise", cfg.context_sft.aug_feat_noise},
                {"aug_resynth", cfg.context_sft.aug_resynth},
                {"mix_ratio", cfg.context_sft.mix_ratio}}},
              {"rl",
               {{"reward_kind", cfg.rl.reward.kind},
                {"keyword_weight", cfg.rl.reward.keyword_weight},
                {"lambda", cfg.rl.lambda},
                {"nbest", cfg.rl.nbest},
                {"beam_size", cfg.rl.beam_size},
                {"max_len", cfg.rl.max_len},
                {"steps", cfg.rl.steps},
                {"max_staleness_steps", cfg.rl.max_staleness_steps},
                {"lr", cfg.rl.lr},
                {"triple_ratio", cfg.rl.triple_ratio}}},
              {"decode",
               {{"alpha", cfg.decode.alpha},
                {"beam_size", cfg.decode.beam_size},
                {"prune_top_k", cfg.decode.prune_top_k},
                {"max_len", cfg.decode.max_len}}},
              {"seed", cfg.seed},
              {"out_dir", cfg.out_dir}};
    return j.dump(2);
}

namespace {

PipelineConfig config_from_parsed(const json& j) {
    PipelineConfig cfg;
    if (j.contains("corpus")) corpus_from_json(j.at("corpus"), cfg.corpus);
    if (j.contains("model")) model_from_json(j.at("model"), cfg.model);
    if (j.contains("ssl")) {
        const json& s = j.at("ssl");
        get(s, "K", cfg.ssl.K);
        get(s, "proj_dim", cfg.ssl.proj_dim);
        get(s, "mask_span", cfg.ssl.mask.span_frames);
        get(s, "mask_ratio", cfg.ssl.mask.mask_ratio);
        get(s, "steps", cfg.ssl.steps);
        get(s, "batch", cfg.ssl.batch);
        get(s, "lr", cfg.ssl.lr);
        get(s, "lr_final", cfg.ssl.lr_final);
        get(s, "probe_steps", cfg.ssl.probe_steps);
        get(s, "probe_train_items", cfg.ssl.probe_train_items);
        get(s, "probe_eval_items", cfg.ssl.probe_eval_items);
        get(s, "kmeans_iters", cfg.ssl.kmeans_iters);
    }
    if (j.contains("sft")) {
        const json& s = j.at("sft");
        get(s, "lm_steps", cfg.sft.lm_steps);
        get(s, "lm_batch", cfg.sft.lm_batch);
        get(s, "lm_lr", cfg.sft.lm_lr);
        get(s, "lm_jitter", cfg.sft.lm_jitter);
        get(s, "steps", cfg.sft.steps);
        get(s, "batch", cfg.sft.batch);
        get(s, "lr", cfg.sft.lr);
        get(s, "lr_final", cfg.sft.lr_final);
        get(s, "aug_time_masks", cfg.sft.aug_time_masks);
        get(s, "aug_span", cfg.sft.aug_span);
        get(s, "aug_feat_noise", cfg.sft.aug_feat_noise);
        get(s, "aug_resynth", cfg.sft.aug_resynth);
        get(s, "include_longform", cfg.sft.include_longform);
    }
    if (j.contains("context_sft")) {
        const json& s = j.at("context_sft");
        get(s, "steps", cfg.context_sft.steps);
        get(s, "batch", cfg.context_sft.batch);
        get(s, "lr", cfg.context_sft.lr);
        get(s, "lr_final", cfg.context_sft.lr_final);
        get(s, "aug_time_masks", cfg.context_sft.aug_time_masks);
        get(s, "aug_span", cfg.context_sft.aug_span);
        get(s, "aug_feat_noise", cfg.context_sft.aug_feat_noise);
        get(s, "aug_resynth", cfg.context_sft.aug_resynth);
        get(s, "mix_ratio", cfg.context_sft.mix_ratio);
    }
    if (j.contains("rl")) {
        const json& s = j.at("rl");
        get(s, "reward_kind", cfg.rl.reward.kind);
        get(s, "keyword_weight", cfg.rl.reward.keyword_weight);
        get(s, "lambda", cfg.rl.lambda);
        get(s, "nbest", cfg.rl.nbest);
        get(s, "beam_size", cfg.rl.beam_size);
        get(s, "max_len", cfg.rl.max_len);
        get(s, "steps", cfg.rl.steps);
        get(s, "max_staleness_steps", cfg.rl.max_staleness_steps);
        get(s, "lr", cfg.rl.lr);
        get(s, "triple_ratio", cfg.rl.triple_ratio);
    }
    if (j.contains("decode")) {
        const json& s = j.at("decode");
        get(s, "alpha", cfg.decode.alpha);
        get(s, "beam_size", cfg.decode.beam_size);
        get(s, "prune_top_k", cfg.decode.prune_top_k);
        get(s, "max_len", cfg.decode.max_len);
    }
    get(j, "seed", cfg.seed);
    get(j, "out_dir", cfg.out_dir);
    return cfg;
}

json parse_toml_subset(const std::string& text) {
    json root = json::object();
    json* section = &root;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        size_t b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        size_t e = line.find_last_not_of(" \t\r");
        std::string s = line.substr(b, e - b + 1);
        if (s.front() == '[') {
            if (s.back() != ']')
                throw ConfigError("config line " + std::to_string(lineno) + ": bad section");
            std::string path = s.substr(1, s.size() - 2);
            section = &root;
            std::istringstream ps(path);
            std::string part;
            while (std::getline(ps, part, '.')) section = &(*section)[part];
            continue;
        }
        size_t eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = s.substr(0, s.find_last_not_of(" \t", eq - 1) + 1);
        size_t vb = s.find_first_not_of(" \t", eq + 1);
        if (vb == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": missing value");
        std::string val = s.substr(vb);
        json* slot = section;
        std::string leaf = key;
        size_t dot;
        while ((dot = leaf.find('.')) != std::string::npos) {
            slot = &(*slot)[leaf.substr(0, dot)];
            leaf = leaf.substr(dot + 1);
        }
        if (val.front() == '"') {
            if (val.size() < 2 || val.back() != '"')
                throw ConfigError("config line " + std::to_string(lineno) + ": unterminated string");
            (*slot)[leaf] = val.substr(1, val.size() - 2);
        } else if (val == "true" || val == "false") {
            (*slot)[leaf] = val == "true";
        } else {
            try {
                size_t pos = 0;
                if (val.find_first_of(".eE") == std::string::npos)
                    (*slot)[leaf] = std::stoll(val, &pos);
                else
                    (*slot)[leaf] = std::stod(val, &pos);
                if (pos != val.size()) throw std::invalid_argument(val);
            } catch (const std::exception&) {
                throw ConfigError("config line " + std::to_string(lineno) + ": bad value " + val);
            }
        }
    }
    return root;
}

}  // namespace

PipelineConfig config_from_text(const std::string& text) {
    size_t b = text.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) throw ConfigError("empty config");
    try {
        if (text[b] == '{') return config_from_parsed(json::parse(text));
        return config_from_parsed(parse_toml_subset(text));
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config parse: ") + e.what());
    }
}

PipelineConfig load_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return config_from_text(ss.str());
}

std::string config_hash(const PipelineConfig& cfg) {
    // out_dir names where artifacts land, not what they are; moving a run
    // must not break its lineage
    PipelineConfig c = cfg;
    c.out_dir.clear();
    return fnv1a_hex(config_to_json(c));
}

std::string lineage_hash(const PipelineConfig& cfg, const std::string& stage) {
    static const std::map<std::string, int> kDepth = {{"ssl_iter1", 0},
                                                      {"ssl_iter2", 0},
                                                      {"sft", 1},
                                                      {"context_sft", 2},
                                                      {"rl", 3}};
    auto it = kDepth.find(stage);
    if (it == kDepth.end()) throw ConfigError("lineage_hash: unknown stage " + stage);
    PipelineConfig c = cfg;
    c.out_dir.clear();
    json j = json::parse(config_to_json(c));
    j.erase("out_dir");
    j.erase("decode");
    if (it->second < 3) j.erase("rl");
    if (it->second < 2) j.erase("context_sft");
    if (it->second < 1) j.erase("sft");
    return fnv1a_hex(j.dump(2));
}

uint64_t stage_seed(const PipelineConfig& cfg, const std::string& stage) {
    return mix_seed(cfg.seed, "stage:" + stage);
}

// ---------------------------------------------------------------------------
// directory lock

DirLock::DirLock(const std::string& dir) {
    fs::create_directories(dir);
    path_ = dir + "/LOCK";
    int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        path_.clear();
        throw ConfigError("output directory locked: " + dir);
    }
    ::close(fd);
}

DirLock::~DirLock() {
    if (!path_.empty()) std::remove(path_.c_str());
}

// ---------------------------------------------------------------------------
// LM pretraining corpus

namespace {

void push_repeat(std::vector<int>& seq, int tok, Rng& rng, int lo, int hi) {
    std::uniform_int_distribution<int> rep(lo, hi);
    int r = rep(rng);
    for (int i = 0; i < r; ++i) seq.push_back(tok);
}

// stand-in token for one lexicon word: group marker for homophones
int standin_token(const TextVocab& v, const Lexicon& lex, int word) {
    const LexiconWord& w = lex.word(word);
    if (w.homophone_group >= 0) return v.group_token(w.homophone_group);
    return v.id(w.surface);
}

void append_standin(std::vector<int>& seq, const TextVocab& v, const Lexicon& lex,
                    const std::vector<int>& words, const std::string& language,
                    Rng& rng) {
    const bool charlike = language == "charlike";
    for (size_t i = 0; i < words.size(); ++i) {
        push_repeat(seq, standin_token(v, lex, words[i]), rng, charlike ? 2 : 3,
                    charlike ? 4 : 6);
        if (i + 1 < words.size()) seq.push_back(TextVocab::SIL);
    }
}

std::vector<int> prompt_shaped(const TextVocab& v, const std::vector<int>& ctx,
                               const std::vector<int>& standin,
                               const std::vector<int>& transcript) {
    std::vector<int> s = {TextVocab::BOS};
    if (!ctx.empty()) {
        s.push_back(TextVocab::CTX_BEGIN);
        s.insert(s.end(), ctx.begin(), ctx.end());
        s.push_back(TextVocab::CTX_END);
    }
    auto instr = v.tokenize(ctx.empty() ? kInstruction : kCtxInstruction, "wordlike");
    s.insert(s.end(), instr.begin(), instr.end());
    s.push_back(TextVocab::AUDIO_BEGIN);
    s.insert(s.end(), standin.begin(), standin.end());
    s.push_back(TextVocab::AUDIO_END);
    s.insert(s.end(), transcript.begin(), transcript.end());
    s.push_back(TextVocab::EOS);
    return s;
}

}  // namespace

std::vector<std::vector<int>> build_lm_corpus(const CorpusData& corpus,
                                              const TextVocab& vocab,
                                              uint64_t seed) {
    const Lexicon& lex = corpus.lexicon;
    std::vector<std::vector<int>> out;

    auto add_utt = [&](const Utterance& u) {
        Rng rng = make_rng(mix_seed(seed, "lm:" + u.id));
        std::vector<int> standin;
        append_standin(standin, vocab, lex, u.words, u.language, rng);
        std::vector<int> ctx;
        if (!u.context.empty()) ctx = vocab.tokenize(u.context, "wordlike");
        out.push_back(
            prompt_shaped(vocab, ctx, standin, vocab.tokenize(u.transcript, u.language)));
    };
    for (const Utterance* u : corpus.split("train")) add_utt(*u);
    for (const Utterance* u : corpus.split("train_context")) add_utt(*u);

    // long-form groups: one concatenated stream so the introducer word can
    // resolve a homophone marker across sentence boundaries
    {
        std::vector<std::string> order;
        std::map<std::string, std::vector<const Utterance*>> groups;
        for (const Utterance* u : corpus.split("train_longform")) {
            if (!groups.count(u->longform_group)) order.push_back(u->longform_group);
            groups[u->longform_group].push_back(u);
        }
        for (const auto& gid : order) {
            Rng rng = make_rng(mix_seed(seed, "lmlf:" + gid));
            std::vector<int> standin, transcript;
            for (size_t si = 0; si < groups[gid].size(); ++si) {
                const Utterance* u = groups[gid][si];
                if (si > 0) {
                    standin.push_back(TextVocab::SIL);
                    standin.push_back(TextVocab::SIL);
                }
                append_standin(standin, vocab, lex, u->words, u->language, rng);
                auto tr = vocab.tokenize(u->transcript, u->language);
                transcript.insert(transcript.end(), tr.begin(), tr.end());
            }
            out.push_back(prompt_shaped(vocab, {}, standin, transcript));
        }
    }

    // explicit introducer -> member association patterns
    std::vector<int> fillers;
    for (size_t i = 0; i < lex.words.size(); ++i)
        if (lex.words[i].language == "wordlike" && lex.words[i].homophone_group < 0)
            fillers.push_back(static_cast<int>(i));
    for (const auto& group : lex.homophone_groups) {
        for (int member : group) {
            const LexiconWord& w = lex.word(member);
            for (int rep = 0; rep < 4; ++rep) {
                Rng rng = make_rng(mix_seed(seed, "lmaug:" + w.surface + ":" +
                                                      std::to_string(rep)));
                std::uniform_int_distribution<size_t> fi(0, fillers.size() - 1);
                std::uniform_int_distribution<int> nf(1, 3);
                std::vector<int> words = {w.assoc_word};
                for (int k = nf(rng); k > 0; --k) words.push_back(fillers[fi(rng)]);
                words.push_back(member);
                if (nf(rng) > 1) words.push_back(fillers[fi(rng)]);
                std::vector<int> standin;
                append_standin(standin, vocab, lex, words, "wordlike", rng);
                std::vector<int> transcript;
                for (int wi : words) transcript.push_back(vocab.id(lex.word(wi).surface));
                out.push_back(prompt_shaped(vocab, {}, standin, transcript));
            }
        }
    }
    if (out.empty()) throw ConfigError("build_lm_corpus: empty corpus");
    return out;
}

std::vector<LongformPair> longform_pairs(const CorpusData& corpus,
                                         const std::string& split) {
    std::vector<LongformPair> out;
    std::vector<std::string> order;
    std::map<std::string, size_t> index;
    for (const Utterance* u : corpus.split(split)) {
        auto it = index.find(u->longform_group);
        if (it == index.end()) {
            index[u->longform_group] = out.size();
            out.push_back({});
            it = index.find(u->longform_group);
        }
        LongformPair& p = out[it->second];
        FeatureSequence f = corpus.features(*u);
        if (p.feats.T == 0) p.feats.D = f.D;
        p.feats.frames.insert(p.feats.frames.end(), f.frames.begin(), f.frames.end());
        p.feats.T += f.T;
        if (!p.transcript.empty()) p.transcript += ' ';
        p.transcript += u->transcript;
    }
    return out;
}

// ---------------------------------------------------------------------------
// stage plumbing

namespace {

std::vector<FeatureSequence> cache_features(const CorpusData& corpus,
                                            const std::vector<const Utterance*>& items) {
    std::vector<FeatureSequence> out;
    out.reserve(items.size());
    for (const Utterance* u : items) out.push_back(corpus.features(*u));
    return out;
}

std::vector<ProbeItem> make_probe_items(const CorpusData& corpus,
                                        const std::vector<const Utterance*>& us,
                                        size_t lo, size_t n) {
    std::vector<ProbeItem> out;
    for (size_t i = lo; i < std::min(us.size(), lo + n); ++i) {
        ProbeItem p;
        p.feats = corpus.features(*us[i]);
        for (int ph : us[i]->phonemes)
            if (ph != 0) p.target.push_back(ph);
        out.push_back(std::move(p));
    }
    return out;
}

Checkpoint base_ckpt(const std::string& stage, const PipelineConfig& cfg) {
    Checkpoint c;
    c.meta.stage = stage;
    c.meta.config_hash = lineage_hash(cfg, stage);
    c.meta.seed = cfg.seed;
    return c;
}

struct Resume {
    bool found = false;
    int start = 0;
    Checkpoint ckpt;
};

Resume try_resume(const std::string& part_path, const std::string& stage,
                  const std::string& hash) {
    Resume r;
    if (!fs::exists(part_path)) return r;
    r.ckpt = load_checkpoint(part_path);
    if (r.ckpt.meta.stage != stage || r.ckpt.meta.config_hash != hash)
        throw StageOrderError("partial checkpoint lineage mismatch: " + part_path);
    r.found = true;
    r.start = static_cast<int>(r.ckpt.meta.step_count);
    return r;
}

std::ofstream open_log(const std::string& path, bool append) {
    std::ofstream os(path, append ? std::ios::app : std::ios::trunc);
    if (!os) throw ConfigError("cannot write log " + path);
    return os;
}

void log_step(std::ofstream& os, int step, float loss) {
    json j = {{"step", step}, {"loss", loss}};
    os << j.dump() << '\n';
}

// Zeroes n_masks random time spans of up to `span` frames and adds fresh
// Gaussian noise of std `noise` to every value. Each utterance carries a
// single fixed noise realization, so without this the loop replays identical
// features every epoch and the encoder memorizes them.
FeatureSequence augment_features(const FeatureSequence& f, int n_masks, int span,
                                 float noise, Rng& rng) {
    FeatureSequence out = f;
    std::uniform_int_distribution<int> len(1, std::max(1, span));
    for (int m = 0; m < n_masks; ++m) {
        int L = std::min(len(rng), f.T);
        std::uniform_int_distribution<int> start(0, f.T - L);
        int s = start(rng);
        std::fill(out.frames.begin() + static_cast<size_t>(s) * f.D,
                  out.frames.begin() + static_cast<size_t>(s + L) * f.D, 0.0f);
    }
    if (noise > 0) {
        std::normal_distribution<float> jitter(0.0f, noise);
        for (float& v : out.frames) v += jitter(rng);
    }
    return out;
}

// Fresh acoustic rendering of a training utterance: new phoneme durations,
// word-gap lengths and noise under the same accent and transcript. The corpus
// is generative, so training can draw unlimited tempo variants of each item
// (the speed-perturbation analogue); without this the loop replays the one
// fixed rendering every epoch and the encoder memorizes it.
FeatureSequence resynth_features(const CorpusData& c, const Utterance& u, Rng& rng) {
    std::vector<int> durs = u.phoneme_durs;
    std::uniform_int_distribution<int> dur(c.spec.min_phoneme_dur,
                                           c.spec.max_phoneme_dur);
    std::uniform_int_distribution<int> gap(1, 2);
    for (size_t p = 1; p + 1 < durs.size(); ++p)
        durs[p] = u.phonemes[p] == 0 ? gap(rng) : dur(rng);
    auto wav = synth_waveform(c.lexicon, u.phonemes, durs, u.accent_id,
                              c.spec.noise_level, rng(), c.spec);
    return mel_filterbank(wav, c.spec.sample_rate, c.spec.window, c.spec.hop,
                          c.spec.n_mels);
}

// Linear decay from lr to lr_final over the whole stage; lr_final <= 0 keeps
// the rate constant. A pure function of the absolute step index so resumed
// runs see the same schedule.
float step_lr(float lr, float lr_final, int step, int total) {
    if (lr_final <= 0 || total <= 1) return lr;
    float t = static_cast<float>(step) / static_cast<float>(total - 1);
    return lr + (lr_final - lr) * t;
}

// trains on [start, end); per-step batches and masks derive from absolute
// step indices so an interrupted run resumes identically
void ssl_train_loop(SslModel& model, Optimizer& opt,
                    const std::vector<FeatureSequence>& feats,
                    const std::vector<LabelSequence>& labels,
                    const SslStageConfig& sc, uint64_t sseed, int start, int end,
                    std::ofstream& log) {
    for (int step = start; step < end; ++step) {
        opt.set_learning_rate(step_lr(sc.lr, sc.lr_final, step, sc.steps));
        Rng rng = make_rng(mix_seed(sseed, 1000 + static_cast<uint64_t>(step)));
        std::uniform_int_distribution<size_t> pick(0, feats.size() - 1);
        std::vector<SslBatchItem> batch;
        for (int b = 0; b < sc.batch; ++b) {
            size_t i = pick(rng);
            batch.push_back({&feats[i], &labels[i]});
        }
        MaskSpec ms = sc.mask;
        ms.seed = mix_seed(sseed, 2000 + static_cast<uint64_t>(step));
        log_step(log, step, ssl_step(model, batch, ms, opt));
    }
}

// Labels one sequence under the stage tokenizer. A kmeans codebook lives in
// the labeler encoder's representation space, not raw feature space.
LabelSequence tokenize_sequence(const FeatureSequence& f, const Codebook& cb,
                                const ConformerEncoder* labeler) {
    if (cb.kind != "kmeans") return label_frames(f, cb);
    if (!labeler) throw ConfigError("kmeans codebook without a labeler encoder");
    GradGuard no_grad(false);
    Tensor rep = labeler->block_output(labeler->from_features(f), cb.source_layer);
    return label_frames(rep.impl->v, f.T, rep.cols(), cb);
}

double ssl_validation_loss(const SslModel& model, const CorpusData& corpus,
                           const Codebook& cb, const SslStageConfig& sc,
                           uint64_t sseed, const ConformerEncoder* labeler) {
    auto dev = corpus.split("dev");
    std::vector<FeatureSequence> feats = cache_features(corpus, dev);
    std::vector<LabelSequence> labels;
    for (const auto& f : feats) labels.push_back(tokenize_sequence(f, cb, labeler));
    std::vector<SslBatchItem> batch;
    for (size_t i = 0; i < feats.size(); ++i) batch.push_back({&feats[i], &labels[i]});
    MaskSpec ms = sc.mask;
    ms.seed = mix_seed(sseed, "val_mask");
    return ssl_eval_loss(model, batch, ms);
}

std::string stage_path(const PipelineConfig& cfg, const std::string& stage,
                       bool partial) {
    return cfg.out_dir + "/" + stage + (partial ? ".part.aclk" : ".aclk");
}

// Shared scaffolding for both SSL iterations: label, train, validate, save.
std::string run_ssl_stage(const std::string& stage, const PipelineConfig& cfg,
                          const CorpusData& corpus, const Codebook& cb,
                          const std::vector<FeatureSequence>& train_feats,
                          const std::vector<LabelSequence>& labels,
                          SslModel& model, int stop_after,
                          const std::string& extra_json,
                          const ConformerEncoder* labeler = nullptr) {
    const uint64_t sseed = stage_seed(cfg, stage);
    const std::string hash = lineage_hash(cfg, stage);
    const std::string part = stage_path(cfg, stage, true);

    OptimizerConfig oc;
    oc.learning_rate = cfg.ssl.lr;
    Optimizer opt(model.store, oc);
    Resume res = try_resume(part, stage, hash);
    if (res.found) {
        checkpoint_to_store(res.ckpt, model.store);
        checkpoint_to_optimizer(res.ckpt, model.store, opt);
    }
    const int total = cfg.ssl.steps;
    const int end = stop_after > 0 ? std::min(res.start + stop_after, total) : total;
    auto log = open_log(cfg.out_dir + "/" + stage + "_log.jsonl", res.found);
    ssl_train_loop(model, opt, train_feats, labels, cfg.ssl, sseed, res.start, end, log);

    Checkpoint c = base_ckpt(stage, cfg);
    store_to_checkpoint(model.store, c);
    add_codebook(c, "tokenizer", cb);
    if (end < total) {
        optimizer_to_checkpoint(opt, model.store, c);
        c.meta.step_count = end;
        c.meta.extra_json = extra_json;
        save_checkpoint(part, c);
        return part;
    }
    c.meta.step_count = total;
    json extra = json::parse(extra_json);
    extra["val_loss"] = ssl_validation_loss(model, corpus, cb, cfg.ssl, sseed, labeler);
    extra["K"] = cfg.ssl.K;
    c.meta.extra_json = extra.dump();
    const std::string path = stage_path(cfg, stage, false);
    save_checkpoint(path, c);
    std::error_code ec;
    fs::remove(part, ec);
    return path;
}

std::string stage_ssl_iter1(const PipelineConfig& cfg, const CorpusData& corpus,
                            int stop_after) {
    const uint64_t sseed = stage_seed(cfg, "ssl_iter1");
    auto train = corpus.split("train");
    auto feats = cache_features(corpus, train);
    Codebook cb = init_random_projection(cfg.corpus.n_mels, cfg.ssl.proj_dim,
                                         cfg.ssl.K, mix_seed(sseed, "cb"));
    std::vector<LabelSequence> labels;
    for (const auto& f : feats) labels.push_back(label_frames(f, cb));
    SslModel model(cfg.model.enc, cfg.ssl.K, mix_seed(sseed, "init"));
    return run_ssl_stage("ssl_iter1", cfg, corpus, cb, feats, labels, model,
                         stop_after, "{}");
}

std::string stage_ssl_iter2(const PipelineConfig& cfg, const CorpusData& corpus,
                            const Checkpoint& input, int stop_after) {
    const uint64_t sseed = stage_seed(cfg, "ssl_iter2");
    auto train = corpus.split("train");
    auto feats = cache_features(corpus, train);

    // iteration-1 encoder for probing and the new codebook
    SslModel iter1(cfg.model.enc, cfg.ssl.K, mix_seed(stage_seed(cfg, "ssl_iter1"), "init"));
    checkpoint_to_store(input, iter1.store);
    auto dev = corpus.split("dev");
    auto ptrain = make_probe_items(corpus, dev, 0,
                                   static_cast<size_t>(cfg.ssl.probe_train_items));
    auto peval = make_probe_items(corpus, dev,
                                  static_cast<size_t>(cfg.ssl.probe_train_items),
                                  static_cast<size_t>(cfg.ssl.probe_eval_items));
    const int phoneme_vocab = static_cast<int>(corpus.lexicon.phonemes.size()) - 1;
    ProbeReport rep1 = probe_layers(*iter1.encoder, ptrain, peval, phoneme_vocab,
                                    cfg.ssl.probe_steps, mix_seed(sseed, "probe"));

    std::vector<const FeatureSequence*> fp;
    for (const auto& f : feats) fp.push_back(&f);
    TokenizerIteration tok = iterate_tokenizer(*iter1.encoder, fp, rep1.selected_layer,
                                               cfg.ssl.K, cfg.ssl.kmeans_iters,
                                               mix_seed(sseed, "kmeans"));

    SslModel model(cfg.model.enc, cfg.ssl.K, mix_seed(sseed, "init"));
    json extra = {{"probe_iter1", json::parse(rep1.to_json())}};
    std::string out = run_ssl_stage("ssl_iter2", cfg, corpus, tok.codebook, feats,
                                    tok.labels, model, stop_after, extra.dump(),
                                    iter1.encoder.get());
    if (out == stage_path(cfg, "ssl_iter2", true)) return out;  // paused

    // probe the finished iteration-2 encoder with the identical budget
    ProbeReport rep2 = probe_layers(*model.encoder, ptrain, peval, phoneme_vocab,
                                    cfg.ssl.probe_steps, mix_seed(sseed, "probe"));
    Checkpoint c = load_checkpoint(out);
    json e = json::parse(c.meta.extra_json);
    e["probe_iter2"] = json::parse(rep2.to_json());
    e["selected_layer"] = rep1.selected_layer;
    c.meta.extra_json = e.dump();
    save_checkpoint(out, c);
    return out;
}

void load_prefixed(const Checkpoint& c, ParamStore& store, const std::string& prefix) {
    for (auto& p : store.params()) {
        if (p.name.rfind(prefix, 0) != 0) continue;
        const CkptEntry* e = c.find(p.name);
        if (!e) throw StageOrderError("checkpoint missing parameter " + p.name);
        if (e->rows != p.tensor.rows() || e->cols != p.tensor.cols())
            throw StageOrderError("checkpoint shape mismatch for " + p.name);
        p.tensor.impl->v = e->values;
    }
}

struct SftItems {
    std::vector<FeatureSequence> feats;  // owns storage for items
    std::vector<SftItem> items;
};

SftItems build_sft_items(const CorpusData& corpus, const TextVocab& vocab,
                         bool include_longform) {
    SftItems out;
    auto train = corpus.split("train");
    out.feats = cache_features(corpus, train);
    std::vector<LongformPair> lf;
    if (include_longform) {
        lf = longform_pairs(corpus, "train_longform");
        for (auto& p : lf) out.feats.push_back(std::move(p.feats));
    }
    for (size_t i = 0; i < train.size(); ++i) {
        SftItem it;
        it.feats = &out.feats[i];
        it.utt = train[i];
        it.transcript = vocab.tokenize(train[i]->transcript, train[i]->language);
        out.items.push_back(std::move(it));
    }
    for (size_t i = 0; i < lf.size(); ++i) {
        SftItem it;
        it.feats = &out.feats[train.size() + i];
        it.transcript = vocab.tokenize(lf[i].transcript, "wordlike");
        out.items.push_back(std::move(it));
    }
    return out;
}

std::string stage_sft(const PipelineConfig& cfg, const CorpusData& corpus,
                      const Checkpoint& input, int stop_after) {
    const uint64_t sseed = stage_seed(cfg, "sft");
    const std::string hash = lineage_hash(cfg, "sft");
    const std::string part = stage_path(cfg, "sft", true);

    TextVocab vocab = TextVocab::build(corpus.lexicon, cfg.corpus.n_homophone_groups);
    AcllmModel m(cfg.model, vocab, mix_seed(sseed, "init"));
    load_prefixed(input, m.store, "enc/");

    Resume res = try_resume(part, "sft", hash);
    json extra;
    if (!res.found) {
        auto lm_corpus = build_lm_corpus(corpus, vocab, mix_seed(sseed, "lmtext"));
        std::vector<std::vector<int>> heldout;
        std::vector<std::vector<int>> train_text;
        for (size_t i = 0; i < lm_corpus.size(); ++i)
            (i % 10 == 9 ? heldout : train_text).push_back(std::move(lm_corpus[i]));
        PretrainReport rep =
            pretrain_lm(*m.lm, m.store, train_text, heldout, cfg.sft.lm_steps,
                        cfg.sft.lm_batch, cfg.sft.lm_lr, mix_seed(sseed, "lmtrain"),
                        cfg.sft.lm_jitter);
        extra = {{"lm_ppl_init", rep.ppl_init},
                 {"lm_ppl_final", rep.ppl_final},
                 {"lm_ppl_unigram", rep.ppl_unigram}};
    } else {
        extra = json::parse(res.ckpt.meta.extra_json);
    }
    m.set_lm_frozen(true);

    OptimizerConfig oc;
    oc.learning_rate = cfg.sft.lr;
    Optimizer opt(m.store, oc);
    if (res.found) {
        checkpoint_to_store(res.ckpt, m.store);
        checkpoint_to_optimizer(res.ckpt, m.store, opt);
    }
    SftItems data = build_sft_items(corpus, vocab, cfg.sft.include_longform);

    const int total = cfg.sft.steps;
    const int end = stop_after > 0 ? std::min(res.start + stop_after, total) : total;
    auto log = open_log(cfg.out_dir + "/sft_log.jsonl", res.found);
    for (int step = res.start; step < end; ++step) {
        opt.set_learning_rate(step_lr(cfg.sft.lr, cfg.sft.lr_final, step, total));
        Rng rng = make_rng(mix_seed(sseed, 1000 + static_cast<uint64_t>(step)));
        std::uniform_int_distribution<size_t> pick(0, data.items.size() - 1);
        std::vector<SftItem> batch;
        std::vector<FeatureSequence> aug;  // reserve: pointers into it must hold
        aug.reserve(2 * static_cast<size_t>(cfg.sft.batch));
        for (int b = 0; b < cfg.sft.batch; ++b) batch.push_back(data.items[pick(rng)]);
        if (cfg.sft.aug_resynth || cfg.sft.aug_time_masks > 0 ||
            cfg.sft.aug_feat_noise > 0) {
            for (auto& it : batch) {
                const FeatureSequence& base =
                    cfg.sft.aug_resynth && it.utt
                        ? aug.emplace_back(resynth_features(corpus, *it.utt, rng))
                        : *it.feats;
                aug.push_back(augment_features(base, cfg.sft.aug_time_masks,
                                               cfg.sft.aug_span,
                                               cfg.sft.aug_feat_noise, rng));
                it.feats = &aug.back();
            }
        }
        log_step(log, step, sft_step(m, batch, opt));
    }

    Checkpoint c = base_ckpt("sft", cfg);
    store_to_checkpoint(m.store, c);
    add_codebook(c, "tokenizer", get_codebook(input, "tokenizer"));
    c.meta.extra_json = extra.dump();
    if (end < total) {
        optimizer_to_checkpoint(opt, m.store, c);
        c.meta.step_count = end;
        save_checkpoint(part, c);
        return part;
    }
    c.meta.step_count = total;
    const std::string path = stage_path(cfg, "sft", false);
    save_checkpoint(path, c);
    std::error_code ec;
    fs::remove(part, ec);
    return path;
}

std::string stage_context_sft(const PipelineConfig& cfg, const CorpusData& corpus,
                              const Checkpoint& input, int stop_after) {
    const uint64_t sseed = stage_seed(cfg, "context_sft");
    const std::string hash = lineage_hash(cfg, "context_sft");
    const std::string part = stage_path(cfg, "context_sft", true);

    TextVocab vocab = TextVocab::build(corpus.lexicon, cfg.corpus.n_homophone_groups);
    AcllmModel m(cfg.model, vocab, mix_seed(sseed, "init"));
    checkpoint_to_store(input, m.store);
    m.set_lm_frozen(true);

    OptimizerConfig oc;
    oc.learning_rate = cfg.context_sft.lr;
    Optimizer opt(m.store, oc);
    Resume res = try_resume(part, "context_sft", hash);
    if (res.found) {
        checkpoint_to_store(res.ckpt, m.store);
        checkpoint_to_optimizer(res.ckpt, m.store, opt);
    }

    auto plain = corpus.split("train");
    auto triples = corpus.split("train_context");
    if (triples.empty()) throw StageOrderError("context_sft: no context triples in corpus");
    auto plain_feats = cache_features(corpus, plain);
    auto triple_feats = cache_features(corpus, triples);

    const int total = cfg.context_sft.steps;
    const int end = stop_after > 0 ? std::min(res.start + stop_after, total) : total;
    auto log = open_log(cfg.out_dir + "/context_sft_log.jsonl", res.found);
    for (int step = res.start; step < end; ++step) {
        opt.set_learning_rate(
            step_lr(cfg.context_sft.lr, cfg.context_sft.lr_final, step, total));
        Rng rng = make_rng(mix_seed(sseed, 1000 + static_cast<uint64_t>(step)));
        std::uniform_real_distribution<float> coin(0.0f, 1.0f);
        std::vector<SftItem> batch;
        for (int b = 0; b < cfg.context_sft.batch; ++b) {
            SftItem it;
            if (coin(rng) < cfg.context_sft.mix_ratio) {
                std::uniform_int_distribution<size_t> pick(0, triples.size() - 1);
                size_t i = pick(rng);
                it.feats = &triple_feats[i];
                it.utt = triples[i];
                it.transcript = vocab.tokenize(triples[i]->transcript, "wordlike");
                it.context = vocab.tokenize(triples[i]->context, "wordlike");
                it.triple = true;
            } else {
                std::uniform_int_distribution<size_t> pick(0, plain.size() - 1);
                size_t i = pick(rng);
                it.feats = &plain_feats[i];
                it.utt = plain[i];
                it.transcript = vocab.tokenize(plain[i]->transcript, plain[i]->language);
            }
            batch.push_back(std::move(it));
        }
        std::vector<FeatureSequence> aug;  // reserve: pointers into it must hold
        aug.reserve(2 * batch.size());
        if (cfg.context_sft.aug_resynth || cfg.context_sft.aug_time_masks > 0 ||
            cfg.context_sft.aug_feat_noise > 0) {
            for (auto& it : batch) {
                const FeatureSequence& base =
                    cfg.context_sft.aug_resynth && it.utt
                        ? aug.emplace_back(resynth_features(corpus, *it.utt, rng))
                        : *it.feats;
                aug.push_back(augment_features(base,
                                               cfg.context_sft.aug_time_masks,
                                               cfg.context_sft.aug_span,
                                               cfg.context_sft.aug_feat_noise,
                                               rng));
                it.feats = &aug.back();
            }
        }
        log_step(log, step,
                 context_sft_step(m, batch, cfg.context_sft.mix_ratio, opt));
    }

    Checkpoint c = base_ckpt("context_sft", cfg);
    store_to_checkpoint(m.store, c);
    add_codebook(c, "tokenizer", get_codebook(input, "tokenizer"));
    c.meta.extra_json = input.meta.extra_json;
    if (end < total) {
        optimizer_to_checkpoint(opt, m.store, c);
        c.meta.step_count = end;
        save_checkpoint(part, c);
        return part;
    }
    c.meta.step_count = total;
    const std::string path = stage_path(cfg, "context_sft", false);
    save_checkpoint(path, c);
    std::error_code ec;
    fs::remove(part, ec);
    return path;
}

std::string stage_rl(const PipelineConfig& cfg, const CorpusData& corpus,
                     const Checkpoint& input, int stop_after) {
    const uint64_t sseed = stage_seed(cfg, "rl");
    const std::string hash = lineage_hash(cfg, "rl");
    const std::string part = stage_path(cfg, "rl", true);

    TextVocab vocab = TextVocab::build(corpus.lexicon, cfg.corpus.n_homophone_groups);
    AcllmModel m(cfg.model, vocab, mix_seed(sseed, "init"));
    checkpoint_to_store(input, m.store);
    m.set_lm_frozen(true);

    OptimizerConfig oc;
    oc.learning_rate = cfg.rl.lr;
    Optimizer opt(m.store, oc);
    Resume res = try_resume(part, "rl", hash);
    if (res.found) {
        checkpoint_to_store(res.ckpt, m.store);
        checkpoint_to_optimizer(res.ckpt, m.store, opt);
    }

    auto plain = corpus.split("rl");
    auto plain_feats = cache_features(corpus, plain);
    std::vector<RlItem> items;
    auto keyword_spans = [&](const Utterance& u) {
        std::vector<std::vector<std::string>> spans;
        for (const auto& k : u.keywords) spans.push_back(error_units(k, u.language));
        return spans;
    };
    for (size_t i = 0; i < plain.size(); ++i)
        items.push_back({&plain_feats[i],
                         vocab.tokenize(plain[i]->transcript, plain[i]->language),
                         {},
                         keyword_spans(*plain[i])});
    // strict triples keep context recall alive through RL
    std::vector<const Utterance*> strict;
    for (const Utterance* u : corpus.split("train_context"))
        if (u->context_dependency == "strict") strict.push_back(u);
    size_t n_triples = 0;
    if (cfg.rl.triple_ratio > 0 && !strict.empty())
        n_triples = std::min(strict.size(),
                             static_cast<size_t>(std::lround(
                                 cfg.rl.triple_ratio / (1.0f - cfg.rl.triple_ratio) *
                                 static_cast<float>(plain.size()))));
    std::vector<FeatureSequence> triple_feats;
    for (size_t i = 0; i < n_triples; ++i) triple_feats.push_back(corpus.features(*strict[i]));
    for (size_t i = 0; i < n_triples; ++i)
        items.push_back({&triple_feats[i],
                         vocab.tokenize(strict[i]->transcript, "wordlike"),
                         vocab.tokenize(strict[i]->context, "wordlike"),
                         keyword_spans(*strict[i])});

    HypothesisService svc(cfg.model, vocab, cfg.rl.max_staleness_steps);
    RlConfig rc;
    rc.reward = cfg.rl.reward;
    rc.lambda = cfg.rl.lambda;
    rc.nbest = cfg.rl.nbest;
    rc.beam_size = cfg.rl.beam_size;
    rc.max_len = cfg.rl.max_len;
    rc.steps = cfg.rl.steps;
    rc.start_step = res.start;
    rc.max_staleness_steps = cfg.rl.max_staleness_steps;
    rc.seed = mix_seed(sseed, "rl");
    const int end = stop_after > 0 ? std::min(res.start + stop_after, cfg.rl.steps)
                                   : cfg.rl.steps;
    RlConfig rc_run = rc;
    rc_run.steps = end;
    RlReport rep = rl_train(m, items, rc_run, svc, opt);
    auto log = open_log(cfg.out_dir + "/rl_log.jsonl", res.found);
    for (size_t i = 0; i < rep.losses.size(); ++i)
        log_step(log, res.start + static_cast<int>(i), rep.losses[i]);

    Checkpoint c = base_ckpt("rl", cfg);
    store_to_checkpoint(m.store, c);
    add_codebook(c, "tokenizer", get_codebook(input, "tokenizer"));
    json extra = json::parse(input.meta.extra_json);
    extra["reward_kind"] = cfg.rl.reward.kind;
    extra["ce_only_steps"] = rep.ce_only_steps;
    c.meta.extra_json = extra.dump();
    if (end < cfg.rl.steps) {
        optimizer_to_checkpoint(opt, m.store, c);
        c.meta.step_count = end;
        save_checkpoint(part, c);
        return part;
    }
    c.meta.step_count = cfg.rl.steps;
    const std::string path = stage_path(cfg, "rl", false);
    save_checkpoint(path, c);
    std::error_code ec;
    fs::remove(part, ec);
    return path;
}

}  // namespace

std::unique_ptr<AcllmModel> model_from_checkpoint(const PipelineConfig& cfg,
                                                  const CorpusData& corpus,
                                                  const Checkpoint& ckpt) {
    TextVocab vocab = TextVocab::build(corpus.lexicon, cfg.corpus.n_homophone_groups);
    auto m = std::make_unique<AcllmModel>(cfg.model, vocab, 1);
    checkpoint_to_store(ckpt, m->store);
    m->set_lm_frozen(true);
    return m;
}

std::string run_stage(const std::string& stage, const PipelineConfig& cfg,
                      const std::string& input_ckpt, int stop_after) {
    static const std::map<std::string, std::vector<std::string>> kAllowedInputs = {
        {"ssl_iter1", {}},
        {"ssl_iter2", {"ssl_iter1"}},
        {"sft", {"ssl_iter1", "ssl_iter2"}},
        {"context_sft", {"sft"}},
        {"rl", {"context_sft"}}};
    auto allowed = kAllowedInputs.find(stage);
    if (allowed == kAllowedInputs.end())
        throw ConfigError("run_stage: unknown stage " + stage);

    Checkpoint input;
    if (allowed->second.empty()) {
        if (!input_ckpt.empty())
            throw StageOrderError(stage + " takes no input checkpoint");
    } else {
        if (input_ckpt.empty())
            throw StageOrderError(stage + " requires an input checkpoint");
        input = load_checkpoint(input_ckpt);
        bool ok = false;
        for (const auto& s : allowed->second) ok = ok || input.meta.stage == s;
        if (!ok)
            throw StageOrderError(stage + " cannot start from a " + input.meta.stage +
                                  " checkpoint");
        if (input.meta.config_hash != lineage_hash(cfg, input.meta.stage))
            throw StageOrderError("input checkpoint lineage mismatch for " + stage);
    }

    DirLock lock(cfg.out_dir);
    CorpusData corpus = generate_corpus(cfg.corpus, mix_seed(cfg.seed, "corpus"));
    if (stage == "ssl_iter1") return stage_ssl_iter1(cfg, corpus, stop_after);
    if (stage == "ssl_iter2") return stage_ssl_iter2(cfg, corpus, input, stop_after);
    if (stage == "sft") return stage_sft(cfg, corpus, input, stop_after);
    if (stage == "context_sft") return stage_context_sft(cfg, corpus, input, stop_after);
    return stage_rl(cfg, corpus, input, stop_after);
}

// ---------------------------------------------------------------------------
// experiments

ScalingSummary run_scaling_study(const PipelineConfig& cfg,
                                 const std::vector<std::pair<int, int>>& sizes) {
    if (sizes.size() < 3)
        throw std::invalid_argument("scaling: need >= 3 model sizes");
    CorpusData corpus = generate_corpus(cfg.corpus, mix_seed(cfg.seed, "corpus"));
    auto train = corpus.split("train");
    auto feats = cache_features(corpus, train);

    std::vector<ScalingRecord> records;
    for (const auto& [width, depth] : sizes) {
        PipelineConfig c = cfg;
        c.model.enc.width = width;
        c.model.enc.depth = depth;
        while (c.model.enc.heads > 1 && width % c.model.enc.heads != 0)
            c.model.enc.heads /= 2;
        if (width % c.model.enc.heads != 0)
            throw ConfigError("scaling: bad width/heads");
        const uint64_t sseed = stage_seed(c, "ssl_iter1");

        Codebook cb = init_random_projection(c.corpus.n_mels, c.ssl.proj_dim, c.ssl.K,
                                             mix_seed(sseed, "cb"));
        std::vector<LabelSequence> labels;
        for (const auto& f : feats) labels.push_back(label_frames(f, cb));
        SslModel ssl(c.model.enc, c.ssl.K, mix_seed(sseed, "init"));
        OptimizerConfig oc;
        oc.learning_rate = c.ssl.lr;
        Optimizer opt(ssl.store, oc);
        std::ofstream devnull;  // training curve not needed here
        ssl_train_loop(ssl, opt, feats, labels, c.ssl, sseed, 0, c.ssl.steps, devnull);

        ScalingRecord r;
        r.width = width;
        r.depth = depth;
        for (const auto& p : ssl.store.params())
            if (p.name.rfind("enc/", 0) == 0)
                r.param_count += p.tensor.impl->v.size();
        r.pretrain_loss = ssl_validation_loss(ssl, corpus, cb, c.ssl, sseed, nullptr);

        // short SFT with the shared recipe, greedy decode on the eval split
        const uint64_t fseed = stage_seed(c, "sft");
        TextVocab vocab = TextVocab::build(corpus.lexicon, c.corpus.n_homophone_groups);
        AcllmModel m(c.model, vocab, mix_seed(fseed, "init"));
        for (auto& p : m.store.params())
            if (p.name.rfind("enc/", 0) == 0)
                p.tensor.impl->v = ssl.store.find(p.name)->tensor.impl->v;
        auto lm_corpus = build_lm_corpus(corpus, vocab, mix_seed(fseed, "lmtext"));
        std::vector<std::vector<int>> heldout, train_text;
        for (size_t i = 0; i < lm_corpus.size(); ++i)
            (i % 10 == 9 ? heldout : train_text).push_back(std::move(lm_corpus[i]));
        pretrain_lm(*m.lm, m.store, train_text, heldout, c.sft.lm_steps, c.sft.lm_batch,
                    c.sft.lm_lr, mix_seed(fseed, "lmtrain"), c.sft.lm_jitter);
        m.set_lm_frozen(true);
        OptimizerConfig foc;
        foc.learning_rate = c.sft.lr;
        Optimizer fopt(m.store, foc);
        SftItems data = build_sft_items(corpus, vocab, false);
        for (int step = 0; step < c.sft.steps; ++step) {
            Rng rng = make_rng(mix_seed(fseed, 1000 + static_cast<uint64_t>(step)));
            std::uniform_int_distribution<size_t> pick(0, data.items.size() - 1);
            std::vector<SftItem> batch;
            for (int b = 0; b < c.sft.batch; ++b) batch.push_back(data.items[pick(rng)]);
            sft_step(m, batch, fopt);
        }
        EvalOptions eo;
        eo.beam_size = 1;
        eo.max_len = 20;
        eo.use_context = false;
        eo.max_items = 40;
        r.post_sft_greedy_wer =
            evaluate_split(m, corpus, "eval_multidomain", eo).at("wer");
        records.push_back(r);
    }
    return summarize_scaling(records);
}

EvalReport run_ablation_grid(const PipelineConfig& cfg, const CorpusData& corpus,
                             const std::string& sft_ckpt,
                             const std::string& context_sft_ckpt,
                             const std::string& rl_ckpt) {
    struct Entry {
        std::string stage;
        std::string path;
    };
    const std::vector<Entry> entries = {
        {"sft", sft_ckpt}, {"context_sft", context_sft_ckpt}, {"rl", rl_ckpt}};
    EvalReport report;
    report.config_hash = config_hash(cfg);
    for (const auto& e : entries) {
        Checkpoint c = load_checkpoint(e.path);
        if (c.meta.stage != e.stage)
            throw StageOrderError("ablation: " + e.path + " is not a " + e.stage +
                                  " checkpoint");
        auto m = model_from_checkpoint(cfg, corpus, c);
        EvalOptions eo;
        eo.beam_size = cfg.decode.beam_size;
        eo.max_len = cfg.decode.max_len;
        eo.joint = cfg.decode;
        report.splits[e.stage + ":eval_multidomain"] =
            evaluate_split(*m, corpus, "eval_multidomain", eo);
        report.splits[e.stage + ":eval_hardcase"] =
            evaluate_split(*m, corpus, "eval_hardcase", eo);
        if (!corpus.strict_context_empty) {
            report.splits[e.stage + ":eval_context_strict"] =
                evaluate_split(*m, corpus, "eval_context_strict", eo);
            report.splits[e.stage + ":eval_context_loose"] =
                evaluate_split(*m, corpus, "eval_context_loose", eo);
        }
        if (!report.checkpoint_id.empty()) report.checkpoint_id += ",";
        report.checkpoint_id += e.path;
    }
    return report;
}

}  // namespace acllm
