#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "acllm/common.hpp"

namespace acllm {

// Synthetic speech world: a small phonetic lexicon with homophone groups,
// sinusoid-rendered waveforms, mel-filterbank features, and manifest
// generation for every split family the trainer and evaluator consume.

// T x D time-major acoustic features.
struct FeatureSequence {
    int T = 0;
    int D = 0;
    int frame_rate_ms = 40;
    std::vector<float> frames;  // T*D row-major

    float* row(int t) { return frames.data() + static_cast<size_t>(t) * D; }
    const float* row(int t) const { return frames.data() + static_cast<size_t>(t) * D; }
};

struct LexiconWord {
    std::string surface;
    std::vector<int> phonemes;  // inventory indices, no silence
    std::string language;       // "wordlike" | "charlike"
    bool keyword = false;
    int homophone_group = -1;   // -1: not a homophone
    int homophone_rank = -1;    // 0 = canonical member
    int assoc_word = -1;        // introducer word uniquely tied to this member
};

struct Lexicon {
    std::vector<std::string> phonemes;  // index 0 is the silence phoneme "_"
    std::vector<LexiconWord> words;
    std::vector<std::vector<int>> homophone_groups;  // word indices, rank order

    int find(const std::string& surface) const;
    const LexiconWord& word(int i) const { return words[static_cast<size_t>(i)]; }
};

struct HomophoneSlot {
    int word_pos = 0;   // position within the utterance word sequence
    int group = -1;
    int true_word = -1;      // lexicon index actually spoken/intended
    int canonical_word = -1; // rank-0 member of the group
};

struct Utterance {
    std::string id;
    std::vector<int> words;         // lexicon indices
    std::vector<int> phonemes;      // flattened, silence included
    std::vector<int> phoneme_durs;  // frames per phoneme
    std::string transcript;
    std::string language;
    std::vector<std::string> keywords;
    int accent_id = 0;
    int duration_frames = 0;
    // Context triple payload; empty context means plain pair.
    std::string context;
    std::string context_dependency;  // "strict" | "loose" | ""
    std::string split;
    std::string longform_group;
    std::vector<HomophoneSlot> homophone_slots;
    std::vector<int> frame_phoneme;  // per-frame phoneme id (generation truth)
};

struct CorpusSpec {
    int n_wordlike = 36;
    int n_charlike = 20;
    int n_homophone_groups = 8;
    int homophone_group_size = 2;
    int n_keywords = 10;
    int n_accents = 3;
    float noise_level = 0.02f;
    int min_words = 3, max_words = 6;
    int min_phoneme_dur = 4, max_phoneme_dur = 8;  // frames

    int n_train = 1200;
    int n_dev = 100;
    int n_eval_multidomain = 120;
    int n_eval_accent = 60;
    int n_eval_hardcase = 80;
    int n_context_train = 300;
    int n_eval_context_strict = 80;
    int n_eval_context_loose = 60;
    int n_rl = 200;
    int n_longform_train = 30;
    int n_longform_eval = 16;
    int longform_min_sents = 5, longform_max_sents = 8;

    // signal parameters
    int sample_rate = 8000;
    int window = 400;
    int hop = 320;  // 40 ms
    int n_mels = 24;
    float accent_shift_hz = 25.0f;
};

struct CorpusData {
    CorpusSpec spec;
    uint64_t seed = 0;
    Lexicon lexicon;
    std::vector<Utterance> utterances;  // all splits
    bool strict_context_empty = false;

    std::vector<const Utterance*> split(const std::string& name) const;
    FeatureSequence features(const Utterance& u) const;
};

// --- signal path ---

// Renders one phoneme sequence as a sinusoid mixture. Sample count is
// sum(durs)*hop + (window - hop) so that mel extraction yields exactly
// sum(durs) frames.
std::vector<float> synth_waveform(const Lexicon& lex, const std::vector<int>& phonemes,
                                  const std::vector<int>& durs, int accent_id,
                                  float noise_level, uint64_t seed,
                                  const CorpusSpec& spec);

// Dominant frequency of a phoneme under a given accent (generation truth,
// exposed for the spectral tests).
float phoneme_base_hz(const Lexicon& lex, int phoneme);

FeatureSequence mel_filterbank(const std::vector<float>& samples, int sample_rate,
                               int window, int hop, int n_mels);

// Throws NumericError if any feature value is NaN/Inf.
void check_finite_features(const FeatureSequence& f);

// --- corpus path ---

Lexicon build_lexicon(const CorpusSpec& spec, uint64_t seed);

// Deterministic in (spec, seed). If out_dir is non-empty, writes
// features/<id>.aclf, manifest.jsonl, meta.jsonl and corpus_summary.json.
CorpusData generate_corpus(const CorpusSpec& spec, uint64_t seed,
                           const std::string& out_dir = "");

// Feature container IO ("ACLF", version, T, D header then float32 LE).
void write_features(const std::string& path, const FeatureSequence& f);
FeatureSequence read_features(const std::string& path);

// Tokenized reference transcript units for error-rate computation:
// words for wordlike, characters for charlike.
std::vector<std::string> error_units(const std::string& transcript,
                                     const std::string& language);

// Distinct filler words used by the context sentence templates (the slot
// itself is filled with lexicon surfaces).
std::vector<std::string> context_template_words();

void write_manifests(const CorpusData& data, const std::string& out_dir);
CorpusData load_corpus_manifest(const std::string& dir);

}  // namespace acllm
