#include "acllm/corpus.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace acllm {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {
constexpr float kPi = 3.14159265358979323846f;
constexpr float kLogFloor = 1e-10f;
}  // namespace

int Lexicon::find(const std::string& surface) const {
    for (size_t i = 0; i < words.size(); ++i)
        if (words[i].surface == surface) return static_cast<int>(i);
    return -1;
}

std::vector<const Utterance*> CorpusData::split(const std::string& name) const {
    std::vector<const Utterance*> out;
    for (const auto& u : utterances)
        if (u.split == name) out.push_back(&u);
    return out;
}

FeatureSequence CorpusData::features(const Utterance& u) const {
    auto samples = synth_waveform(lexicon, u.phonemes, u.phoneme_durs, u.accent_id,
                                  spec.noise_level, mix_seed(seed, "wav:" + u.id), spec);
    return mel_filterbank(samples, spec.sample_rate, spec.window, spec.hop, spec.n_mels);
}

// ---------------------------------------------------------------------------
// signal path

float phoneme_base_hz(const Lexicon& lex, int phoneme) {
    if (phoneme <= 0 || phoneme >= static_cast<int>(lex.phonemes.size()))
        return 0.0f;
    return 320.0f + 135.0f * static_cast<float>(phoneme - 1);
}

std::vector<float> synth_waveform(const Lexicon& lex, const std::vector<int>& phonemes,
                                  const std::vector<int>& durs, int accent_id,
                                  float noise_level, uint64_t seed,
                                  const CorpusSpec& spec) {
    if (phonemes.size() != durs.size())
        throw std::invalid_argument("synth_waveform: phoneme/duration length mismatch");
    if (noise_level < 0)
        throw std::invalid_argument("synth_waveform: negative noise level");
    for (int p : phonemes)
        if (p < 0 || p >= static_cast<int>(lex.phonemes.size()))
            throw std::invalid_argument("synth_waveform: unknown phoneme id " +
                                        std::to_string(p));
    if (phonemes.empty()) return {};

    int total_frames = 0;
    for (int d : durs) total_frames += d;
    const size_t n = static_cast<size_t>(total_frames) * spec.hop +
                     (spec.window - spec.hop);
    std::vector<float> out(n, 0.0f);

    Rng rng = make_rng(seed);
    std::uniform_real_distribution<float> phase(0.0f, 2.0f * kPi);
    const float sr = static_cast<float>(spec.sample_rate);

    size_t pos = 0;
    for (size_t i = 0; i < phonemes.size(); ++i) {
        const size_t len = static_cast<size_t>(durs[i]) * spec.hop;
        float p1 = phase(rng), p2 = phase(rng);
        if (phonemes[i] != 0) {  // index 0 is silence
            float f1 = phoneme_base_hz(lex, phonemes[i]) +
                       static_cast<float>(accent_id) * spec.accent_shift_hz;
            float f2 = 0.5f * f1 + 60.0f;
            for (size_t t = 0; t < len && pos + t < n; ++t) {
                float tt = static_cast<float>(t);
                out[pos + t] = 0.6f * std::sin(2.0f * kPi * f1 * tt / sr + p1) +
                               0.25f * std::sin(2.0f * kPi * f2 * tt / sr + p2);
            }
        }
        pos += len;
    }
    if (noise_level > 0) {
        std::normal_distribution<float> noise(0.0f, noise_level);
        for (auto& x : out) x += noise(rng);
    }
    return out;
}

namespace {

// Iterative radix-2 FFT, in place.
void fft(std::vector<std::complex<float>>& a) {
    const size_t n = a.size();
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        float ang = -2.0f * kPi / static_cast<float>(len);
        std::complex<float> wl(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<float> w(1.0f, 0.0f);
            for (size_t k = 0; k < len / 2; ++k) {
                auto u = a[i + k], v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

float hz_to_mel(float f) { return 2595.0f * std::log10(1.0f + f / 700.0f); }
float mel_to_hz(float m) { return 700.0f * (std::pow(10.0f, m / 2595.0f) - 1.0f); }

}  // namespace

FeatureSequence mel_filterbank(const std::vector<float>& samples, int sample_rate,
                               int window, int hop, int n_mels) {
    if (window < hop) throw std::invalid_argument("mel_filterbank: window < hop");
    if (n_mels < 1) throw std::invalid_argument("mel_filterbank: n_mels < 1");
    if (static_cast<int>(samples.size()) < window)
        throw std::invalid_argument("mel_filterbank: fewer samples than one window");

    const int T = (static_cast<int>(samples.size()) - window) / hop + 1;
    size_t nfft = 1;
    while (nfft < static_cast<size_t>(window)) nfft <<= 1;
    const size_t nbins = nfft / 2 + 1;

    // Hann window
    std::vector<float> hann(window);
    for (int i = 0; i < window; ++i)
        hann[i] = 0.5f - 0.5f * std::cos(2.0f * kPi * i / (window - 1));

    // Triangular mel filters over [0, sr/2].
    const float mlo = hz_to_mel(0.0f), mhi = hz_to_mel(sample_rate / 2.0f);
    std::vector<float> centers(n_mels + 2);
    for (int m = 0; m < n_mels + 2; ++m)
        centers[m] = mel_to_hz(mlo + (mhi - mlo) * m / (n_mels + 1));
    const float bin_hz = static_cast<float>(sample_rate) / static_cast<float>(nfft);

    FeatureSequence f;
    f.T = T;
    f.D = n_mels;
    f.frame_rate_ms = static_cast<int>(1000.0 * hop / sample_rate);
    f.frames.assign(static_cast<size_t>(T) * n_mels, 0.0f);

    std::vector<std::complex<float>> buf(nfft);
    std::vector<float> power(nbins);
    for (int t = 0; t < T; ++t) {
        std::fill(buf.begin(), buf.end(), std::complex<float>(0, 0));
        const float* src = samples.data() + static_cast<size_t>(t) * hop;
        for (int i = 0; i < window; ++i) buf[i] = src[i] * hann[i];
        fft(buf);
        for (size_t k = 0; k < nbins; ++k) power[k] = std::norm(buf[k]);
        for (int m = 0; m < n_mels; ++m) {
            float lo = centers[m], mid = centers[m + 1], hi = centers[m + 2];
            double e = 0;
            for (size_t k = 0; k < nbins; ++k) {
                float hz = bin_hz * static_cast<float>(k);
                float w = 0;
                if (hz > lo && hz < mid)
                    w = (hz - lo) / (mid - lo);
                else if (hz >= mid && hz < hi)
                    w = (hi - hz) / (hi - mid);
                e += w * power[k];
            }
            f.row(t)[m] = std::log(std::max(static_cast<float>(e), kLogFloor));
        }
    }
    check_finite_features(f);
    return f;
}

void check_finite_features(const FeatureSequence& f) {
    for (float x : f.frames)
        if (!std::isfinite(x)) throw NumericError("non-finite mel feature");
}

// ---------------------------------------------------------------------------
// lexicon

namespace {

const std::vector<std::string> kPhonemeInventory = {
    "_", "a", "b", "d", "e", "f", "g", "i", "k", "l", "m", "n",
    "o", "p", "r", "s", "t", "u", "v", "w", "y", "z", "h", "j"};

std::string surface_from_phonemes(const Lexicon& lex, const std::vector<int>& ph) {
    std::string s;
    for (int p : ph) s += lex.phonemes[static_cast<size_t>(p)];
    return s;
}

std::vector<int> random_phoneme_seq(Rng& rng, int lo, int hi) {
    std::uniform_int_distribution<int> len(lo, hi);
    std::uniform_int_distribution<int> pick(1, static_cast<int>(kPhonemeInventory.size()) - 1);
    std::vector<int> seq(static_cast<size_t>(len(rng)));
    for (auto& p : seq) p = pick(rng);
    return seq;
}

}  // namespace

Lexicon build_lexicon(const CorpusSpec& spec, uint64_t seed) {
    Lexicon lex;
    lex.phonemes = kPhonemeInventory;
    Rng rng = make_rng(mix_seed(seed, "lexicon"));

    std::set<std::vector<int>> used_ph;
    std::set<std::string> used_surf;

    auto fresh_seq = [&](int lo, int hi) {
        for (int attempt = 0; attempt < 1000; ++attempt) {
            auto seq = random_phoneme_seq(rng, lo, hi);
            if (used_ph.insert(seq).second) return seq;
        }
        throw ConfigError("lexicon too small for requested word count");
    };
    auto unique_surface = [&](std::string s) {
        while (!used_surf.insert(s).second) s += "x";
        return s;
    };

    // wordlike content words
    for (int i = 0; i < spec.n_wordlike; ++i) {
        LexiconWord w;
        w.phonemes = fresh_seq(2, 4);
        w.surface = unique_surface(surface_from_phonemes(lex, w.phonemes));
        w.language = "wordlike";
        lex.words.push_back(std::move(w));
    }

    // charlike words: single-letter surfaces so character error == token error
    const std::string caps = "ABCDEFGHIJKLMNOPQRSTUVWXYZ";
    for (int i = 0; i < spec.n_charlike && i < static_cast<int>(caps.size()); ++i) {
        LexiconWord w;
        w.phonemes = fresh_seq(2, 2);
        w.surface = unique_surface(std::string(1, caps[static_cast<size_t>(i)]));
        w.language = "charlike";
        lex.words.push_back(std::move(w));
    }

    // homophone groups: shared phonemes, spelled variants
    if (spec.homophone_group_size < 2 && spec.n_homophone_groups > 0)
        throw ConfigError("homophone groups need >= 2 members");
    for (int g = 0; g < spec.n_homophone_groups; ++g) {
        auto ph = fresh_seq(3, 4);
        std::vector<int> members;
        for (int r = 0; r < spec.homophone_group_size; ++r) {
            LexiconWord w;
            w.phonemes = ph;
            std::string base = surface_from_phonemes(lex, ph);
            if (r == 1) base += base.back();          // doubled final letter
            else if (r >= 2) base = "h" + base;       // aspirated variant
            w.surface = unique_surface(base);
            w.language = "wordlike";
            w.homophone_group = g;
            w.homophone_rank = r;
            members.push_back(static_cast<int>(lex.words.size()));
            lex.words.push_back(std::move(w));
        }
        lex.homophone_groups.push_back(members);
    }

    // keywords: rare wordlike content words
    std::vector<int> plain_wordlike;
    for (size_t i = 0; i < lex.words.size(); ++i)
        if (lex.words[i].language == "wordlike" && lex.words[i].homophone_group < 0)
            plain_wordlike.push_back(static_cast<int>(i));
    int nk = std::min<int>(spec.n_keywords, static_cast<int>(plain_wordlike.size()) / 3);
    for (int i = 0; i < nk; ++i) {
        // keywords taken from the tail so Zipf sampling keeps them rare
        int idx = plain_wordlike[plain_wordlike.size() - 1 - static_cast<size_t>(i)];
        lex.words[static_cast<size_t>(idx)].keyword = true;
    }

    // introducer words: one distinct plain word per homophone member
    size_t next_assoc = 0;
    for (const auto& group : lex.homophone_groups)
        for (int m : group) {
            while (next_assoc < plain_wordlike.size() &&
                   (lex.words[static_cast<size_t>(plain_wordlike[next_assoc])].keyword))
                ++next_assoc;
            if (next_assoc >= plain_wordlike.size())
                throw ConfigError("lexicon too small for introducer word assignment");
            lex.words[static_cast<size_t>(m)].assoc_word =
                plain_wordlike[next_assoc++];
        }

    return lex;
}

// ---------------------------------------------------------------------------
// utterance + split generation

namespace {

struct Sampler {
    const Lexicon& lex;
    const CorpusSpec& spec;
    std::vector<int> wordlike_plain;   // non-homophone, non-keyword
    std::vector<int> wordlike_keys;    // keywords
    std::vector<int> charlike;

    explicit Sampler(const Lexicon& l, const CorpusSpec& s) : lex(l), spec(s) {
        for (size_t i = 0; i < l.words.size(); ++i) {
            const auto& w = l.words[i];
            if (w.language == "charlike")
                charlike.push_back(static_cast<int>(i));
            else if (w.homophone_group < 0 && !w.keyword)
                wordlike_plain.push_back(static_cast<int>(i));
            else if (w.keyword)
                wordlike_keys.push_back(static_cast<int>(i));
        }
    }

    int zipf(const std::vector<int>& pool, Rng& rng) const {
        // p(i) ~ 1/(i+2)
        std::vector<double> w(pool.size());
        for (size_t i = 0; i < pool.size(); ++i) w[i] = 1.0 / (static_cast<double>(i) + 2.0);
        std::discrete_distribution<size_t> d(w.begin(), w.end());
        return pool[d(rng)];
    }
};

std::string join_words(const Lexicon& lex, const std::vector<int>& words,
                       const std::string& language) {
    std::string out;
    for (size_t i = 0; i < words.size(); ++i) {
        if (i && language == "wordlike") out += ' ';
        out += lex.words[static_cast<size_t>(words[i])].surface;
    }
    return out;
}

// Renders word sequence into phoneme/duration tracks with word-boundary
// silences, then fills transcript and frame alignment.
void realize(Utterance& u, const Lexicon& lex, const CorpusSpec& spec, Rng& rng,
             int edge_silence) {
    std::uniform_int_distribution<int> dur(spec.min_phoneme_dur, spec.max_phoneme_dur);
    std::uniform_int_distribution<int> gap(1, 2);
    auto push = [&](int ph, int d) {
        u.phonemes.push_back(ph);
        u.phoneme_durs.push_back(d);
    };
    push(0, edge_silence);
    for (size_t i = 0; i < u.words.size(); ++i) {
        for (int p : lex.words[static_cast<size_t>(u.words[i])].phonemes)
            push(p, dur(rng));
        if (i + 1 < u.words.size()) push(0, gap(rng));
    }
    push(0, edge_silence);
    u.duration_frames = 0;
    for (int d : u.phoneme_durs) u.duration_frames += d;
    for (size_t i = 0; i < u.phonemes.size(); ++i)
        for (int k = 0; k < u.phoneme_durs[i]; ++k)
            u.frame_phoneme.push_back(u.phonemes[i]);
    u.transcript = join_words(lex, u.words, u.language);
}

const std::vector<std::string> kStrictTemplates = {
    "earlier we spoke about % again",
    "the discussion mentioned % before",
    "recall the notes about % today",
};
const std::vector<std::string> kLooseTemplates = {
    "topic notes cover % overall",
    "general remarks near % follow",
};

std::string fill_template(const std::string& tpl, const std::string& word) {
    std::string out = tpl;
    auto pos = out.find('%');
    out.replace(pos, 1, word);
    return out;
}

}  // namespace

std::vector<std::string> context_template_words() {
    std::set<std::string> words;
    for (const auto& tpl : kStrictTemplates)
        for (const auto& w : error_units(tpl, "wordlike"))
            if (w != "%") words.insert(w);
    for (const auto& tpl : kLooseTemplates)
        for (const auto& w : error_units(tpl, "wordlike"))
            if (w != "%") words.insert(w);
    return {words.begin(), words.end()};
}

CorpusData generate_corpus(const CorpusSpec& spec, uint64_t seed,
                           const std::string& out_dir) {
    if (spec.n_train < 1) throw ConfigError("corpus spec sizes must be >= 1");
    CorpusData data;
    data.spec = spec;
    data.seed = seed;
    data.lexicon = build_lexicon(spec, seed);
    const Lexicon& lex = data.lexicon;
    Sampler sampler(lex, spec);

    if (spec.n_homophone_groups == 0) data.strict_context_empty = true;

    int counter = 0;
    auto new_utt = [&](const std::string& split) {
        Utterance u;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%s-%05d", split.c_str(), counter++);
        u.id = buf;
        u.split = split;
        return u;
    };
    auto rng_for = [&](const Utterance& u) {
        return make_rng(mix_seed(seed, "utt:" + u.id));
    };

    // One plain utterance; options control language, keywords, homophones,
    // accents.
    auto make_plain = [&](const std::string& split, bool allow_homophone,
                          bool force_keyword, bool charlike_ok, int accent_lo,
                          int accent_hi) {
        Utterance u = new_utt(split);
        Rng rng = rng_for(u);
        std::uniform_int_distribution<int> nw(spec.min_words, spec.max_words);
        std::uniform_int_distribution<int> acc(accent_lo, accent_hi);
        bool charlike = charlike_ok && !sampler.charlike.empty() &&
                        std::uniform_real_distribution<float>(0, 1)(rng) < 0.25f;
        u.language = charlike ? "charlike" : "wordlike";
        u.accent_id = acc(rng);
        const int n = nw(rng);
        for (int i = 0; i < n; ++i)
            u.words.push_back(charlike ? sampler.zipf(sampler.charlike, rng)
                                       : sampler.zipf(sampler.wordlike_plain, rng));
        if (!charlike && force_keyword && !sampler.wordlike_keys.empty()) {
            std::uniform_int_distribution<size_t> ki(0, sampler.wordlike_keys.size() - 1);
            std::uniform_int_distribution<size_t> pos(0, u.words.size() - 1);
            int kw = sampler.wordlike_keys[ki(rng)];
            u.words[pos(rng)] = kw;
            u.keywords.push_back(lex.words[static_cast<size_t>(kw)].surface);
        }
        if (!charlike && allow_homophone && !lex.homophone_groups.empty() &&
            std::uniform_real_distribution<float>(0, 1)(rng) < 0.3f) {
            std::uniform_int_distribution<size_t> gi(0, lex.homophone_groups.size() - 1);
            std::uniform_int_distribution<size_t> pos(0, u.words.size() - 1);
            size_t g = gi(rng);
            int canonical = lex.homophone_groups[g][0];
            size_t p = pos(rng);
            u.words[p] = canonical;
            HomophoneSlot slot;
            slot.word_pos = static_cast<int>(p);
            slot.group = static_cast<int>(g);
            slot.true_word = canonical;
            slot.canonical_word = canonical;
            u.homophone_slots.push_back(slot);
        }
        realize(u, lex, spec, rng, 2);
        data.utterances.push_back(std::move(u));
    };

    auto make_triple = [&](const std::string& split, const std::string& dependency) {
        Utterance u = new_utt(split);
        Rng rng = rng_for(u);
        std::uniform_int_distribution<int> nw(spec.min_words, spec.max_words);
        u.language = "wordlike";
        u.accent_id = 0;
        const int n = nw(rng);
        for (int i = 0; i < n; ++i)
            u.words.push_back(sampler.zipf(sampler.wordlike_plain, rng));
        if (dependency == "strict") {
            if (lex.homophone_groups.empty())
                throw ConfigError("strict triples require homophone groups");
            std::uniform_int_distribution<size_t> gi(0, lex.homophone_groups.size() - 1);
            std::uniform_int_distribution<size_t> pos(0, u.words.size() - 1);
            size_t g = gi(rng);
            const auto& members = lex.homophone_groups[g];
            std::uniform_int_distribution<size_t> mi(0, members.size() - 1);
            int truth = members[mi(rng)];
            size_t p = pos(rng);
            u.words[p] = truth;
            HomophoneSlot slot;
            slot.word_pos = static_cast<int>(p);
            slot.group = static_cast<int>(g);
            slot.true_word = truth;
            slot.canonical_word = members[0];
            u.homophone_slots.push_back(slot);
            std::uniform_int_distribution<size_t> ti(0, kStrictTemplates.size() - 1);
            u.context = fill_template(kStrictTemplates[ti(rng)],
                                      lex.words[static_cast<size_t>(truth)].surface);
            u.keywords.push_back(lex.words[static_cast<size_t>(truth)].surface);
        } else {
            // loose: context repeats a topical content word, no disambiguation
            std::uniform_int_distribution<size_t> wi(0, u.words.size() - 1);
            int topical = u.words[wi(rng)];
            std::uniform_int_distribution<size_t> ti(0, kLooseTemplates.size() - 1);
            u.context = fill_template(kLooseTemplates[ti(rng)],
                                      lex.words[static_cast<size_t>(topical)].surface);
            u.keywords.push_back(lex.words[static_cast<size_t>(topical)].surface);
        }
        u.context_dependency = dependency;
        realize(u, lex, spec, rng, 2);
        data.utterances.push_back(std::move(u));
    };

    auto make_longform = [&](const std::string& split, int item_idx) {
        const std::string group_id = split + "-item" + std::to_string(item_idx);
        Rng rng = make_rng(mix_seed(seed, "lf:" + group_id));
        std::uniform_int_distribution<int> ns(spec.longform_min_sents,
                                              spec.longform_max_sents);
        const int n_sents = ns(rng);
        // pick homophone member and sentence positions for the dependency
        int truth = -1, g = -1, intro_pos = 0, homo_pos = 1;
        if (!lex.homophone_groups.empty()) {
            std::uniform_int_distribution<size_t> gi(0, lex.homophone_groups.size() - 1);
            g = static_cast<int>(gi(rng));
            const auto& members = lex.homophone_groups[static_cast<size_t>(g)];
            std::uniform_int_distribution<size_t> mi(0, members.size() - 1);
            truth = members[mi(rng)];
            std::uniform_int_distribution<int> ip(0, n_sents - 2);
            intro_pos = ip(rng);
            std::uniform_int_distribution<int> hp(intro_pos + 1, n_sents - 1);
            homo_pos = hp(rng);
        }
        for (int si = 0; si < n_sents; ++si) {
            Utterance u = new_utt(split);
            Rng urng = rng_for(u);
            std::uniform_int_distribution<int> nw(spec.min_words, spec.max_words);
            u.language = "wordlike";
            u.accent_id = 0;
            u.longform_group = group_id;
            const int n = nw(urng);
            for (int i = 0; i < n; ++i)
                u.words.push_back(sampler.zipf(sampler.wordlike_plain, urng));
            if (truth >= 0 && si == intro_pos) {
                std::uniform_int_distribution<size_t> pos(0, u.words.size() - 1);
                u.words[pos(urng)] =
                    lex.words[static_cast<size_t>(truth)].assoc_word;
            }
            if (truth >= 0 && si == homo_pos) {
                std::uniform_int_distribution<size_t> pos(0, u.words.size() - 1);
                size_t p = pos(urng);
                u.words[p] = truth;
                HomophoneSlot slot;
                slot.word_pos = static_cast<int>(p);
                slot.group = g;
                slot.true_word = truth;
                slot.canonical_word =
                    lex.homophone_groups[static_cast<size_t>(g)][0];
                u.homophone_slots.push_back(slot);
                u.keywords.push_back(lex.words[static_cast<size_t>(truth)].surface);
            }
            realize(u, lex, spec, urng, 4);  // long edge silences for VAD splits
            data.utterances.push_back(std::move(u));
        }
    };

    for (int i = 0; i < spec.n_train; ++i)
        make_plain("train", true, i % 5 == 0, true, 0, std::max(0, spec.n_accents - 1));
    for (int i = 0; i < spec.n_dev; ++i)
        make_plain("dev", false, false, true, 0, 0);
    for (int i = 0; i < spec.n_eval_multidomain; ++i)
        make_plain("eval_multidomain", false, false, true, 0, 0);
    for (int i = 0; i < spec.n_eval_accent; ++i)
        make_plain("eval_accent", false, false, false, 1,
                   std::max(1, spec.n_accents - 1));
    for (int i = 0; i < spec.n_eval_hardcase; ++i)
        make_plain("eval_hardcase", false, true, false, 0, 0);
    for (int i = 0; i < spec.n_rl; ++i)
        make_plain("rl", true, i % 3 == 0, false, 0, 0);
    if (!data.strict_context_empty) {
        for (int i = 0; i < spec.n_context_train; ++i)
            make_triple("train_context", i % 3 == 2 ? "loose" : "strict");
        for (int i = 0; i < spec.n_eval_context_strict; ++i)
            make_triple("eval_context_strict", "strict");
        for (int i = 0; i < spec.n_eval_context_loose; ++i)
            make_triple("eval_context_loose", "loose");
    }
    for (int i = 0; i < spec.n_longform_train; ++i)
        make_longform("train_longform", i);
    for (int i = 0; i < spec.n_longform_eval; ++i)
        make_longform("eval_longform", i);

    if (!out_dir.empty()) write_manifests(data, out_dir);
    return data;
}

// ---------------------------------------------------------------------------
// file formats

void write_features(const std::string& path, const FeatureSequence& f) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    const char magic[4] = {'A', 'C', 'L', 'F'};
    uint32_t version = 1, T = static_cast<uint32_t>(f.T), D = static_cast<uint32_t>(f.D);
    out.write(magic, 4);
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(reinterpret_cast<const char*>(&T), 4);
    out.write(reinterpret_cast<const char*>(&D), 4);
    out.write(reinterpret_cast<const char*>(f.frames.data()),
              static_cast<std::streamsize>(f.frames.size() * sizeof(float)));
}

FeatureSequence read_features(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    char magic[4];
    uint32_t version = 0, T = 0, D = 0;
    in.read(magic, 4);
    if (std::memcmp(magic, "ACLF", 4) != 0)
        throw std::runtime_error("bad feature magic in " + path);
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(reinterpret_cast<char*>(&T), 4);
    in.read(reinterpret_cast<char*>(&D), 4);
    FeatureSequence f;
    f.T = static_cast<int>(T);
    f.D = static_cast<int>(D);
    f.frames.resize(static_cast<size_t>(T) * D);
    in.read(reinterpret_cast<char*>(f.frames.data()),
            static_cast<std::streamsize>(f.frames.size() * sizeof(float)));
    if (!in) throw std::runtime_error("truncated feature file " + path);
    return f;
}

std::vector<std::string> error_units(const std::string& transcript,
                                     const std::string& language) {
    std::vector<std::string> units;
    if (language == "charlike") {
        for (char c : transcript)
            if (c != ' ') units.emplace_back(1, c);
        return units;
    }
    std::istringstream ss(transcript);
    std::string w;
    while (ss >> w) units.push_back(w);
    return units;
}

namespace {

json lexicon_to_json(const Lexicon& lex) {
    json words = json::array();
    for (const auto& w : lex.words)
        words.push_back({{"surface", w.surface},
                         {"phonemes", w.phonemes},
                         {"language", w.language},
                         {"keyword", w.keyword},
                         {"homophone_group", w.homophone_group},
                         {"homophone_rank", w.homophone_rank},
                         {"assoc_word", w.assoc_word}});
    return {{"phonemes", lex.phonemes},
            {"words", words},
            {"homophone_groups", lex.homophone_groups}};
}

Lexicon lexicon_from_json(const json& j) {
    Lexicon lex;
    lex.phonemes = j.at("phonemes").get<std::vector<std::string>>();
    for (const auto& wj : j.at("words")) {
        LexiconWord w;
        w.surface = wj.at("surface");
        w.phonemes = wj.at("phonemes").get<std::vector<int>>();
        w.language = wj.at("language");
        w.keyword = wj.at("keyword");
        w.homophone_group = wj.at("homophone_group");
        w.homophone_rank = wj.at("homophone_rank");
        w.assoc_word = wj.at("assoc_word");
        lex.words.push_back(std::move(w));
    }
    lex.homophone_groups =
        j.at("homophone_groups").get<std::vector<std::vector<int>>>();
    return lex;
}

json spec_to_json(const CorpusSpec& s) {
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

CorpusSpec spec_from_json(const json& j) {
    CorpusSpec s;
    auto get = [&](const char* k, auto& field) {
        if (j.contains(k)) field = j.at(k).get<std::decay_t<decltype(field)>>();
    };
    get("n_wordlike", s.n_wordlike);
    get("n_charlike", s.n_charlike);
    get("n_homophone_groups", s.n_homophone_groups);
    get("homophone_group_size", s.homophone_group_size);
    get("n_keywords", s.n_keywords);
    get("n_accents", s.n_accents);
    get("noise_level", s.noise_level);
    get("min_words", s.min_words);
    get("max_words", s.max_words);
    get("min_phoneme_dur", s.min_phoneme_dur);
    get("max_phoneme_dur", s.max_phoneme_dur);
    get("n_train", s.n_train);
    get("n_dev", s.n_dev);
    get("n_eval_multidomain", s.n_eval_multidomain);
    get("n_eval_accent", s.n_eval_accent);
    get("n_eval_hardcase", s.n_eval_hardcase);
    get("n_context_train", s.n_context_train);
    get("n_eval_context_strict", s.n_eval_context_strict);
    get("n_eval_context_loose", s.n_eval_context_loose);
    get("n_rl", s.n_rl);
    get("n_longform_train", s.n_longform_train);
    get("n_longform_eval", s.n_longform_eval);
    get("longform_min_sents", s.longform_min_sents);
    get("longform_max_sents", s.longform_max_sents);
    get("sample_rate", s.sample_rate);
    get("window", s.window);
    get("hop", s.hop);
    get("n_mels", s.n_mels);
    get("accent_shift_hz", s.accent_shift_hz);
    return s;
}

}  // namespace

void write_manifests(const CorpusData& data, const std::string& out_dir) {
    fs::create_directories(fs::path(out_dir) / "features");
    std::ofstream manifest(fs::path(out_dir) / "manifest.jsonl");
    std::ofstream meta(fs::path(out_dir) / "meta.jsonl");
    for (const auto& u : data.utterances) {
        const std::string fpath = "features/" + u.id + ".aclf";
        write_features((fs::path(out_dir) / fpath).string(), data.features(u));
        json rec = {{"id", u.id},
                    {"feature_path", fpath},
                    {"transcript", u.transcript},
                    {"language", u.language},
                    {"keywords", u.keywords},
                    {"split", u.split}};
        if (!u.context.empty()) {
            rec["context"] = u.context;
            rec["context_dependency"] = u.context_dependency;
        }
        if (!u.longform_group.empty()) rec["longform_group"] = u.longform_group;
        manifest << rec.dump() << "\n";

        json m = rec;
        m["words"] = u.words;
        m["phonemes"] = u.phonemes;
        m["phoneme_durs"] = u.phoneme_durs;
        m["accent_id"] = u.accent_id;
        m["duration_frames"] = u.duration_frames;
        json slots = json::array();
        for (const auto& s : u.homophone_slots)
            slots.push_back({{"word_pos", s.word_pos},
                             {"group", s.group},
                             {"true_word", s.true_word},
                             {"canonical_word", s.canonical_word}});
        m["homophone_slots"] = slots;
        meta << m.dump() << "\n";
    }
    json summary = {{"seed", data.seed},
                    {"strict_context_empty", data.strict_context_empty},
                    {"spec", spec_to_json(data.spec)},
                    {"lexicon", lexicon_to_json(data.lexicon)}};
    std::ofstream(fs::path(out_dir) / "corpus_summary.json") << summary.dump(2) << "\n";
}

CorpusData load_corpus_manifest(const std::string& dir) {
    std::ifstream sf(fs::path(dir) / "corpus_summary.json");
    if (!sf) throw std::runtime_error("missing corpus_summary.json in " + dir);
    json summary = json::parse(sf);
    CorpusData data;
    data.seed = summary.at("seed");
    data.strict_context_empty = summary.at("strict_context_empty");
    data.spec = spec_from_json(summary.at("spec"));
    data.lexicon = lexicon_from_json(summary.at("lexicon"));

    std::ifstream mf(fs::path(dir) / "meta.jsonl");
    if (!mf) throw std::runtime_error("missing meta.jsonl in " + dir);
    std::string line;
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        json m = json::parse(line);
        Utterance u;
        u.id = m.at("id");
        u.transcript = m.at("transcript");
        u.language = m.at("language");
        u.keywords = m.at("keywords").get<std::vector<std::string>>();
        u.split = m.at("split");
        if (m.contains("context")) {
            u.context = m.at("context");
            u.context_dependency = m.at("context_dependency");
        }
        if (m.contains("longform_group")) u.longform_group = m.at("longform_group");
        u.words = m.at("words").get<std::vector<int>>();
        u.phonemes = m.at("phonemes").get<std::vector<int>>();
        u.phoneme_durs = m.at("phoneme_durs").get<std::vector<int>>();
        u.accent_id = m.at("accent_id");
        u.duration_frames = m.at("duration_frames");
        for (const auto& sj : m.at("homophone_slots")) {
            HomophoneSlot s;
            s.word_pos = sj.at("word_pos");
            s.group = sj.at("group");
            s.true_word = sj.at("true_word");
            s.canonical_word = sj.at("canonical_word");
            u.homophone_slots.push_back(s);
        }
        for (size_t i = 0; i < u.phonemes.size(); ++i)
            for (int k = 0; k < u.phoneme_durs[i]; ++k)
                u.frame_phoneme.push_back(u.phonemes[i]);
        data.utterances.push_back(std::move(u));
    }
    return data;
}

}  // namespace acllm
