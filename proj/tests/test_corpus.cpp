#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "acllm/corpus.hpp"

using namespace acllm;
namespace fs = std::filesystem;

namespace {

CorpusSpec tiny_spec() {
    CorpusSpec s;
    s.n_train = 24;
    s.n_dev = 6;
    s.n_eval_multidomain = 6;
    s.n_eval_accent = 4;
    s.n_eval_hardcase = 4;
    s.n_context_train = 9;
    s.n_eval_context_strict = 6;
    s.n_eval_context_loose = 4;
    s.n_rl = 6;
    s.n_longform_train = 2;
    s.n_longform_eval = 2;
    return s;
}

// Direct DFT magnitude at a target frequency; independent of the FFT used
// inside mel extraction.
double goertzel_mag(const std::vector<float>& x, double hz, double sr) {
    double re = 0, im = 0;
    for (size_t n = 0; n < x.size(); ++n) {
        double ang = 2.0 * M_PI * hz * static_cast<double>(n) / sr;
        re += x[n] * std::cos(ang);
        im -= x[n] * std::sin(ang);
    }
    return std::sqrt(re * re + im * im);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("waveform sample count matches frame arithmetic") {
    CorpusSpec spec;
    Lexicon lex = build_lexicon(spec, 1);
    std::vector<int> ph = {1, 0, 3};
    std::vector<int> durs = {5, 2, 6};
    auto wav = synth_waveform(lex, ph, durs, 0, 0.0f, 7, spec);
    CHECK(wav.size() == 13u * spec.hop + (spec.window - spec.hop));
    auto f = mel_filterbank(wav, spec.sample_rate, spec.window, spec.hop, spec.n_mels);
    CHECK(f.T == 13);
    CHECK(f.D == spec.n_mels);
    CHECK(f.frame_rate_ms == 40);
}

TEST_CASE("dominant frequency matches the generation plan (direct DFT oracle)") {
    CorpusSpec spec;
    Lexicon lex = build_lexicon(spec, 1);
    for (int p : {1, 5, 12}) {
        auto wav = synth_waveform(lex, {p}, {10}, 0, 0.0f, 3, spec);
        double f0 = phoneme_base_hz(lex, p);
        double peak = goertzel_mag(wav, f0, spec.sample_rate);
        // energy at the planned frequency dominates a probe 90 Hz away
        CHECK(peak > 5.0 * goertzel_mag(wav, f0 + 90.0, spec.sample_rate));
        CHECK(peak > 5.0 * goertzel_mag(wav, f0 - 90.0, spec.sample_rate));
    }
}

TEST_CASE("accent shifts the dominant frequency by accent_id * shift") {
    CorpusSpec spec;
    Lexicon lex = build_lexicon(spec, 1);
    const int p = 4;
    for (int accent = 1; accent < 3; ++accent) {
        auto wav = synth_waveform(lex, {p}, {10}, accent, 0.0f, 3, spec);
        double shifted = phoneme_base_hz(lex, p) + accent * spec.accent_shift_hz;
        CHECK(goertzel_mag(wav, shifted, spec.sample_rate) >
              3.0 * goertzel_mag(wav, phoneme_base_hz(lex, p) - 50.0, spec.sample_rate));
    }
}

TEST_CASE("silence phoneme renders as pure noise") {
    CorpusSpec spec;
    Lexicon lex = build_lexicon(spec, 1);
    auto quiet = synth_waveform(lex, {0}, {8}, 0, 0.0f, 3, spec);
    for (float x : quiet) CHECK(x == 0.0f);
    auto noisy = synth_waveform(lex, {0}, {8}, 0, 0.05f, 3, spec);
    double rms = 0;
    for (float x : noisy) rms += x * x;
    rms = std::sqrt(rms / static_cast<double>(noisy.size()));
    CHECK(rms == doctest::Approx(0.05).epsilon(0.15));
}

TEST_CASE("mel features separate phonemes") {
    CorpusSpec spec;
    Lexicon lex = build_lexicon(spec, 1);
    // each phoneme's mean mel vector should be closest to itself across
    // two independent renderings
    std::vector<std::vector<float>> ref, probe;
    const int n_ph = 8;
    for (int p = 1; p <= n_ph; ++p) {
        for (int trial = 0; trial < 2; ++trial) {
            auto wav = synth_waveform(lex, {p}, {10}, 0, spec.noise_level,
                                      100 * p + trial, spec);
            auto f = mel_filterbank(wav, spec.sample_rate, spec.window, spec.hop,
                                    spec.n_mels);
            std::vector<float> mean(static_cast<size_t>(f.D), 0.0f);
            for (int t = 0; t < f.T; ++t)
                for (int d = 0; d < f.D; ++d) mean[static_cast<size_t>(d)] += f.row(t)[d];
            for (auto& v : mean) v /= static_cast<float>(f.T);
            (trial == 0 ? ref : probe).push_back(std::move(mean));
        }
    }
    for (int p = 0; p < n_ph; ++p) {
        int best = -1;
        double best_d = 1e30;
        for (int q = 0; q < n_ph; ++q) {
            double d = 0;
            for (size_t i = 0; i < ref[0].size(); ++i) {
                double diff = probe[static_cast<size_t>(p)][i] - ref[static_cast<size_t>(q)][i];
                d += diff * diff;
            }
            if (d < best_d) { best_d = d; best = q; }
        }
        CHECK(best == p);
    }
}

TEST_CASE("synth_waveform input validation") {
    CorpusSpec spec;
    Lexicon lex = build_lexicon(spec, 1);
    CHECK_THROWS_AS(synth_waveform(lex, {1, 2}, {3}, 0, 0.0f, 1, spec),
                    std::invalid_argument);
    CHECK_THROWS_AS(synth_waveform(lex, {999}, {3}, 0, 0.0f, 1, spec),
                    std::invalid_argument);
    CHECK_THROWS_AS(synth_waveform(lex, {1}, {3}, 0, -0.1f, 1, spec),
                    std::invalid_argument);
    CHECK_THROWS_AS(
        mel_filterbank(std::vector<float>(10, 0.0f), 8000, 400, 320, 24),
        std::invalid_argument);
}

TEST_CASE("lexicon: homophones share sound, differ in spelling") {
    CorpusSpec spec;
    Lexicon lex = build_lexicon(spec, 42);
    CHECK(static_cast<int>(lex.homophone_groups.size()) == spec.n_homophone_groups);
    std::set<std::string> surfaces;
    std::set<std::vector<int>> nonhomophone_ph;
    for (const auto& w : lex.words) CHECK(surfaces.insert(w.surface).second);
    for (const auto& w : lex.words)
        if (w.homophone_group < 0)
            CHECK(nonhomophone_ph.insert(w.phonemes).second);
    for (const auto& g : lex.homophone_groups) {
        REQUIRE(static_cast<int>(g.size()) == spec.homophone_group_size);
        for (size_t i = 1; i < g.size(); ++i) {
            CHECK(lex.word(g[i]).phonemes == lex.word(g[0]).phonemes);
            CHECK(lex.word(g[i]).surface != lex.word(g[0]).surface);
        }
        CHECK(lex.word(g[0]).homophone_rank == 0);
        // each member has a distinct introducer word outside the group
        std::set<int> assoc;
        for (int m : g) {
            int a = lex.word(m).assoc_word;
            REQUIRE(a >= 0);
            CHECK(lex.word(a).homophone_group == -1);
            CHECK(!lex.word(a).keyword);
            CHECK(assoc.insert(a).second);
        }
    }
    int n_kw = 0;
    for (const auto& w : lex.words) n_kw += w.keyword ? 1 : 0;
    CHECK(n_kw == spec.n_keywords);
}

TEST_CASE("error_units: words for wordlike, characters for charlike") {
    auto w = error_units("foo bar baz", "wordlike");
    CHECK(w == std::vector<std::string>{"foo", "bar", "baz"});
    auto c = error_units("ABC", "charlike");
    CHECK(c == std::vector<std::string>{"A", "B", "C"});
    CHECK(error_units("", "wordlike").empty());
}

TEST_CASE("corpus generation: split sizes and structural invariants") {
    auto spec = tiny_spec();
    CorpusData data = generate_corpus(spec, 7);
    CHECK(!data.strict_context_empty);
    CHECK(static_cast<int>(data.split("train").size()) == spec.n_train);
    CHECK(static_cast<int>(data.split("dev").size()) == spec.n_dev);
    CHECK(static_cast<int>(data.split("eval_context_strict").size()) ==
          spec.n_eval_context_strict);
    CHECK(static_cast<int>(data.split("rl").size()) == spec.n_rl);

    std::set<std::string> ids;
    for (const auto& u : data.utterances) {
        CHECK(ids.insert(u.id).second);
        CHECK(!u.transcript.empty());
        int total = 0;
        for (int d : u.phoneme_durs) total += d;
        CHECK(total == u.duration_frames);
        CHECK(static_cast<int>(u.frame_phoneme.size()) == u.duration_frames);
        auto units = error_units(u.transcript, u.language);
        CHECK(units.size() == u.words.size());
        for (const auto& slot : u.homophone_slots) {
            CHECK(u.words[static_cast<size_t>(slot.word_pos)] == slot.true_word);
            CHECK(data.lexicon.word(slot.canonical_word).homophone_rank == 0);
        }
        FeatureSequence f = data.features(u);
        CHECK(f.T == u.duration_frames);
    }

    // strict triples: context names the true member and marks it a keyword
    for (const auto* u : data.split("eval_context_strict")) {
        REQUIRE(u->context_dependency == "strict");
        REQUIRE(u->homophone_slots.size() == 1);
        const auto& surf = data.lexicon.word(u->homophone_slots[0].true_word).surface;
        CHECK(u->context.find(surf) != std::string::npos);
        REQUIRE(u->keywords.size() == 1);
        CHECK(u->keywords[0] == surf);
    }
    // accent eval really uses shifted accents
    for (const auto* u : data.split("eval_accent")) CHECK(u->accent_id >= 1);
    // every hardcase utterance carries a keyword
    for (const auto* u : data.split("eval_hardcase")) CHECK(!u->keywords.empty());
    // longform items form groups with an introducer before the homophone
    for (int i = 0; i < spec.n_longform_eval; ++i) {
        std::vector<const Utterance*> grp;
        std::string gid = "eval_longform-item" + std::to_string(i);
        for (const auto& u : data.utterances)
            if (u.longform_group == gid) grp.push_back(&u);
        REQUIRE(static_cast<int>(grp.size()) >= spec.longform_min_sents);
        int intro_at = -1, homo_at = -1;
        for (size_t s = 0; s < grp.size(); ++s) {
            if (!grp[s]->homophone_slots.empty()) {
                homo_at = static_cast<int>(s);
                int assoc =
                    data.lexicon.word(grp[s]->homophone_slots[0].true_word).assoc_word;
                for (size_t t = 0; t < s; ++t)
                    for (int w : grp[t]->words)
                        if (w == assoc) intro_at = static_cast<int>(t);
            }
        }
        REQUIRE(homo_at >= 0);
        CHECK(intro_at >= 0);
        CHECK(intro_at < homo_at);
    }
}

TEST_CASE("strict triples are acoustically undecidable without context") {
    // Bayes-oracle argument: the spoken phoneme sequence is identical for
    // every member of the homophone group, so no acoustic model can beat
    // the canonical-member prior. The flip to the true member must come
    // from the context channel.
    auto spec = tiny_spec();
    CorpusData data = generate_corpus(spec, 7);
    int flips = 0;
    for (const auto* u : data.split("eval_context_strict")) {
        const auto& slot = u->homophone_slots[0];
        const auto& truth = data.lexicon.word(slot.true_word);
        const auto& canon = data.lexicon.word(slot.canonical_word);
        CHECK(truth.phonemes == canon.phonemes);
        if (slot.true_word != slot.canonical_word) ++flips;
    }
    CHECK(flips > 0);  // some items require the non-canonical member
}

TEST_CASE("generation is deterministic in (spec, seed)") {
    auto spec = tiny_spec();
    CorpusData a = generate_corpus(spec, 123);
    CorpusData b = generate_corpus(spec, 123);
    REQUIRE(a.utterances.size() == b.utterances.size());
    for (size_t i = 0; i < a.utterances.size(); ++i) {
        CHECK(a.utterances[i].transcript == b.utterances[i].transcript);
        CHECK(a.utterances[i].phonemes == b.utterances[i].phonemes);
        CHECK(a.features(a.utterances[i]).frames ==
              b.features(b.utterances[i]).frames);
    }
    CorpusData c = generate_corpus(spec, 124);
    bool any_diff = false;
    for (size_t i = 0; i < std::min(a.utterances.size(), c.utterances.size()); ++i)
        any_diff |= a.utterances[i].transcript != c.utterances[i].transcript;
    CHECK(any_diff);
}

TEST_CASE("feature file round trip is byte exact") {
    CorpusSpec spec;
    Lexicon lex = build_lexicon(spec, 1);
    auto wav = synth_waveform(lex, {2, 0, 5}, {4, 2, 6}, 1, 0.02f, 9, spec);
    auto f = mel_filterbank(wav, spec.sample_rate, spec.window, spec.hop, spec.n_mels);
    fs::path dir = fs::temp_directory_path() / "acllm_feat_test";
    fs::create_directories(dir);
    write_features((dir / "a.aclf").string(), f);
    write_features((dir / "b.aclf").string(), f);
    CHECK(slurp(dir / "a.aclf") == slurp(dir / "b.aclf"));
    auto g = read_features((dir / "a.aclf").string());
    CHECK(g.T == f.T);
    CHECK(g.D == f.D);
    CHECK(g.frames == f.frames);
    std::ofstream(dir / "bad.aclf") << "NOPE";
    CHECK_THROWS(read_features((dir / "bad.aclf").string()));
    fs::remove_all(dir);
}

TEST_CASE("manifest export and reload round trip") {
    auto spec = tiny_spec();
    fs::path dir = fs::temp_directory_path() / "acllm_corpus_test";
    fs::remove_all(dir);
    CorpusData a = generate_corpus(spec, 55, dir.string());
    CHECK(fs::exists(dir / "manifest.jsonl"));
    CHECK(fs::exists(dir / "corpus_summary.json"));
    CorpusData b = load_corpus_manifest(dir.string());
    REQUIRE(a.utterances.size() == b.utterances.size());
    for (size_t i = 0; i < a.utterances.size(); ++i) {
        const auto& ua = a.utterances[i];
        const auto& ub = b.utterances[i];
        CHECK(ua.id == ub.id);
        CHECK(ua.transcript == ub.transcript);
        CHECK(ua.phonemes == ub.phonemes);
        CHECK(ua.context == ub.context);
        CHECK(ua.split == ub.split);
        CHECK(ua.keywords == ub.keywords);
        // regenerated features match the exported files
        auto exported = read_features((dir / "features" / (ua.id + ".aclf")).string());
        CHECK(exported.frames == b.features(ub).frames);
    }
    CHECK(b.lexicon.words.size() == a.lexicon.words.size());
    fs::remove_all(dir);
}

TEST_CASE("zero homophone groups flags the strict split as empty") {
    auto spec = tiny_spec();
    spec.n_homophone_groups = 0;
    CorpusData data = generate_corpus(spec, 3);
    CHECK(data.strict_context_empty);
    CHECK(data.split("eval_context_strict").empty());
}
