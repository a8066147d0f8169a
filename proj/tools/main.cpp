#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "acllm/pipeline.hpp"

using namespace acllm;

namespace {

struct Common {
    std::string config_path;
    uint64_t seed = 0;
    bool seed_set = false;
    std::string out;
    int stop_after = -1;
};

void add_common(CLI::App* cmd, Common& c, bool with_stop) {
    cmd->add_option("--config", c.config_path, "config file (JSON or TOML)");
    cmd->add_option("--seed", c.seed, "global seed override")
        ->each([&c](const std::string&) { c.seed_set = true; });
    cmd->add_option("--out", c.out, "output directory override");
    if (with_stop)
        cmd->add_option("--stop-after", c.stop_after,
                        "pause after N steps, writing a partial checkpoint");
}

PipelineConfig make_config(const Common& c) {
    PipelineConfig cfg;
    if (!c.config_path.empty()) cfg = load_config_file(c.config_path);
    if (c.seed_set) cfg.seed = c.seed;
    if (!c.out.empty()) cfg.out_dir = c.out;
    return cfg;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot write " + path);
    os << text;
}

std::string reward_kind(const std::string& flag) {
    if (flag == "wer") return "wer";
    if (flag == "wwer") return "weighted_wer";
    throw ConfigError("unknown reward " + flag);
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) {
        try {
            out.push_back(std::stoi(part));
        } catch (const std::exception&) {
            throw ConfigError("bad integer list: " + s);
        }
    }
    return out;
}

int run(int argc, char** argv) {
    CLI::App app{"desk-scale speech-to-text pipeline"};
    app.require_subcommand(1);

    Common c;
    std::string input_ckpt, mode = "plain", split = "eval_multidomain";
    std::string reward = "wwer", sizes = "32,48,64,96", depths;
    std::string sft_ckpt, context_ckpt, rl_ckpt, splits = "eval_multidomain";
    double alpha = -1, keyword_weight = -1, lambda = -1, mix_ratio = -1;
    int beam = -1, prune_top_k = -1, nbest = -1, max_items = 0;

    auto* synth = app.add_subcommand("synth", "generate the synthetic corpus");
    add_common(synth, c, false);

    auto* ssl1 = app.add_subcommand("ssl-pretrain", "masked-prediction pretraining");
    add_common(ssl1, c, true);

    auto* probe = app.add_subcommand("probe", "layer probe on a pretrained encoder");
    add_common(probe, c, false);
    probe->add_option("--input", input_ckpt, "encoder checkpoint")->required();

    auto* iter2 = app.add_subcommand("tokenize-iter2",
                                     "second tokenizer iteration + retrain");
    add_common(iter2, c, true);
    iter2->add_option("--input", input_ckpt, "ssl_iter1 checkpoint")->required();

    auto* sft = app.add_subcommand("sft", "supervised fine-tuning");
    add_common(sft, c, true);
    sft->add_option("--input", input_ckpt, "ssl checkpoint")->required();

    auto* csft = app.add_subcommand("context-sft", "context-aware fine-tuning");
    add_common(csft, c, true);
    csft->add_option("--input", input_ckpt, "sft checkpoint")->required();
    csft->add_option("--mix-ratio", mix_ratio, "triple fraction per batch");

    auto* rl = app.add_subcommand("rl", "sequence-level reinforcement stage");
    add_common(rl, c, true);
    rl->add_option("--input", input_ckpt, "context_sft checkpoint")->required();
    rl->add_option("--reward", reward, "wer | wwer")
        ->check(CLI::IsMember({"wer", "wwer"}));
    rl->add_option("--keyword-weight", keyword_weight, "keyword error weight");
    rl->add_option("--lambda", lambda, "cross-entropy interpolation");
    rl->add_option("--nbest", nbest, "hypotheses per item");

    auto* dec = app.add_subcommand("decode", "decode a split to n-best JSONL");
    add_common(dec, c, false);
    dec->add_option("--input", input_ckpt, "model checkpoint")->required();
    dec->add_option("--mode", mode, "plain | joint | unsegmented | vad_segmented")
        ->check(CLI::IsMember({"plain", "joint", "unsegmented", "vad_segmented"}));
    dec->add_option("--split", split, "corpus split");
    dec->add_option("--alpha", alpha, "context weight");
    dec->add_option("--beam", beam, "beam size");
    dec->add_option("--prune-top-k", prune_top_k,
                    "acoustic pruning width (0 = whole vocabulary)");
    dec->add_option("--max-items", max_items, "limit decoded items");

    auto* ev = app.add_subcommand("eval", "metric report over splits");
    add_common(ev, c, false);
    ev->add_option("--input", input_ckpt, "model checkpoint")->required();
    ev->add_option("--splits", splits, "comma-separated split names");
    ev->add_option("--beam", beam, "beam size");
    ev->add_option("--max-items", max_items, "limit items per split");

    auto* sc = app.add_subcommand("scaling", "loss/WER scaling study");
    add_common(sc, c, false);
    sc->add_option("--sizes", sizes, "comma-separated encoder widths");
    sc->add_option("--depths", depths, "matching depths (default width/16)");

    auto* ab = app.add_subcommand("ablate", "stage comparison table");
    add_common(ab, c, false);
    ab->add_option("--sft-ckpt", sft_ckpt)->required();
    ab->add_option("--context-ckpt", context_ckpt)->required();
    ab->add_option("--rl-ckpt", rl_ckpt)->required();

    CLI11_PARSE(app, argc, argv);
    PipelineConfig cfg = make_config(c);

    if (synth->parsed()) {
        generate_corpus(cfg.corpus, mix_seed(cfg.seed, "corpus"), cfg.out_dir);
        std::cout << "corpus written to " << cfg.out_dir << "\n";
        return 0;
    }
    if (ssl1->parsed()) {
        std::cout << run_stage("ssl_iter1", cfg, "", c.stop_after) << "\n";
        return 0;
    }
    if (iter2->parsed()) {
        std::cout << run_stage("ssl_iter2", cfg, input_ckpt, c.stop_after) << "\n";
        return 0;
    }
    if (probe->parsed()) {
        Checkpoint ck = load_checkpoint(input_ckpt);
        if (ck.meta.stage != "ssl_iter1" && ck.meta.stage != "ssl_iter2")
            throw StageOrderError("probe needs an ssl checkpoint, got " +
                                  ck.meta.stage);
        CorpusData corpus = generate_corpus(cfg.corpus, mix_seed(cfg.seed, "corpus"));
        SslModel model(cfg.model.enc, cfg.ssl.K,
                       mix_seed(stage_seed(cfg, ck.meta.stage), "init"));
        checkpoint_to_store(ck, model.store);
        auto dev = corpus.split("dev");
        std::vector<ProbeItem> ptrain, peval;
        for (size_t i = 0; i < dev.size(); ++i) {
            ProbeItem p;
            p.feats = corpus.features(*dev[i]);
            for (int ph : dev[i]->phonemes)
                if (ph != 0) p.target.push_back(ph);
            (static_cast<int>(i) < cfg.ssl.probe_train_items ? ptrain : peval)
                .push_back(std::move(p));
            if (static_cast<int>(i) + 1 >=
                cfg.ssl.probe_train_items + cfg.ssl.probe_eval_items)
                break;
        }
        ProbeReport rep = probe_layers(
            *model.encoder, ptrain, peval,
            static_cast<int>(corpus.lexicon.phonemes.size()) - 1, cfg.ssl.probe_steps,
            mix_seed(stage_seed(cfg, "ssl_iter2"), "probe"));
        std::cout << rep.to_json() << "\n";
        return 0;
    }
    if (sft->parsed()) {
        std::cout << run_stage("sft", cfg, input_ckpt, c.stop_after) << "\n";
        return 0;
    }
    if (csft->parsed()) {
        if (mix_ratio >= 0) cfg.context_sft.mix_ratio = static_cast<float>(mix_ratio);
        std::cout << run_stage("context_sft", cfg, input_ckpt, c.stop_after) << "\n";
        return 0;
    }
    if (rl->parsed()) {
        cfg.rl.reward.kind = reward_kind(reward);
        if (keyword_weight >= 0) cfg.rl.reward.keyword_weight = keyword_weight;
        if (lambda >= 0) cfg.rl.lambda = static_cast<float>(lambda);
        if (nbest > 0) cfg.rl.nbest = nbest;
        std::cout << run_stage("rl", cfg, input_ckpt, c.stop_after) << "\n";
        return 0;
    }

    // remaining subcommands evaluate an existing checkpoint
    if (alpha >= 0) cfg.decode.alpha = alpha;
    if (beam > 0) cfg.decode.beam_size = beam;
    if (prune_top_k > 0) cfg.decode.prune_top_k = prune_top_k;

    if (dec->parsed()) {
        Checkpoint ck = load_checkpoint(input_ckpt);
        CorpusData corpus = generate_corpus(cfg.corpus, mix_seed(cfg.seed, "corpus"));
        auto m = model_from_checkpoint(cfg, corpus, ck);
        if (prune_top_k == 0) cfg.decode.prune_top_k = m->vocab.size();
        GradGuard no_grad(false);
        std::ostringstream out;
        if (mode == "unsegmented" || mode == "vad_segmented") {
            auto items = longform_items(corpus, split);
            if (max_items > 0 && static_cast<int>(items.size()) > max_items)
                items.resize(static_cast<size_t>(max_items));
            for (const auto& it : items) {
                LongformResult r = decode_longform(*m, it.feats, mode,
                                                   cfg.decode.beam_size, 4096, 4);
                nlohmann::json j = {{"id", it.group},
                                    {"mode", mode},
                                    {"transcript", r.transcript},
                                    {"segments", r.segments}};
                out << j.dump() << "\n";
            }
        } else {
            auto items = corpus.split(split);
            if (items.empty()) throw ConfigError("decode: empty split " + split);
            if (max_items > 0 && static_cast<int>(items.size()) > max_items)
                items.resize(static_cast<size_t>(max_items));
            for (const Utterance* u : items) {
                FeatureSequence f = corpus.features(*u);
                NBestList nb;
                double a = 0;
                if (mode == "joint") {
                    nb = decode_joint(*m, f,
                                      m->vocab.tokenize(u->context, "wordlike"),
                                      cfg.decode);
                    a = cfg.decode.alpha;
                } else {
                    nb = decode_utterance(*m, f, {}, cfg.decode.beam_size,
                                          cfg.decode.max_len, 1);
                }
                out << nbest_to_jsonl(u->id, nb, m->vocab, u->language, a);
            }
        }
        if (!c.out.empty())
            write_text(c.out, out.str());
        else
            std::cout << out.str();
        return 0;
    }
    if (ev->parsed()) {
        Checkpoint ck = load_checkpoint(input_ckpt);
        CorpusData corpus = generate_corpus(cfg.corpus, mix_seed(cfg.seed, "corpus"));
        auto m = model_from_checkpoint(cfg, corpus, ck);
        EvalOptions opts;
        opts.beam_size = cfg.decode.beam_size;
        opts.max_len = cfg.decode.max_len;
        opts.joint = cfg.decode;
        opts.max_items = max_items;
        std::vector<std::string> names;
        std::stringstream ss(splits);
        std::string part;
        while (std::getline(ss, part, ',')) names.push_back(part);
        EvalReport r = evaluate_model(*m, corpus, names, opts);
        r.config_hash = config_hash(cfg);
        r.checkpoint_id = input_ckpt;
        std::cerr << r.to_table();
        if (!c.out.empty())
            write_text(c.out, r.to_json());
        else
            std::cout << r.to_json() << "\n";
        return 0;
    }
    if (sc->parsed()) {
        std::vector<int> ws = parse_int_list(sizes);
        std::vector<int> ds = depths.empty() ? std::vector<int>() : parse_int_list(depths);
        if (!ds.empty() && ds.size() != ws.size())
            throw ConfigError("scaling: sizes/depths arity mismatch");
        std::vector<std::pair<int, int>> pairs;
        for (size_t i = 0; i < ws.size(); ++i)
            pairs.emplace_back(ws[i],
                               ds.empty() ? std::max(2, ws[i] / 16) : ds[i]);
        ScalingSummary s = run_scaling_study(cfg, pairs);
        if (!c.out.empty()) {
            std::filesystem::create_directories(c.out);
            write_text(c.out + "/scaling.json", s.to_json());
            write_text(c.out + "/scaling.csv", s.to_csv());
        }
        std::cout << s.to_json() << "\n";
        return 0;
    }
    if (ab->parsed()) {
        CorpusData corpus = generate_corpus(cfg.corpus, mix_seed(cfg.seed, "corpus"));
        EvalReport r = run_ablation_grid(cfg, corpus, sft_ckpt, context_ckpt, rl_ckpt);
        std::cerr << r.to_table();
        if (!c.out.empty())
            write_text(c.out, r.to_json());
        else
            std::cout << r.to_json() << "\n";
        return 0;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const StageOrderError& e) {
        std::cerr << "stage order error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
