#include "acllm/evalharness.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

namespace acllm {

std::string EvalReport::to_json() const {
    nlohmann::json j = {{"config_hash", config_hash},
                        {"checkpoint_id", checkpoint_id},
                        {"weighting", weighting},
                        {"splits", splits}};
    return j.dump(2);
}

std::string EvalReport::to_table() const {
    std::set<std::string> cols;
    for (const auto& [split, metrics] : splits)
        for (const auto& [k, v] : metrics) cols.insert(k);
    std::ostringstream os;
    os << std::left;
    os.width(24);
    os << "split";
    for (const auto& c : cols) {
        os.width(14);
        os << c;
    }
    os << '\n';
    for (const auto& [split, metrics] : splits) {
        os.width(24);
        os << split;
        for (const auto& c : cols) {
            os.width(14);
            auto it = metrics.find(c);
            if (it == metrics.end()) {
                os << "-";
            } else {
                char buf[32];
                std::snprintf(buf, sizeof buf, "%.4f", it->second);
                os << buf;
            }
        }
        os << '\n';
    }
    return os.str();
}

std::string transcribe(const AcllmModel& m, const FeatureSequence& f,
                       const Utterance& u, const EvalOptions& opts) {
    GradGuard no_grad(false);
    std::vector<int> ctx;
    if (opts.use_context && !u.context.empty())
        ctx = m.vocab.tokenize(u.context, "wordlike");
    NBestList nb;
    if (!ctx.empty()) {
        JointConfig jc = opts.joint;
        jc.beam_size = opts.beam_size;
        jc.max_len = opts.max_len;
        nb = decode_joint(m, f, ctx, jc);
    } else {
        nb = decode_utterance(m, f, {}, opts.beam_size, opts.max_len, 1);
    }
    return m.vocab.detokenize(nb.hyps.at(0).tokens, u.language);
}

std::map<std::string, double> evaluate_split(const AcllmModel& m,
                                             const CorpusData& corpus,
                                             const std::string& split,
                                             const EvalOptions& opts) {
    auto items = corpus.split(split);
    if (items.empty()) throw std::invalid_argument("evaluate_split: empty split " + split);
    if (opts.max_items > 0 && static_cast<int>(items.size()) > opts.max_items)
        items.resize(static_cast<size_t>(opts.max_items));

    long long err = 0, ref_total = 0;
    double wnum = 0, wden = 0;
    std::vector<KeywordItem> kw_items;
    bool any_ctx = false;
    for (const Utterance* u : items) {
        FeatureSequence f = corpus.features(*u);
        std::string hyp_text = transcribe(m, f, *u, opts);
        auto ref = error_units(u->transcript, u->language);
        auto hyp = error_units(hyp_text, u->language);
        EditStats st = edit_distance(ref, hyp);
        err += st.errors();
        ref_total += st.ref_len;

        if (!u->keywords.empty()) {
            std::vector<std::vector<std::string>> spans;
            for (const auto& k : u->keywords)
                spans.push_back(error_units(k, u->language));
            auto mask = keyword_span_mask(ref, spans);
            double den = 0;
            for (uint8_t b : mask) den += b ? opts.keyword_weight : 1.0;
            wnum += weighted_wer(ref, hyp, spans, opts.keyword_weight) * den;
            wden += den;
            kw_items.push_back({spans, hyp});
        }
        any_ctx = any_ctx || !u->context_dependency.empty();
    }

    std::map<std::string, double> out;
    out["wer"] = static_cast<double>(err) / static_cast<double>(ref_total);
    if (!kw_items.empty()) {
        out["weighted_wer"] = wnum / wden;
        out["keyword_f1"] = keyword_f1(kw_items);
        if (any_ctx) out["recall"] = context_recall(kw_items);
    }
    return out;
}

EvalReport evaluate_model(const AcllmModel& m, const CorpusData& corpus,
                          const std::vector<std::string>& splits,
                          const EvalOptions& opts) {
    EvalReport r;
    for (const auto& s : splits) r.splits[s] = evaluate_split(m, corpus, s, opts);
    return r;
}

std::vector<LongformItem> longform_items(const CorpusData& corpus,
                                         const std::string& split) {
    std::vector<LongformItem> out;
    std::vector<std::string> order;
    std::map<std::string, size_t> index;
    for (const Utterance* u : corpus.split(split)) {
        if (u->longform_group.empty())
            throw std::invalid_argument("longform_items: item without group");
        auto it = index.find(u->longform_group);
        if (it == index.end()) {
            index[u->longform_group] = out.size();
            LongformItem li;
            li.group = u->longform_group;
            out.push_back(std::move(li));
            it = index.find(u->longform_group);
        }
        LongformItem& li = out[it->second];
        FeatureSequence f = corpus.features(*u);
        if (li.feats.T == 0) li.feats.D = f.D;
        li.feats.frames.insert(li.feats.frames.end(), f.frames.begin(), f.frames.end());
        li.feats.T += f.T;
        auto units = error_units(u->transcript, u->language);
        li.ref.insert(li.ref.end(), units.begin(), units.end());
        for (const auto& slot : u->homophone_slots)
            if (slot.true_word != slot.canonical_word) li.crosses_homophone = true;
    }
    return out;
}

LongformEval evaluate_longform(const AcllmModel& m, const CorpusData& corpus,
                               const std::string& split, int beam_size,
                               int max_positions, int vad_min_run) {
    GradGuard no_grad(false);
    auto items = longform_items(corpus, split);
    if (items.empty()) throw std::invalid_argument("evaluate_longform: empty split");
    long long eu = 0, ev = 0, rn = 0;
    long long teu = 0, tev = 0, trn = 0;
    LongformEval out;
    for (const auto& it : items) {
        auto unseg = decode_longform(m, it.feats, "unsegmented", beam_size,
                                     max_positions, vad_min_run);
        auto vad = decode_longform(m, it.feats, "vad_segmented", beam_size,
                                   max_positions, vad_min_run);
        auto hu = error_units(unseg.transcript, "wordlike");
        auto hv = error_units(vad.transcript, "wordlike");
        long long e1 = edit_distance(it.ref, hu).errors();
        long long e2 = edit_distance(it.ref, hv).errors();
        eu += e1;
        ev += e2;
        rn += static_cast<long long>(it.ref.size());
        if (it.crosses_homophone) {
            teu += e1;
            tev += e2;
            trn += static_cast<long long>(it.ref.size());
            ++out.tagged_items;
        }
    }
    out.wer_unsegmented = static_cast<double>(eu) / static_cast<double>(rn);
    out.wer_vad = static_cast<double>(ev) / static_cast<double>(rn);
    if (trn > 0) {
        out.tagged_wer_unsegmented = static_cast<double>(teu) / static_cast<double>(trn);
        out.tagged_wer_vad = static_cast<double>(tev) / static_cast<double>(trn);
    }
    return out;
}

LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2)
        throw std::invalid_argument("fit_line: need >= 2 matching points");
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
    }
    const double mx = sx / n, my = sy / n;
    double sxx = 0, syy = 0, sxy = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    if (sxx == 0) throw std::invalid_argument("fit_line: degenerate x");
    LineFit f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    f.pearson_r = syy == 0 ? 0.0 : sxy / std::sqrt(sxx * syy);
    return f;
}

namespace {

nlohmann::json fit_json(const LineFit& f) {
    return {{"slope", f.slope}, {"intercept", f.intercept}, {"pearson_r", f.pearson_r}};
}

}  // namespace

std::string ScalingSummary::to_json() const {
    nlohmann::json recs = nlohmann::json::array();
    for (const auto& r : records)
        recs.push_back({{"width", r.width},
                        {"depth", r.depth},
                        {"param_count", r.param_count},
                        {"pretrain_loss", r.pretrain_loss},
                        {"post_sft_greedy_wer", r.post_sft_greedy_wer}});
    nlohmann::json j = {{"records", recs},
                        {"params_to_loss", fit_json(params_to_loss)},
                        {"params_to_wer", fit_json(params_to_wer)},
                        {"loss_to_wer", fit_json(loss_to_wer)}};
    return j.dump(2);
}

std::string ScalingSummary::to_csv() const {
    std::ostringstream os;
    os << "width,depth,param_count,pretrain_loss,post_sft_greedy_wer\n";
    for (const auto& r : records)
        os << r.width << ',' << r.depth << ',' << r.param_count << ','
           << r.pretrain_loss << ',' << r.post_sft_greedy_wer << '\n';
    return os.str();
}

ScalingSummary summarize_scaling(const std::vector<ScalingRecord>& records) {
    if (records.size() < 3)
        throw std::invalid_argument("scaling: need >= 3 model sizes");
    ScalingSummary s;
    s.records = records;
    std::vector<double> lp, loss, wer;
    for (const auto& r : records) {
        lp.push_back(std::log2(static_cast<double>(r.param_count)));
        loss.push_back(r.pretrain_loss);
        wer.push_back(r.post_sft_greedy_wer);
    }
    s.params_to_loss = fit_line(lp, loss);
    s.params_to_wer = fit_line(lp, wer);
    s.loss_to_wer = fit_line(loss, wer);
    return s;
}

}  // namespace acllm
