#include "acllm/metrics.hpp"

#include <algorithm>
#include <stdexcept>

namespace acllm {

EditStats edit_distance(const std::vector<std::string>& ref,
                        const std::vector<std::string>& hyp,
                        std::vector<AlignStep>* alignment) {
    if (ref.empty()) throw std::invalid_argument("edit_distance: empty reference");
    const int R = static_cast<int>(ref.size());
    const int H = static_cast<int>(hyp.size());
    std::vector<int> d(static_cast<size_t>(R + 1) * (H + 1), 0);
    auto D = [&](int i, int j) -> int& { return d[static_cast<size_t>(i) * (H + 1) + j]; };
    for (int i = 0; i <= R; ++i) D(i, 0) = i;
    for (int j = 0; j <= H; ++j) D(0, j) = j;
    for (int i = 1; i <= R; ++i)
        for (int j = 1; j <= H; ++j) {
            int sub = D(i - 1, j - 1) + (ref[static_cast<size_t>(i - 1)] ==
                                                 hyp[static_cast<size_t>(j - 1)]
                                             ? 0
                                             : 1);
            D(i, j) = std::min({sub, D(i - 1, j) + 1, D(i, j - 1) + 1});
        }

    EditStats st;
    st.ref_len = R;
    std::vector<AlignStep> steps;
    int i = R, j = H;
    while (i > 0 || j > 0) {
        // attribution preference on cost ties: match > sub > del > ins
        if (i > 0 && j > 0 &&
            ref[static_cast<size_t>(i - 1)] == hyp[static_cast<size_t>(j - 1)] &&
            D(i, j) == D(i - 1, j - 1)) {
            steps.push_back({EditOp::match, i - 1, j - 1});
            --i; --j;
        } else if (i > 0 && j > 0 && D(i, j) == D(i - 1, j - 1) + 1) {
            steps.push_back({EditOp::sub, i - 1, j - 1});
            ++st.substitutions;
            --i; --j;
        } else if (i > 0 && D(i, j) == D(i - 1, j) + 1) {
            steps.push_back({EditOp::del, i - 1, -1});
            ++st.deletions;
            --i;
        } else {
            steps.push_back({EditOp::ins, -1, j - 1});
            ++st.insertions;
            --j;
        }
    }
    std::reverse(steps.begin(), steps.end());
    if (alignment) *alignment = std::move(steps);
    return st;
}

std::vector<uint8_t> keyword_span_mask(
    const std::vector<std::string>& ref,
    const std::vector<std::vector<std::string>>& keywords) {
    std::vector<uint8_t> mask(ref.size(), 0);
    for (const auto& kw : keywords) {
        if (kw.empty() || kw.size() > ref.size()) continue;
        for (size_t start = 0; start + kw.size() <= ref.size(); ++start) {
            bool hit = true;
            for (size_t k = 0; k < kw.size() && hit; ++k)
                hit = ref[start + k] == kw[k];
            if (hit)
                for (size_t k = 0; k < kw.size(); ++k) mask[start + k] = 1;
        }
    }
    return mask;
}

double weighted_wer(const std::vector<std::string>& ref,
                    const std::vector<std::string>& hyp,
                    const std::vector<std::vector<std::string>>& keywords,
                    double w) {
    if (w < 1.0) throw std::invalid_argument("weighted_wer: weight must be >= 1");
    auto mask = keyword_span_mask(ref, keywords);
    std::vector<AlignStep> steps;
    edit_distance(ref, hyp, &steps);
    double num = 0;
    for (const auto& s : steps) {
        if (s.op == EditOp::match) continue;
        if (s.op == EditOp::ins)
            num += 1.0;  // no reference-side token
        else
            num += mask[static_cast<size_t>(s.ref_idx)] ? w : 1.0;
    }
    double den = 0;
    for (uint8_t m : mask) den += m ? w : 1.0;
    return num / den;
}

namespace {

int count_occurrences(const std::vector<std::string>& seq,
                      const std::vector<std::string>& span) {
    if (span.empty() || span.size() > seq.size()) return 0;
    int n = 0;
    for (size_t start = 0; start + span.size() <= seq.size(); ++start) {
        bool hit = true;
        for (size_t k = 0; k < span.size() && hit; ++k)
            hit = seq[start + k] == span[k];
        if (hit) ++n;
    }
    return n;
}

}  // namespace

double keyword_f1(const std::vector<KeywordItem>& items) {
    if (items.empty()) throw std::invalid_argument("keyword_f1: empty item list");
    int expected = 0, found = 0, claimed = 0;
    for (const auto& it : items) {
        if (it.keywords.empty())
            throw std::invalid_argument("keyword_f1: item without keywords");
        for (const auto& kw : it.keywords) {
            ++expected;
            int occ = count_occurrences(it.hyp, kw);
            if (occ > 0) ++found;
            claimed += occ;
        }
    }
    if (claimed == 0 || expected == 0) return 0.0;
    double precision = static_cast<double>(found) / claimed;
    double recall = static_cast<double>(found) / expected;
    if (precision + recall == 0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

double context_recall(const std::vector<KeywordItem>& items) {
    if (items.empty()) throw std::invalid_argument("context_recall: empty subset");
    int expected = 0, found = 0;
    for (const auto& it : items)
        for (const auto& kw : it.keywords) {
            ++expected;
            if (count_occurrences(it.hyp, kw) > 0) ++found;
        }
    if (expected == 0) throw std::invalid_argument("context_recall: no tagged keywords");
    return static_cast<double>(found) / expected;
}

}  // namespace acllm
