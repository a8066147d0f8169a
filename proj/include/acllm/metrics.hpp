#pragma once

#include <string>
#include <vector>

#include "acllm/common.hpp"

namespace acllm {

// Token-level error accounting. Units (words vs characters) are chosen by the
// caller via error_units(); everything here sees token vectors.

struct EditStats {
    int substitutions = 0;
    int insertions = 0;
    int deletions = 0;
    int ref_len = 0;

    int errors() const { return substitutions + insertions + deletions; }
    double rate() const { return static_cast<double>(errors()) / ref_len; }
};

enum class EditOp { match, sub, del, ins };

struct AlignStep {
    EditOp op;
    int ref_idx;  // -1 for insertions
    int hyp_idx;  // -1 for deletions
};

// Levenshtein with unit costs. Tie attribution order: match > sub > del > ins.
// Empty reference is an error (rate undefined).
EditStats edit_distance(const std::vector<std::string>& ref,
                        const std::vector<std::string>& hyp,
                        std::vector<AlignStep>* alignment = nullptr);

// WER with errors on keyword reference tokens costing w. Keywords are token
// spans located in the reference; insertions carry no reference token and
// cost 1. Denominator = w * keyword_tokens + other_tokens.
double weighted_wer(const std::vector<std::string>& ref,
                    const std::vector<std::string>& hyp,
                    const std::vector<std::vector<std::string>>& keywords, double w);

// Marks reference positions covered by any keyword span occurrence.
std::vector<uint8_t> keyword_span_mask(const std::vector<std::string>& ref,
                                       const std::vector<std::vector<std::string>>& keywords);

struct KeywordItem {
    std::vector<std::vector<std::string>> keywords;  // token spans expected
    std::vector<std::string> hyp;
};

// Corpus-level F1: recall counts expected keyword instances found in the
// hypothesis; precision divides by all hypothesis occurrences of listed
// keywords. Errors on an empty item list.
double keyword_f1(const std::vector<KeywordItem>& items);

// Fraction of expected keyword instances present in the hypotheses.
double context_recall(const std::vector<KeywordItem>& items);

}  // namespace acllm
