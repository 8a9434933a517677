#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

namespace spiraldiff {

// Sentence BLEU with clipped n-gram precision, brevity penalty and add-one
// smoothing applied to zero counts of order n >= 2. Unigram precision is
// never smoothed, so disjoint hypothesis/reference pairs score exactly 0.
// Works over any comparable token type (token ids in MBR, strings in eval).
template <class Tok>
double bleu(const std::vector<Tok>& hyp, const std::vector<std::vector<Tok>>& refs, int max_n = 4) {
    if (max_n < 1) {
        max_n = 1;
    }
    const std::size_t c = hyp.size();
    if (c == 0 || refs.empty()) {
        return 0.0;
    }

    // Effective reference length: closest to the hypothesis length,
    // shorter one on ties.
    std::size_t r = refs.front().size();
    for (const auto& ref : refs) {
        const auto diff = [&](std::size_t len) {
            return len > c ? len - c : c - len;
        };
        if (diff(ref.size()) < diff(r) || (diff(ref.size()) == diff(r) && ref.size() < r)) {
            r = ref.size();
        }
    }

    double log_precision_sum = 0.0;
    for (int n = 1; n <= max_n; ++n) {
        using Ngram = std::vector<Tok>;
        std::map<Ngram, int> hyp_counts;
        const std::size_t total = c >= static_cast<std::size_t>(n) ? c - n + 1 : 0;
        for (std::size_t i = 0; i + n <= c; ++i) {
            hyp_counts[Ngram(hyp.begin() + i, hyp.begin() + i + n)] += 1;
        }
        std::map<Ngram, int> clip;
        for (const auto& ref : refs) {
            std::map<Ngram, int> ref_counts;
            for (std::size_t i = 0; i + n <= ref.size(); ++i) {
                ref_counts[Ngram(ref.begin() + i, ref.begin() + i + n)] += 1;
            }
            for (const auto& [gram, cnt] : ref_counts) {
                auto it = clip.find(gram);
                if (it == clip.end()) {
                    clip[gram] = cnt;
                } else {
                    it->second = std::max(it->second, cnt);
                }
            }
        }
        long matched = 0;
        for (const auto& [gram, cnt] : hyp_counts) {
            auto it = clip.find(gram);
            if (it != clip.end()) {
                matched += std::min(cnt, it->second);
            }
        }
        double p;
        if (matched > 0) {
            p = static_cast<double>(matched) / static_cast<double>(total);
        } else if (n == 1) {
            return 0.0;  // no unigram overlap: BLEU is exactly zero
        } else {
            p = 1.0 / static_cast<double>(total + 1);  // add-one smoothing
        }
        log_precision_sum += std::log(p);
    }

    double bp = 1.0;
    if (c < r) {
        bp = std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
    }
    return bp * std::exp(log_precision_sum / max_n);
}

template <class Tok>
double bleu(const std::vector<Tok>& hyp, const std::vector<Tok>& ref, int max_n = 4) {
    return bleu(hyp, std::vector<std::vector<Tok>>{ref}, max_n);
}

// Longest common subsequence length by dynamic programming.
template <class Tok>
int lcs_length(const std::vector<Tok>& a, const std::vector<Tok>& b) {
    const std::size_t n = a.size();
    const std::size_t m = b.size();
    if (n == 0 || m == 0) {
        return 0;
    }
    std::vector<int> prev(m + 1, 0);
    std::vector<int> cur(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        for (std::size_t j = 1; j <= m; ++j) {
            if (a[i - 1] == b[j - 1]) {
                cur[j] = prev[j - 1] + 1;
            } else {
                cur[j] = std::max(prev[j], cur[j - 1]);
            }
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

// ROUGE-L as the LCS-based F1 (beta = 1): P = L/|hyp|, R = L/|ref|.
template <class Tok>
double rouge_l(const std::vector<Tok>& hyp, const std::vector<Tok>& ref) {
    if (hyp.empty() || ref.empty()) {
        return 0.0;
    }
    const int l = lcs_length(hyp, ref);
    if (l == 0) {
        return 0.0;
    }
    const double p = static_cast<double>(l) / static_cast<double>(hyp.size());
    const double r = static_cast<double>(l) / static_cast<double>(ref.size());
    return 2.0 * p * r / (p + r);
}

struct MetricReport {
    double bleu = 0.0;
    double rouge_l = 0.0;
    double exact_match = 0.0;
    long n = 0;
};

// Corpus BLEU variant with pooled n-gram counts, selectable behind a flag.
// The default report uses the mean of sentence BLEU (the same per-pair
// metric MBR uses).
template <class Tok>
double corpus_bleu_pooled(const std::vector<std::vector<Tok>>& hyps,
                          const std::vector<std::vector<Tok>>& refs, int max_n = 4) {
    if (hyps.size() != refs.size() || hyps.empty()) {
        return 0.0;
    }
    double log_precision_sum = 0.0;
    long total_c = 0;
    long total_r = 0;
    for (std::size_t k = 0; k < hyps.size(); ++k) {
        total_c += static_cast<long>(hyps[k].size());
        total_r += static_cast<long>(refs[k].size());
    }
    if (total_c == 0) {
        return 0.0;
    }
    for (int n = 1; n <= max_n; ++n) {
        long matched = 0;
        long total = 0;
        using Ngram = std::vector<Tok>;
        for (std::size_t k = 0; k < hyps.size(); ++k) {
            const auto& hyp = hyps[k];
            const auto& ref = refs[k];
            std::map<Ngram, int> hyp_counts;
            for (std::size_t i = 0; i + n <= hyp.size(); ++i) {
                hyp_counts[Ngram(hyp.begin() + i, hyp.begin() + i + n)] += 1;
            }
            std::map<Ngram, int> ref_counts;
            for (std::size_t i = 0; i + n <= ref.size(); ++i) {
                ref_counts[Ngram(ref.begin() + i, ref.begin() + i + n)] += 1;
            }
            for (const auto& [gram, cnt] : hyp_counts) {
                auto it = ref_counts.find(gram);
                if (it != ref_counts.end()) {
                    matched += std::min(cnt, it->second);
                }
            }
            total += hyp.size() >= static_cast<std::size_t>(n)
                         ? static_cast<long>(hyp.size()) - n + 1
                         : 0;
        }
        double p;
        if (matched > 0) {
            p = static_cast<double>(matched) / static_cast<double>(total);
        } else if (n == 1) {
            return 0.0;
        } else {
            p = 1.0 / static_cast<double>(total + 1);
        }
        log_precision_sum += std::log(p);
    }
    double bp = 1.0;
    if (total_c < total_r) {
        bp = std::exp(1.0 - static_cast<double>(total_r) / static_cast<double>(total_c));
    }
    return bp * std::exp(log_precision_sum / max_n);
}

template <class Tok>
MetricReport evaluate_pairs(const std::vector<std::vector<Tok>>& hyps,
                            const std::vector<std::vector<Tok>>& refs) {
    MetricReport report;
    report.n = static_cast<long>(hyps.size());
    if (hyps.empty() || hyps.size() != refs.size()) {
        return report;
    }
    double bleu_sum = 0.0;
    double rouge_sum = 0.0;
    long exact = 0;
    for (std::size_t i = 0; i < hyps.size(); ++i) {
        bleu_sum += bleu(hyps[i], refs[i]);
        rouge_sum += rouge_l(hyps[i], refs[i]);
        if (hyps[i] == refs[i]) {
            ++exact;
        }
    }
    report.bleu = bleu_sum / static_cast<double>(hyps.size());
    report.rouge_l = rouge_sum / static_cast<double>(hyps.size());
    report.exact_match = static_cast<double>(exact) / static_cast<double>(hyps.size());
    return report;
}

}  // namespace spiraldiff
