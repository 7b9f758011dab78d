#include "veinmatch/matching.hpp"

#include <algorithm>
#include <cmath>

#include "veinmatch/errors.hpp"

namespace veinmatch {

double Embedding::norm() const {
    double acc = 0.0;
    for (double v : values) acc += v * v;
    return std::sqrt(acc);
}

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size())
        throw DimensionError("cosine_similarity: dimension mismatch " +
                             std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0)
        throw DegenerateEmbeddingError("cosine_similarity: zero-norm embedding");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

double cosine_similarity(const Embedding& a, const Embedding& b) {
    return cosine_similarity(a.values, b.values);
}

SimilarityMatrix similarity_matrix(const std::vector<Embedding>& gallery,
                                   const std::vector<Embedding>& probes) {
    if (gallery.empty() || probes.empty())
        throw ConstraintError("similarity_matrix: empty embedding list");
    SimilarityMatrix out;
    out.records.reserve(gallery.size() * probes.size());

    std::vector<double> gnorm(gallery.size()), pnorm(probes.size());
    for (std::size_t i = 0; i < gallery.size(); ++i) gnorm[i] = gallery[i].norm();
    for (std::size_t j = 0; j < probes.size(); ++j) pnorm[j] = probes[j].norm();

    for (std::size_t i = 0; i < gallery.size(); ++i) {
        for (std::size_t j = 0; j < probes.size(); ++j) {
            const Embedding& a = gallery[i];
            const Embedding& b = probes[j];
            if (gnorm[i] == 0.0 || pnorm[j] == 0.0) {
                out.degenerate.push_back({a.source_id, b.source_id});
                continue;
            }
            if (a.values.size() != b.values.size())
                throw DimensionError("similarity_matrix: dimension mismatch");
            double dot = 0.0;
            for (std::size_t k = 0; k < a.values.size(); ++k)
                dot += a.values[k] * b.values[k];
            SimilarityRecord rec;
            rec.id_a = a.source_id;
            rec.id_b = b.source_id;
            rec.score = dot / (gnorm[i] * pnorm[j]);
            if (!a.identity.empty() && !b.identity.empty())
                rec.same_identity = a.identity == b.identity;
            out.records.push_back(std::move(rec));
        }
    }
    return out;
}

namespace {

void split_labeled_scores(const std::vector<SimilarityRecord>& records,
                          std::vector<double>& pos, std::vector<double>& neg,
                          const char* op) {
    for (const SimilarityRecord& r : records) {
        if (!r.same_identity.has_value())
            throw ConstraintError(std::string(op) + ": unlabeled record " + r.id_a +
                                  " vs " + r.id_b);
        (*r.same_identity ? pos : neg).push_back(r.score);
    }
    if (pos.empty())
        throw ConstraintError(std::string(op) + ": no same-identity records");
    if (neg.empty())
        throw ConstraintError(std::string(op) + ": no different-identity records");
}

} // namespace

double mg_eval(const std::vector<SimilarityRecord>& records) {
    std::vector<double> pos, neg;
    split_labeled_scores(records, pos, neg, "mg_eval");
    double ps = 0.0, ns = 0.0;
    for (double v : pos) ps += v;
    for (double v : neg) ns += v;
    return ps / static_cast<double>(pos.size()) - ns / static_cast<double>(neg.size());
}

double auc(const std::vector<SimilarityRecord>& records, bool half_tie_credit) {
    std::vector<double> pos, neg;
    split_labeled_scores(records, pos, neg, "auc");
    std::sort(neg.begin(), neg.end());
    double wins = 0.0;
    for (double p : pos) {
        const auto below =
            std::lower_bound(neg.begin(), neg.end(), p) - neg.begin();
        wins += static_cast<double>(below);
        if (half_tie_credit) {
            const auto upper = std::upper_bound(neg.begin(), neg.end(), p) - neg.begin();
            wins += 0.5 * static_cast<double>(upper - below);
        }
    }
    return wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

ThresholdModel kmeans_threshold(const std::vector<double>& scores,
                                std::size_t max_iters, double tol) {
    if (scores.size() < 2)
        throw ConstraintError("kmeans_threshold: need at least 2 scores");
    const auto [mn_it, mx_it] = std::minmax_element(scores.begin(), scores.end());
    if (*mn_it == *mx_it)
        throw ConstraintError("kmeans_threshold: all scores identical, clusters degenerate");

    double n = *mn_it, p = *mx_it;
    for (std::size_t it = 0; it < max_iters; ++it) {
        double sum_n = 0.0, sum_p = 0.0;
        std::size_t cnt_n = 0, cnt_p = 0;
        for (double s : scores) {
            // Equidistant points join the lower cluster.
            if (std::abs(s - n) <= std::abs(s - p)) {
                sum_n += s;
                ++cnt_n;
            } else {
                sum_p += s;
                ++cnt_p;
            }
        }
        const double new_n = cnt_n ? sum_n / static_cast<double>(cnt_n) : n;
        const double new_p = cnt_p ? sum_p / static_cast<double>(cnt_p) : p;
        const double shift = std::abs(new_n - n) + std::abs(new_p - p);
        n = new_n;
        p = new_p;
        if (shift < tol) break;
    }
    ThresholdModel model;
    model.center_n = std::min(n, p);
    model.center_p = std::max(n, p);
    return model;
}

EvalReport evaluate(const std::vector<SimilarityRecord>& records, double alpha) {
    EvalReport rep;
    rep.threshold = alpha;
    for (const SimilarityRecord& r : records) {
        if (!r.same_identity.has_value())
            throw ConstraintError("evaluate: unlabeled record " + r.id_a + " vs " + r.id_b);
        const bool accept = decide(r.score, alpha);
        if (*r.same_identity)
            accept ? ++rep.correctly_accepted : ++rep.wrong_rejected;
        else
            accept ? ++rep.wrong_accepted : ++rep.correctly_rejected;
    }
    const std::size_t total = rep.total();
    if (total == 0) throw ConstraintError("evaluate: no records");
    rep.correct_rate =
        static_cast<double>(rep.correctly_accepted + rep.correctly_rejected) /
        static_cast<double>(total);
    rep.auc = auc(records);
    rep.mg = mg_eval(records);
    return rep;
}

const std::vector<double>& default_threshold_candidates() {
    static const std::vector<double> kCandidates = {0.6, 0.65, 0.7, 0.75, 0.8};
    return kCandidates;
}

SweepResult sweep_thresholds(const std::vector<SimilarityRecord>& records,
                             const std::vector<double>& candidates) {
    if (candidates.empty())
        throw ConstraintError("sweep_thresholds: no candidates");
    SweepResult out;
    out.reports.reserve(candidates.size());
    for (double alpha : candidates) out.reports.push_back(evaluate(records, alpha));
    out.best_index = 0;
    for (std::size_t i = 1; i < out.reports.size(); ++i) {
        const EvalReport& best = out.reports[out.best_index];
        const EvalReport& cur = out.reports[i];
        if (cur.auc > best.auc ||
            (cur.auc == best.auc && cur.correct_rate > best.correct_rate))
            out.best_index = i;
    }
    return out;
}

} // namespace veinmatch
