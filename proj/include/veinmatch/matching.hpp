#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace veinmatch {

// Feature vector extracted per image. identity is the ground-truth label
// when known; it drives the same_identity flag on scored pairs.
struct Embedding {
    std::vector<double> values;
    std::string source_id;
    std::string identity;

    double norm() const;
};

// A scored pair. same_identity is absent when either side is unlabeled.
struct SimilarityRecord {
    std::string id_a;
    std::string id_b;
    double score = 0.0;
    std::optional<bool> same_identity;
};

struct DegeneratePair {
    std::string id_a;
    std::string id_b;
};

struct SimilarityMatrix {
    std::vector<SimilarityRecord> records;
    std::vector<DegeneratePair> degenerate;
};

// K-means cluster centers over similarity scores and the derived threshold.
struct ThresholdModel {
    double center_p = 0.0; // higher cluster
    double center_n = 0.0; // lower cluster
    double alpha() const { return (center_p + center_n) / 2.0; }
};

struct EvalReport {
    std::size_t correctly_accepted = 0;
    std::size_t wrong_accepted = 0;
    std::size_t wrong_rejected = 0;
    std::size_t correctly_rejected = 0;
    double correct_rate = 0.0;
    double auc = 0.0;
    double mg = 0.0;
    double threshold = 0.0;
    std::optional<double> mean_pair_seconds;
    std::optional<double> max_pair_seconds;

    std::size_t total() const {
        return correctly_accepted + wrong_accepted + wrong_rejected + correctly_rejected;
    }
};

// (a.b)/(|a||b|). Throws DegenerateEmbeddingError on a zero-norm input.
double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);
double cosine_similarity(const Embedding& a, const Embedding& b);

// Scores every gallery x probe pair in gallery-major order. Zero-norm
// embeddings surface in `degenerate` instead of poisoning the records.
SimilarityMatrix similarity_matrix(const std::vector<Embedding>& gallery,
                                   const std::vector<Embedding>& probes);

// Accept iff s > alpha, strictly.
inline bool decide(double s, double alpha) { return s > alpha; }

// Mean same-identity score minus mean different-identity score.
double mg_eval(const std::vector<SimilarityRecord>& records);

// Fraction of (positive, negative) pairs where the positive scores strictly
// higher. half_tie_credit switches to the Mann-Whitney convention of 0.5 per
// tie; the default counts ties as losses.
double auc(const std::vector<SimilarityRecord>& records, bool half_tie_credit = false);

// 1-D 2-means with centers initialized at (min, max). Throws
// ConstraintError when all scores are identical.
ThresholdModel kmeans_threshold(const std::vector<double>& scores,
                                std::size_t max_iters = 100, double tol = 1e-12);

EvalReport evaluate(const std::vector<SimilarityRecord>& records, double alpha);

struct SweepResult {
    std::vector<EvalReport> reports; // one per candidate, same order
    std::size_t best_index = 0;      // argmax by AUC, ties: correct rate, lower alpha
};

// The paper-style candidate grid.
const std::vector<double>& default_threshold_candidates();

SweepResult sweep_thresholds(const std::vector<SimilarityRecord>& records,
                             const std::vector<double>& candidates);

} // namespace veinmatch
