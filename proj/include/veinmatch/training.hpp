#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "veinmatch/dataset.hpp"
#include "veinmatch/model.hpp"
#include "veinmatch/tape.hpp"
#include "veinmatch/tensor.hpp"

namespace veinmatch {

struct TrainConfig {
    double theta = 0.3;    // loss mix: 1 = pure classification
    double lambda = 0.001; // L2 strength on the output layer
    double lr = 5e-5;
    std::size_t batch_p = 4; // identities per batch, >= 2
    std::size_t batch_k = 2; // samples per identity, >= 2
    std::size_t epochs = 30;
    std::size_t patience = 5;
    std::uint64_t seed = 1;
    std::vector<std::string> freeze;
    bool l2_all_weights = false;

    void validate() const;
    std::string to_json() const;
    static TrainConfig from_json(const std::string& text);
};

struct Batch {
    std::vector<Tensor> inputs;
    std::vector<std::size_t> labels;
    std::vector<std::string> identities;
};

struct TrainReport {
    std::vector<double> loss;
    std::vector<double> train_accuracy;
    std::vector<double> val_accuracy;
    std::vector<double> batch_mg_mean;
    std::size_t stop_epoch = 0; // epochs actually completed
    std::size_t best_epoch = 0; // 1-based; 0 if no validation tracking
    double wall_seconds = 0.0;
};

// First/second moment accumulators keyed like the parameters.
struct AdamState {
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;
    std::size_t t = 0;
};

// Class index = position of the identity in the sorted identity list.
std::map<std::string, std::size_t> identity_index_map(
    const std::vector<LabeledSample>& samples);

// P x K sampling: each batch draws batch_p identities and batch_k samples
// per identity without reuse inside an epoch, greedily favoring identities
// with the most remaining samples. Guarantees each batch carries same- and
// different-identity pairs.
std::vector<Batch> make_batches(const std::vector<LabeledSample>& dataset,
                                const TrainConfig& cfg);

// -(1/N) sum log p_{i,y_i}; probabilities clamped at 1e-12 before the log.
double cross_entropy(const Tensor& probs, const std::vector<std::size_t>& labels);

// Euclidean norm of the output-layer weights (all trainable weights when
// all_weights is set).
double l2_penalty(const ModelParams& params, bool all_weights = false);

// Mean cosine similarity over same-identity pairs minus the mean over
// different-identity pairs, across all unordered pairs.
double mg_batch(const std::vector<std::vector<double>>& embeddings,
                const std::vector<std::string>& ids);

// theta * CE(softmax(logits), y) + (1-theta)(1-MG) + lambda * ||w||_2.
// theta == 1 skips the MG term entirely and shares the classification-loss
// code path bit for bit.
double multitask_loss(const Tensor& logits, const std::vector<std::size_t>& labels,
                      const std::vector<std::vector<double>>& embeddings,
                      const std::vector<std::string>& ids, const ModelParams& params,
                      const TrainConfig& cfg);

// Differentiable mirror of the loss for training. logits/embeddings are the
// per-sample forward outputs sharing one tape.
Var multitask_loss_tape(Tape& tape, const std::vector<Var>& logits,
                        const std::vector<std::size_t>& labels,
                        const std::vector<Var>& embeddings,
                        const std::vector<std::string>& ids,
                        const std::map<std::string, Var>& param_leaves,
                        const ModelParams& params, const TrainConfig& cfg);

// Bias-corrected Adam over the trainable groups; frozen groups untouched.
void adam_step(ModelParams& params, const std::map<std::string, Tensor>& grads,
               AdamState& state, double lr, double beta1 = 0.9, double beta2 = 0.999,
               double eps = 1e-8);

// Classification accuracy in inference mode (argmax, lowest index on ties).
double accuracy(const ModelParams& params, const std::vector<LabeledSample>& samples,
                const std::map<std::string, std::size_t>& label_map);

// Full loop: P x K batches, Adam, early stop on stalled validation accuracy.
// Returns the best-validation parameters (final when validation is empty).
std::pair<ModelParams, TrainReport> train(const std::vector<LabeledSample>& train_set,
                                          const std::vector<LabeledSample>& val_set,
                                          const ModelSpec& spec, const TrainConfig& cfg);

} // namespace veinmatch
