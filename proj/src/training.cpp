#include "veinmatch/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "veinmatch/matching.hpp"
#include "veinmatch/rng.hpp"

namespace veinmatch {

using nlohmann::json;

void TrainConfig::validate() const {
    if (!(theta >= 0.0 && theta <= 1.0))
        throw ParamError("TrainConfig: theta must be in [0,1]");
    if (!(lambda >= 0.0)) throw ParamError("TrainConfig: lambda must be >= 0");
    if (!(lr > 0.0)) throw ParamError("TrainConfig: lr must be > 0");
    if (batch_p < 2) throw ParamError("TrainConfig: batch_p must be >= 2");
    if (batch_k < 2) throw ParamError("TrainConfig: batch_k must be >= 2");
    if (patience < 1) throw ParamError("TrainConfig: patience must be >= 1");
    if (theta < 1.0 && batch_p * batch_k < 4)
        throw ParamError("TrainConfig: batch_p*batch_k must be >= 4 when theta < 1");
}

std::string TrainConfig::to_json() const {
    json j;
    j["theta"] = theta;
    j["lambda"] = lambda;
    j["lr"] = lr;
    j["batch_p"] = batch_p;
    j["batch_k"] = batch_k;
    j["epochs"] = epochs;
    j["patience"] = patience;
    j["seed"] = seed;
    j["freeze"] = freeze;
    j["l2_all_weights"] = l2_all_weights;
    return j.dump(2) + "\n";
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParamError(std::string("TrainConfig: invalid JSON: ") + e.what());
    }
    TrainConfig cfg;
    cfg.theta = j.value("theta", cfg.theta);
    cfg.lambda = j.value("lambda", cfg.lambda);
    cfg.lr = j.value("lr", cfg.lr);
    cfg.batch_p = j.value("batch_p", cfg.batch_p);
    cfg.batch_k = j.value("batch_k", cfg.batch_k);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.patience = j.value("patience", cfg.patience);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.freeze = j.value("freeze", cfg.freeze);
    cfg.l2_all_weights = j.value("l2_all_weights", cfg.l2_all_weights);
    cfg.validate();
    return cfg;
}

std::map<std::string, std::size_t> identity_index_map(
    const std::vector<LabeledSample>& samples) {
    std::map<std::string, std::size_t> map;
    for (const std::string& id : sorted_identities(samples))
        map.emplace(id, map.size());
    return map;
}

std::vector<Batch> make_batches(const std::vector<LabeledSample>& dataset,
                                const TrainConfig& cfg) {
    cfg.validate();
    const auto label_map = identity_index_map(dataset);

    std::map<std::string, std::vector<std::size_t>> by_identity;
    for (std::size_t i = 0; i < dataset.size(); ++i)
        by_identity[dataset[i].identity].push_back(i);

    std::size_t rich = 0;
    for (const auto& [id, list] : by_identity)
        if (list.size() >= cfg.batch_k) ++rich;
    if (rich < cfg.batch_p)
        throw DataError("make_batches: need at least " + std::to_string(cfg.batch_p) +
                        " identities with " + std::to_string(cfg.batch_k) +
                        " samples, have " + std::to_string(rich));

    Rng rng(mix_seed(cfg.seed, "batches"));
    struct Pool {
        std::string identity;
        std::vector<std::size_t> remaining; // consumed from the back
    };
    std::vector<Pool> pools;
    for (auto& [id, list] : by_identity) {
        Pool p;
        p.identity = id;
        p.remaining = list;
        rng.shuffle(p.remaining);
        pools.push_back(std::move(p));
    }

    std::vector<Batch> batches;
    for (;;) {
        // Identities with enough samples left, richest first; seeded shuffle
        // breaks ties so batch composition varies with the seed.
        std::vector<std::size_t> eligible;
        for (std::size_t i = 0; i < pools.size(); ++i)
            if (pools[i].remaining.size() >= cfg.batch_k) eligible.push_back(i);
        if (eligible.size() < cfg.batch_p) break;
        rng.shuffle(eligible);
        std::stable_sort(eligible.begin(), eligible.end(),
                         [&](std::size_t a, std::size_t b) {
                             return pools[a].remaining.size() > pools[b].remaining.size();
                         });

        Batch batch;
        for (std::size_t pi = 0; pi < cfg.batch_p; ++pi) {
            Pool& pool = pools[eligible[pi]];
            for (std::size_t ki = 0; ki < cfg.batch_k; ++ki) {
                const std::size_t sample = pool.remaining.back();
                pool.remaining.pop_back();
                batch.inputs.push_back(to_tensor(dataset[sample].image));
                batch.labels.push_back(label_map.at(pool.identity));
                batch.identities.push_back(pool.identity);
            }
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

double cross_entropy(const Tensor& probs, const std::vector<std::size_t>& labels) {
    if (probs.rank() != 2) throw DimensionError("cross_entropy: probs must be [N,C]");
    const std::size_t n = probs.extent(0), c = probs.extent(1);
    if (labels.size() != n)
        throw DimensionError("cross_entropy: label count != row count");
    for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < c; ++j) row += probs.at2(i, j);
        if (std::abs(row - 1.0) > 1e-9)
            throw ConstraintError("cross_entropy: row " + std::to_string(i) +
                                  " does not sum to 1");
        if (labels[i] >= c)
            throw ConstraintError("cross_entropy: label " + std::to_string(labels[i]) +
                                  " out of range for " + std::to_string(c) + " classes");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        acc += std::log(std::max(probs.at2(i, labels[i]), 1e-12));
    return -acc / static_cast<double>(n);
}

double l2_penalty(const ModelParams& params, bool all_weights) {
    double sum = 0.0;
    if (all_weights) {
        for (const auto& [name, t] : params.tensors) {
            if (name.size() < 7 || name.substr(name.size() - 7) != ".weight") continue;
            if (!params.trainable.at(name)) continue;
            for (double v : t.values()) sum += v * v;
        }
    } else {
        const auto it = params.tensors.find("head.out.weight");
        if (it == params.tensors.end())
            throw ConstraintError("l2_penalty: model has no head.out.weight");
        for (double v : it->second.values()) sum += v * v;
    }
    return std::sqrt(sum);
}

namespace {

// Pair means in a fixed i<j order; the tape version mirrors this exactly.
void mg_pair_sums(const std::vector<std::string>& ids,
                  const std::function<double(std::size_t, std::size_t)>& score,
                  double& same_sum, std::size_t& same_count, double& diff_sum,
                  std::size_t& diff_count) {
    same_sum = diff_sum = 0.0;
    same_count = diff_count = 0;
    for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = i + 1; j < ids.size(); ++j) {
            const double s = score(i, j);
            if (ids[i] == ids[j]) {
                same_sum += s;
                ++same_count;
            } else {
                diff_sum += s;
                ++diff_count;
            }
        }
}

} // namespace

double mg_batch(const std::vector<std::vector<double>>& embeddings,
                const std::vector<std::string>& ids) {
    if (embeddings.size() != ids.size())
        throw DimensionError("mg_batch: embeddings/ids size mismatch");
    if (embeddings.size() < 2)
        throw ConstraintError("mg_batch: need at least two embeddings");
    for (const auto& e : embeddings) {
        double n2 = 0.0;
        for (double v : e) n2 += v * v;
        if (n2 == 0.0)
            throw DegenerateEmbeddingError("mg_batch: zero-norm embedding in batch");
    }
    double same_sum, diff_sum;
    std::size_t same_count, diff_count;
    mg_pair_sums(
        ids,
        [&](std::size_t i, std::size_t j) {
            return cosine_similarity(embeddings[i], embeddings[j]);
        },
        same_sum, same_count, diff_sum, diff_count);
    if (same_count == 0)
        throw ConstraintError("mg_batch: batch has no same-identity pair");
    if (diff_count == 0)
        throw ConstraintError("mg_batch: batch has no different-identity pair");
    return same_sum / static_cast<double>(same_count) -
           diff_sum / static_cast<double>(diff_count);
}

double multitask_loss(const Tensor& logits, const std::vector<std::size_t>& labels,
                      const std::vector<std::vector<double>>& embeddings,
                      const std::vector<std::string>& ids, const ModelParams& params,
                      const TrainConfig& cfg) {
    if (logits.rank() != 2) throw DimensionError("multitask_loss: logits must be [N,C]");
    const std::size_t n = logits.extent(0), c = logits.extent(1);
    Tensor probs({n, c});
    for (std::size_t i = 0; i < n; ++i) {
        // Row-wise stable softmax.
        double mx = logits.at2(i, 0);
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits.at2(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            probs.at2(i, j) = std::exp(logits.at2(i, j) - mx);
            sum += probs.at2(i, j);
        }
        for (std::size_t j = 0; j < c; ++j) probs.at2(i, j) /= sum;
    }
    const double ce = cross_entropy(probs, labels);
    const double pen = l2_penalty(params, cfg.l2_all_weights);
    if (cfg.theta == 1.0) return ce + cfg.lambda * pen;
    const double mg = mg_batch(embeddings, ids);
    return cfg.theta * ce + (1.0 - cfg.theta) * (1.0 - mg) + cfg.lambda * pen;
}

Var multitask_loss_tape(Tape& tape, const std::vector<Var>& logits,
                        const std::vector<std::size_t>& labels,
                        const std::vector<Var>& embeddings,
                        const std::vector<std::string>& ids,
                        const std::map<std::string, Var>& param_leaves,
                        const ModelParams& params, const TrainConfig& cfg) {
    if (logits.empty()) throw ConstraintError("multitask_loss_tape: empty batch");
    const auto n = static_cast<double>(logits.size());

    // Cross-entropy: sum of clamped log-likelihoods, scaled by -1/N.
    Var log_sum;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        Var p = tape.softmax(logits[i]);
        Var ll = tape.log_clamped(tape.pick(p, labels[i]), 1e-12);
        log_sum = i == 0 ? ll : tape.add(log_sum, ll);
    }
    Var ce = tape.scale(log_sum, -1.0 / n);

    // L2 penalty.
    Var pen;
    if (cfg.l2_all_weights) {
        Var sq;
        bool first = true;
        for (const auto& [name, leaf] : param_leaves) {
            if (name.size() < 7 || name.substr(name.size() - 7) != ".weight") continue;
            if (!params.trainable.at(name)) continue;
            Var d = tape.dot(leaf, leaf);
            sq = first ? d : tape.add(sq, d);
            first = false;
        }
        pen = first ? tape.leaf(Tensor::scalar(0.0), false) : tape.sqrt(sq);
    } else {
        const Var w = param_leaves.at("head.out.weight");
        pen = tape.sqrt(tape.dot(w, w));
    }

    if (cfg.theta == 1.0) return tape.add(ce, tape.scale(pen, cfg.lambda));

    // MG over all unordered pairs, via cached squared norms.
    if (embeddings.size() != ids.size() || embeddings.size() != logits.size())
        throw DimensionError("multitask_loss_tape: embeddings/ids/logits mismatch");
    std::vector<Var> norm2(embeddings.size());
    for (std::size_t i = 0; i < embeddings.size(); ++i) {
        double n2 = 0.0;
        for (double v : embeddings[i].value().values()) n2 += v * v;
        if (n2 == 0.0)
            throw DegenerateEmbeddingError("multitask_loss_tape: zero-norm embedding");
        norm2[i] = tape.dot(embeddings[i], embeddings[i]);
    }
    Var same_sum, diff_sum;
    std::size_t same_count = 0, diff_count = 0;
    for (std::size_t i = 0; i < embeddings.size(); ++i)
        for (std::size_t j = i + 1; j < embeddings.size(); ++j) {
            Var cos = tape.div(tape.dot(embeddings[i], embeddings[j]),
                               tape.sqrt(tape.mul(norm2[i], norm2[j])));
            if (ids[i] == ids[j]) {
                same_sum = same_count == 0 ? cos : tape.add(same_sum, cos);
                ++same_count;
            } else {
                diff_sum = diff_count == 0 ? cos : tape.add(diff_sum, cos);
                ++diff_count;
            }
        }
    if (same_count == 0)
        throw ConstraintError("multitask_loss_tape: batch has no same-identity pair");
    if (diff_count == 0)
        throw ConstraintError("multitask_loss_tape: batch has no different-identity pair");
    Var mg = tape.sub(tape.scale(same_sum, 1.0 / static_cast<double>(same_count)),
                      tape.scale(diff_sum, 1.0 / static_cast<double>(diff_count)));
    Var one_minus_mg = tape.add_const(tape.scale(mg, -1.0), 1.0);

    return tape.add(tape.add(tape.scale(ce, cfg.theta),
                             tape.scale(one_minus_mg, 1.0 - cfg.theta)),
                    tape.scale(pen, cfg.lambda));
}

void adam_step(ModelParams& params, const std::map<std::string, Tensor>& grads,
               AdamState& state, double lr, double beta1, double beta2, double eps) {
    ++state.t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    for (auto& [name, tensor] : params.tensors) {
        if (!params.trainable.at(name)) continue;
        const auto git = grads.find(name);
        if (git == grads.end())
            throw ConstraintError("adam_step: missing gradient for " + name);
        const Tensor& g = git->second;
        if (!g.same_shape(tensor))
            throw DimensionError("adam_step: gradient shape mismatch for " + name);
        Tensor& m = state.m.try_emplace(name, Tensor(tensor.shape(), 0.0)).first->second;
        Tensor& v = state.v.try_emplace(name, Tensor(tensor.shape(), 0.0)).first->second;
        for (std::size_t i = 0; i < tensor.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            tensor[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

namespace {

// Inference forwards in chunks so tape memory stays bounded.
std::vector<std::size_t> predict_classes(const ModelParams& params,
                                         const std::vector<LabeledSample>& samples) {
    constexpr std::size_t kChunk = 16;
    std::vector<std::size_t> out;
    out.reserve(samples.size());
    for (std::size_t base = 0; base < samples.size(); base += kChunk) {
        Tape tape;
        const auto leaves = make_param_leaves(tape, params);
        const std::size_t end = std::min(base + kChunk, samples.size());
        for (std::size_t i = base; i < end; ++i) {
            Var input = tape.leaf(to_tensor(samples[i].image), false);
            const Tensor logits =
                forward_model(tape, leaves, params.spec, input, 0, false).logits.value();
            std::size_t arg = 0;
            for (std::size_t j = 1; j < logits.size(); ++j)
                if (logits[j] > logits[arg]) arg = j;
            out.push_back(arg);
        }
    }
    return out;
}

} // namespace

double accuracy(const ModelParams& params, const std::vector<LabeledSample>& samples,
                const std::map<std::string, std::size_t>& label_map) {
    if (samples.empty()) return 0.0;
    const auto preds = predict_classes(params, samples);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < samples.size(); ++i)
        if (preds[i] == label_map.at(samples[i].identity)) ++correct;
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

std::pair<ModelParams, TrainReport> train(const std::vector<LabeledSample>& train_set,
                                          const std::vector<LabeledSample>& val_set,
                                          const ModelSpec& spec, const TrainConfig& cfg) {
    cfg.validate();
    if (train_set.empty()) throw DataError("train: empty training set");
    const auto label_map = identity_index_map(train_set);
    if (label_map.size() != spec.head.classes)
        throw DataError("train: dataset has " + std::to_string(label_map.size()) +
                        " identities but spec declares " +
                        std::to_string(spec.head.classes) + " classes");
    for (const LabeledSample& s : val_set)
        if (!label_map.count(s.identity))
            throw DataError("train: validation identity " + s.identity +
                            " missing from training set");

    const auto t0 = std::chrono::steady_clock::now();
    ModelParams params = build_model(spec, cfg.seed);
    apply_freeze(params, cfg.freeze);

    TrainReport report;
    if (cfg.epochs == 0) {
        report.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return {std::move(params), std::move(report)};
    }

    // Deterministic given cfg, hence identical every epoch.
    const std::vector<Batch> batches = make_batches(train_set, cfg);

    AdamState adam;
    ModelParams best_params = params;
    double best_val = -1.0;
    std::size_t stale = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double loss_sum = 0.0;
        double mg_sum = 0.0;
        std::size_t mg_count = 0;

        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            const Batch& batch = batches[bi];
            Tape tape;
            const auto leaves = make_param_leaves(tape, params);
            std::vector<Var> logits, embeds;
            std::vector<std::vector<double>> embed_values;
            for (std::size_t si = 0; si < batch.inputs.size(); ++si) {
                Var input = tape.leaf(batch.inputs[si], false);
                ForwardVars fw =
                    forward_model(tape, leaves, spec, input,
                                  mix_seed(mix_seed(cfg.seed, bi), si), true);
                logits.push_back(fw.logits);
                embeds.push_back(fw.embedding);
                embed_values.push_back(fw.embedding.value().values());
            }
            Var loss = multitask_loss_tape(tape, logits, batch.labels, embeds,
                                           batch.identities, leaves, params, cfg);
            loss_sum += loss.value()[0];
            try {
                mg_sum += mg_batch(embed_values, batch.identities);
                ++mg_count;
            } catch (const Error&) {
                // trace only; a batch without usable pairs leaves the trace out
            }

            const Gradients grads = tape.grad(loss);
            std::map<std::string, Tensor> named_grads;
            for (const std::string& name : params.trainable_names())
                named_grads.emplace(name, grads.wrt(leaves.at(name)));
            adam_step(params, named_grads, adam, cfg.lr);
        }

        report.loss.push_back(loss_sum / static_cast<double>(batches.size()));
        report.train_accuracy.push_back(accuracy(params, train_set, label_map));
        const double val_acc =
            val_set.empty() ? std::numeric_limits<double>::quiet_NaN()
                            : accuracy(params, val_set, label_map);
        report.val_accuracy.push_back(val_acc);
        report.batch_mg_mean.push_back(
            mg_count ? mg_sum / static_cast<double>(mg_count)
                     : std::numeric_limits<double>::quiet_NaN());
        report.stop_epoch = epoch + 1;

        if (!val_set.empty()) {
            if (val_acc > best_val) {
                best_val = val_acc;
                best_params = params;
                report.best_epoch = epoch + 1;
                stale = 0;
            } else if (++stale >= cfg.patience) {
                break;
            }
        }
    }

    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (val_set.empty()) return {std::move(params), std::move(report)};
    return {std::move(best_params), std::move(report)};
}

} // namespace veinmatch
