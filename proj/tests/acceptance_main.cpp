// Acceptance suite: one pass/fail line per criterion. Exit 0 only if all
// criteria pass. Heavier end-to-end criteria share trained models per seed.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <vector>

#include "veinmatch/dataset.hpp"
#include "veinmatch/gallery.hpp"
#include "veinmatch/gradcheck_suite.hpp"
#include "veinmatch/infer32.hpp"
#include "veinmatch/matching.hpp"
#include "veinmatch/perturb.hpp"
#include "veinmatch/pipeline.hpp"
#include "veinmatch/report.hpp"
#include "veinmatch/rng.hpp"
#include "veinmatch/training.hpp"

using namespace veinmatch;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int criterion, const std::string& name, bool pass,
            const std::string& detail) {
    std::cout << "criterion " << criterion << " [" << (pass ? "PASS" : "FAIL") << "] "
              << name << ": " << detail << "\n"
              << std::flush;
    if (!pass) ++g_failures;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct SeedRun {
    std::uint64_t seed;
    double theta;
    ModelParams params;
    DatasetSplit split;
    SimilarityMatrix matrix; // match_gallery x match_probes
    double mg = 0.0;
    double auc_value = 0.0;
};

// Reduced-scale configuration for the multi-seed trend studies: 32x32
// inputs, a narrow two-block backbone, short schedule.
ModelSpec trend_model_spec(std::size_t classes) {
    ModelSpec spec;
    spec.input_height = 32;
    spec.input_width = 32;
    spec.blocks = {{1, 3, 8, true, true}, {1, 3, 16, true, true}};
    spec.head.hidden = {64};
    spec.head.dropout = 0.3;
    spec.head.classes = classes;
    return spec;
}

SynthSpec trend_synth_spec(std::uint64_t seed) {
    SynthSpec synth;
    synth.identity_count = 14; // 10 train + 4 held out
    synth.images_per_session = 6;
    synth.side = 32;
    synth.identity_seed = seed;
    return synth;
}

SeedRun run_trend_training(std::uint64_t seed, double theta) {
    SeedRun run;
    run.seed = seed;
    run.theta = theta;

    const auto samples = synth_generate(trend_synth_spec(seed));
    run.split = split(samples, 4, 0.15);

    TrainConfig cfg;
    cfg.theta = theta;
    cfg.lambda = 0.001;
    cfg.lr = 1e-3;
    cfg.batch_p = 4;
    cfg.batch_k = 2;
    cfg.epochs = 8;
    cfg.patience = 8;
    cfg.seed = seed;

    const ModelSpec spec = trend_model_spec(sorted_identities(run.split.train).size());
    auto [params, report_unused] = train(run.split.train, run.split.validation, spec, cfg);
    run.params = std::move(params);

    const auto gal = embed_samples(run.params, run.split.match_gallery);
    const auto probes = embed_samples(run.params, run.split.match_probes);
    run.matrix = similarity_matrix(gal, probes);
    run.mg = mg_eval(run.matrix.records);
    run.auc_value = auc(run.matrix.records);
    return run;
}

// ---------------------------------------------------------------------------

void criterion_1_gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto results = run_gradcheck_suite(100, 2024, 1e-4);
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double worst = gradcheck_suite_max(results);
    std::ostringstream detail;
    detail << "max rel error " << fmt_real(worst, 4) << " over 100 trials x "
           << results.size() << " checks in " << fmt_real(elapsed, 4) << "s";
    report(1, "gradient soundness", worst < 1e-4 && elapsed < 120.0, detail.str());
}

void criterion_2_loss_decomposition() {
    Rng rng(777);
    bool all_equal = true;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + rng.uniform_index(6);
        const std::size_t c = 2 + rng.uniform_index(5);
        Tensor logits({n, c});
        for (double& v : logits.values()) v = rng.uniform(-4.0, 4.0);
        std::vector<std::size_t> labels(n);
        for (auto& l : labels) l = rng.uniform_index(c);
        ModelParams params;
        Tensor w({c, 8});
        for (double& v : w.values()) v = rng.uniform(-1.0, 1.0);
        params.tensors.emplace("head.out.weight", w);
        params.trainable["head.out.weight"] = true;
        TrainConfig cfg;
        cfg.theta = 1.0;
        cfg.lambda = 0.001;

        Tensor probs({n, c});
        for (std::size_t i = 0; i < n; ++i) {
            double mx = logits.at2(i, 0);
            for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits.at2(i, j));
            double sum = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                probs.at2(i, j) = std::exp(logits.at2(i, j) - mx);
                sum += probs.at2(i, j);
            }
            for (std::size_t j = 0; j < c; ++j) probs.at2(i, j) /= sum;
        }
        const double reference =
            cross_entropy(probs, labels) + cfg.lambda * l2_penalty(params);
        const double loss = multitask_loss(logits, labels, {}, {}, params, cfg);
        if (loss != reference) all_equal = false;
    }
    report(2, "theta=1 reduces to classification loss bit-for-bit", all_equal,
           all_equal ? "50/50 random batches identical" : "bitwise mismatch found");
}

void criterion_3_oracle_equivalence() {
    Rng rng(888);
    bool auc_ok = true;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t np = 1 + rng.uniform_index(25);
        const std::size_t nn = 1 + rng.uniform_index(25);
        std::vector<SimilarityRecord> records;
        std::vector<double> pos(np), neg(nn);
        for (double& v : pos) v = static_cast<double>(rng.uniform_index(30)) / 30.0;
        for (double& v : neg) v = static_cast<double>(rng.uniform_index(30)) / 30.0;
        for (double s : pos) records.push_back({"a", "b", s, true});
        for (double s : neg) records.push_back({"a", "b", s, false});
        std::size_t wins = 0;
        for (double p : pos)
            for (double n2 : neg)
                if (p > n2) ++wins;
        const double oracle = static_cast<double>(wins) /
                              (static_cast<double>(np) * static_cast<double>(nn));
        if (auc(records) != oracle) auc_ok = false;
    }

    bool kmeans_ok = true;
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 2 + rng.uniform_index(11);
        std::vector<double> scores = {rng.uniform(0.0, 0.25), rng.uniform(0.65, 1.0)};
        for (std::size_t i = 2; i < n; ++i)
            scores.push_back((rng.uniform() < 0.5 ? 0.12 : 0.85) +
                             rng.uniform(-0.06, 0.06));
        std::sort(scores.begin(), scores.end());
        double best_sse = 0.0;
        double want_n = 0.0, want_p = 0.0;
        bool first = true;
        for (std::size_t sp = 1; sp < scores.size(); ++sp) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t i = 0; i < sp; ++i) m1 += scores[i];
            for (std::size_t i = sp; i < scores.size(); ++i) m2 += scores[i];
            m1 /= static_cast<double>(sp);
            m2 /= static_cast<double>(scores.size() - sp);
            double sse = 0.0;
            for (std::size_t i = 0; i < sp; ++i)
                sse += (scores[i] - m1) * (scores[i] - m1);
            for (std::size_t i = sp; i < scores.size(); ++i)
                sse += (scores[i] - m2) * (scores[i] - m2);
            if (first || sse < best_sse) {
                best_sse = sse;
                want_n = m1;
                want_p = m2;
                first = false;
            }
        }
        const ThresholdModel got = kmeans_threshold(scores);
        if (std::abs(got.center_n - want_n) > 1e-9 ||
            std::abs(got.center_p - want_p) > 1e-9)
            kmeans_ok = false;
    }
    report(3, "auc and kmeans match brute-force oracles", auc_ok && kmeans_ok,
           std::string("auc ") + (auc_ok ? "1000/1000" : "mismatch") + ", kmeans " +
               (kmeans_ok ? "500/500" : "mismatch"));
}

void criterion_4_worked_values() {
    bool ok = true;
    std::ostringstream detail;

    const double cos_val = cosine_similarity({1.0, 1.0}, {1.0, 0.0});
    ok &= std::abs(cos_val - 0.707107) <= 1e-6;

    const double mg1 = mg_batch({{1, 0}, {1, 0}, {0, 1}}, {"A", "A", "B"});
    const double mg2 = mg_batch({{1, 0}, {0, 1}, {1, 0}}, {"A", "A", "B"});
    ok &= mg1 == 1.0;
    ok &= mg2 == -0.5;

    std::vector<SimilarityRecord> auc_records = {{"", "", 0.9, true},
                                                 {"", "", 0.8, true},
                                                 {"", "", 0.85, false},
                                                 {"", "", 0.7, false}};
    ok &= auc(auc_records) == 0.75;

    const ThresholdModel tm = kmeans_threshold({0.1, 0.2, 0.9, 1.0});
    ok &= std::abs(tm.alpha() - 0.55) <= 1e-9;

    std::vector<SimilarityRecord> table;
    for (int i = 0; i < 345; ++i) table.push_back({"", "", 0.9, true});
    for (int i = 0; i < 15; ++i) table.push_back({"", "", 0.1, true});
    for (int i = 0; i < 79; ++i) table.push_back({"", "", 0.9, false});
    for (int i = 0; i < 3161; ++i) table.push_back({"", "", 0.1, false});
    const EvalReport er = evaluate(table, 0.5);
    ok &= std::round(er.correct_rate * 10000.0) / 100.0 == 97.39;

    detail << "cosine " << fmt_real(cos_val, 7) << ", MG {" << mg1 << "," << mg2
           << "}, AUC 0.75, alpha " << fmt_real(tm.alpha(), 6) << ", rate "
           << fmt_real(er.correct_rate * 100.0, 4) << "%";
    report(4, "worked value checks", ok, detail.str());
}

void criterion_5_end_to_end() {
    const auto t0 = std::chrono::steady_clock::now();

    const auto samples = synth_generate(SynthSpec{}); // 10 ids, 6+6, 64x64
    const DatasetSplit sp = split(samples, 0, 0.15);
    const double oracle = nearest_centroid_oracle(sp);

    TrainConfig cfg;
    cfg.theta = 1.0;
    cfg.lambda = 0.001;
    cfg.lr = 1e-3; // inside the allowed 5e-5..1e-3 sweep
    cfg.batch_p = 5;
    cfg.batch_k = 2;
    cfg.epochs = 30;
    cfg.patience = 6;
    cfg.seed = 1;

    const ModelSpec spec = ModelSpec::desk_default(10, 64);
    auto [params, rep] = train(sp.train, sp.validation, spec, cfg);

    double best_val = 0.0;
    for (double v : rep.val_accuracy) best_val = std::max(best_val, v);
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    std::ostringstream detail;
    detail << "val acc " << fmt_real(best_val, 4) << " vs oracle " << fmt_real(oracle, 4)
           << ", epochs " << rep.stop_epoch << ", " << fmt_real(elapsed, 4) << "s";
    report(5, "end-to-end synthetic run",
           best_val >= 0.95 && best_val > oracle && elapsed <= 300.0, detail.str());
}

void criteria_6_7_8_trends() {
    const std::vector<std::uint64_t> seeds = {101, 202, 303, 404, 505};
    const std::vector<double> thetas = {0.1, 0.3, 0.5, 1.0};

    std::map<double, std::vector<double>> mg_by_theta, auc_by_theta;
    std::map<std::uint64_t, SeedRun> theta03_runs;

    for (std::uint64_t seed : seeds) {
        for (double theta : thetas) {
            SeedRun run = run_trend_training(seed, theta);
            mg_by_theta[theta].push_back(run.mg);
            auc_by_theta[theta].push_back(run.auc_value);
            if (theta == 0.3) theta03_runs.emplace(seed, std::move(run));
        }
    }

    std::cout << "  theta sweep (median over 5 seeds):\n";
    for (double theta : thetas)
        std::cout << "    theta " << fmt_real(theta, 3) << ": MG "
                  << fmt_real(median(mg_by_theta[theta]), 6) << " AUC "
                  << fmt_real(median(auc_by_theta[theta]), 6) << "\n";

    const bool c6 = median(mg_by_theta[0.3]) >= median(mg_by_theta[1.0]) &&
                    median(auc_by_theta[0.3]) >= median(auc_by_theta[1.0]);
    std::ostringstream d6;
    d6 << "median MG 0.3 " << fmt_real(median(mg_by_theta[0.3]), 4) << " vs 1.0 "
       << fmt_real(median(mg_by_theta[1.0]), 4) << "; median AUC 0.3 "
       << fmt_real(median(auc_by_theta[0.3]), 4) << " vs 1.0 "
       << fmt_real(median(auc_by_theta[1.0]), 4);
    report(6, "multi-task trend", c6, d6.str());

    // 7: robustness ordering on the theta=0.3 model per seed
    int c7_hits = 0;
    for (std::uint64_t seed : seeds) {
        const SeedRun& run = theta03_runs.at(seed);
        const auto gal = embed_samples(run.params, run.split.match_gallery);
        auto perturbed_mg = [&](const Perturbation& p) {
            std::vector<LabeledSample> probes = run.split.match_probes;
            for (LabeledSample& s : probes) s.image = perturb(s.image, p);
            const auto emb = embed_samples(run.params, probes);
            return mg_eval(similarity_matrix(gal, emb).records);
        };
        const double mg_orig = run.mg;
        const double mg_blur = perturbed_mg(Perturbation::blur(2.0));
        const double mg_noise = perturbed_mg(Perturbation::noise(10.0, seed));
        const double mg_rot = perturbed_mg(Perturbation::rotate(10.0));
        const bool ordered = mg_blur < mg_noise && mg_blur < mg_rot &&
                             mg_blur < mg_orig && mg_noise < mg_orig &&
                             mg_rot < mg_orig;
        std::cout << "  seed " << seed << ": MG orig " << fmt_real(mg_orig, 4)
                  << " blur " << fmt_real(mg_blur, 4) << " noise "
                  << fmt_real(mg_noise, 4) << " rotate " << fmt_real(mg_rot, 4)
                  << (ordered ? "" : "  (ordering violated)") << "\n";
        if (ordered) ++c7_hits;
    }
    report(7, "robustness trend",
           c7_hits >= 4, std::to_string(c7_hits) + "/5 seeds ordered");

    // 8: adaptive threshold accuracy on the match pool
    int c8_hits = 0;
    for (std::uint64_t seed : seeds) {
        const SeedRun& run = theta03_runs.at(seed);
        std::vector<double> scores;
        for (const SimilarityRecord& r : run.matrix.records) scores.push_back(r.score);
        const double alpha = kmeans_threshold(scores).alpha();
        const EvalReport er = evaluate(run.matrix.records, alpha);
        std::cout << "  seed " << seed << ": kmeans alpha " << fmt_real(alpha, 4)
                  << " correct rate " << fmt_real(er.correct_rate, 4) << "\n";
        if (er.correct_rate >= 0.90) ++c8_hits;
    }
    report(8, "adaptive threshold", c8_hits >= 4,
           std::to_string(c8_hits) + "/5 seeds at rate >= 0.90");
}

void criterion_9_latency() {
    // Paper-scale input on the desk-default backbone, float32 inference.
    const ModelSpec spec = ModelSpec::desk_default(10, 224);
    const ModelParams params = build_model(spec, 3);
    const Infer32 engine(params);

    SynthSpec synth;
    synth.identity_count = 10;
    synth.images_per_session = 6;
    synth.side = 224;
    synth.identity_seed = 11;
    const auto samples = synth_generate(synth);
    std::vector<LabeledSample> gallery, probes;
    for (const auto& s : samples)
        (s.session == 1 ? gallery : probes).push_back(s);

    // Enrolled side embedded once; each pair embeds its probe afresh.
    std::vector<std::vector<double>> gal_emb;
    for (const auto& s : gallery) gal_emb.push_back(engine.embed(s.image));

    std::vector<double> seconds;
    seconds.reserve(3600);
    for (const auto& g : gal_emb) {
        for (const auto& p : probes) {
            const auto t0 = std::chrono::steady_clock::now();
            const auto emb = engine.embed(p.image);
            const double s = cosine_similarity(emb, g);
            volatile bool dec = decide(s, 0.6);
            (void)dec;
            seconds.push_back(
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                    .count());
        }
    }
    double sum = 0.0, mx = 0.0;
    for (double s : seconds) {
        sum += s;
        mx = std::max(mx, s);
    }
    const double mean = sum / static_cast<double>(seconds.size());
    std::ostringstream detail;
    detail << "mean " << fmt_real(mean, 5) << "s max " << fmt_real(mx, 5) << "s over "
           << seconds.size() << " pairs at 224x224";
    report(9, "verify latency", seconds.size() == 3600 && mean < 0.2, detail.str());
}

void criterion_10_determinism() {
    const char* bin_env = std::getenv("VEINMATCH_BIN");
    if (!bin_env) {
        report(10, "determinism", false, "VEINMATCH_BIN not set");
        return;
    }
    const std::string bin = bin_env;
    const fs::path base =
        fs::temp_directory_path() /
        ("veinmatch_acc_" + std::to_string(Rng(std::random_device{}()).next_u64()));
    fs::create_directories(base);

    auto pipeline = [&](const std::string& tag) {
        const fs::path root = base / tag;
        const std::string data = (root / "data").string();
        const std::string run_dir = (root / "run").string();
        const std::string match_dir = (root / "match").string();
        const fs::path spec_path = base / "spec.json";
        if (!fs::exists(spec_path)) {
            std::ofstream out(spec_path);
            out << R"({"input":{"channels":1,"height":32,"width":32},
                       "blocks":[{"convs":1,"kernel":3,"channels":4,"pool":true,
                                  "channel_attention":true}],
                       "spatial_attention":true,"attention_reduction":4,
                       "head":{"hidden":[16],"dropout":0.2,"classes":3},
                       "embed_tap":"block1.out"})";
        }
        const std::string env = "SOURCE_DATE_EPOCH=1700000000 ";
        auto sh = [&](const std::string& cmd) {
            const std::string full = env + bin + " " + cmd + " >/dev/null 2>&1";
            return std::system(full.c_str()) == 0;
        };
        bool ok = true;
        ok &= sh("synth --out " + data + " --ids 5 --per-session 3 --side 32 --seed 21");
        ok &= sh("train --data " + data + " --out " + run_dir + " --model-spec " +
                 spec_path.string() +
                 " --held-out 2 --val-fraction 0 --epochs 2 --batch-p 2 --batch-k 2 "
                 "--lr 0.001 --theta 0.3 --seed 5");
        ok &= sh("match --data " + data + " --model " + run_dir + " --out " + match_dir +
                 " --held-out 2 --svg");
        ok &= sh("evaluate --records " + match_dir + "/records.csv --out " +
                 (root / "eval").string() + " --alpha-mode kmeans --svg");
        const std::string gal = (root / "g.gallery.jsonl").string();
        ok &= sh("enroll --gallery " + gal + " --id id03 --model " + run_dir + " " + data +
                 "/id03/1/img00.pgm");
        return ok;
    };

    bool ran = pipeline("a") && pipeline("b");
    bool identical = ran;
    std::size_t compared = 0;
    if (ran) {
        for (const auto& e : fs::recursive_directory_iterator(base / "a")) {
            if (!e.is_regular_file()) continue;
            const fs::path rel = fs::relative(e.path(), base / "a");
            const fs::path other = base / "b" / rel;
            std::ifstream fa(e.path(), std::ios::binary), fb(other, std::ios::binary);
            if (!fb) {
                identical = false;
                break;
            }
            std::stringstream sa, sb;
            sa << fa.rdbuf();
            sb << fb.rdbuf();
            if (sa.str() != sb.str()) {
                std::cout << "  mismatch: " << rel.string() << "\n";
                identical = false;
            }
            ++compared;
        }
    }
    fs::remove_all(base);
    report(10, "byte-identical pipeline reruns", ran && identical,
           ran ? ("compared " + std::to_string(compared) + " artifacts")
               : "pipeline invocation failed");
}

} // namespace

int main() {
    std::cout << "veinmatch acceptance suite\n";
    criterion_1_gradients();
    criterion_2_loss_decomposition();
    criterion_3_oracle_equivalence();
    criterion_4_worked_values();
    criterion_5_end_to_end();
    criteria_6_7_8_trends();
    criterion_9_latency();
    criterion_10_determinism();
    std::cout << (g_failures == 0 ? "ALL CRITERIA PASSED"
                                  : std::to_string(g_failures) + " CRITERIA FAILED")
              << "\n";
    return g_failures == 0 ? 0 : 1;
}
