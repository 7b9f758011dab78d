// veinmatch: palm-vein verification pipeline driver.
//
// Verbs: synth, preprocess, train, enroll, verify, match, threshold,
// evaluate, perturb, gradcheck. Exit codes: 0 success, 1 domain error,
// 2 usage error.

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "veinmatch/dataset.hpp"
#include "veinmatch/enhance.hpp"
#include "veinmatch/errors.hpp"
#include "veinmatch/gallery.hpp"
#include "veinmatch/gradcheck_suite.hpp"
#include "veinmatch/infer32.hpp"
#include "veinmatch/matching.hpp"
#include "veinmatch/perturb.hpp"
#include "veinmatch/pipeline.hpp"
#include "veinmatch/report.hpp"
#include "veinmatch/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace veinmatch;

namespace {

// Every verb echoes its resolved options before doing work.
void echo_config(const std::string& verb, const json& cfg) {
    std::cout << "config " << verb << " " << cfg.dump() << "\n";
}

int thread_cap() {
    // The pipeline is single-threaded; the cap is honored trivially but the
    // variable is validated so typos surface.
    if (const char* env = std::getenv("VEINMATCH_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v < 1) throw ParamError("VEINMATCH_THREADS must be a positive integer");
        return static_cast<int>(v);
    }
    return 1;
}

EnhanceMethod parse_enhance(const std::string& name, double clip, std::size_t tiles,
                            double log_c) {
    if (name == "hist") return EnhanceMethod::hist_eq();
    if (name == "clahe") return EnhanceMethod::clahe(clip, tiles, tiles);
    if (name == "laplacian") return EnhanceMethod::laplacian();
    if (name == "log") return EnhanceMethod::log_transform(log_c);
    throw ParamError("unknown enhancement '" + name + "'");
}

struct MatchOutput {
    SimilarityMatrix matrix;
    std::size_t gallery_size = 0;
    std::size_t probe_size = 0;
};

MatchOutput run_match(const ModelParams& model, const std::vector<LabeledSample>& gallery,
                      const std::vector<LabeledSample>& probes, bool use_f32) {
    MatchOutput out;
    out.gallery_size = gallery.size();
    out.probe_size = probes.size();
    const auto gal_emb = embed_samples(model, gallery, use_f32);
    const auto probe_emb = embed_samples(model, probes, use_f32);
    out.matrix = similarity_matrix(gal_emb, probe_emb);
    return out;
}

double resolve_alpha(const std::vector<SimilarityRecord>& records,
                     const std::string& mode, double fixed_alpha) {
    if (mode == "fixed") return fixed_alpha;
    if (mode == "kmeans") {
        std::vector<double> scores;
        scores.reserve(records.size());
        for (const SimilarityRecord& r : records) scores.push_back(r.score);
        return kmeans_threshold(scores).alpha();
    }
    throw ParamError("unknown alpha mode '" + mode + "'");
}

// ---------------------------------------------------------------------------

int cmd_synth(const std::string& out_dir, std::size_t ids, std::size_t per_session,
              std::size_t side, std::size_t curves, double noise, std::uint64_t seed) {
    SynthSpec spec;
    spec.identity_count = ids;
    spec.images_per_session = per_session;
    spec.side = side;
    spec.curve_count = curves;
    spec.session_noise = noise;
    spec.identity_seed = seed;
    echo_config("synth", {{"out", out_dir},
                          {"ids", ids},
                          {"per_session", per_session},
                          {"side", side},
                          {"curves", curves},
                          {"noise", noise},
                          {"seed", seed}});
    const auto samples = synth_generate(spec);
    save_dataset(samples, out_dir);
    std::cout << "wrote " << samples.size() << " images for " << ids
              << " identities under " << out_dir << "\n";
    return 0;
}

int cmd_preprocess(const std::string& in_dir, const std::string& out_dir,
                   const std::string& enhance_name, double clip, std::size_t tiles,
                   double log_c, std::size_t crop_side) {
    echo_config("preprocess", {{"in", in_dir},
                               {"out", out_dir},
                               {"enhance", enhance_name},
                               {"clahe_clip", clip},
                               {"clahe_tiles", tiles},
                               {"log_c", log_c},
                               {"crop_side", crop_side}});
    auto samples = load_dataset(in_dir);
    for (LabeledSample& s : samples) {
        if (crop_side > 0)
            s.image = crop_roi(s.image, s.image.width / 2, s.image.height / 2, crop_side);
        if (enhance_name != "none")
            s.image = enhance(s.image, parse_enhance(enhance_name, clip, tiles, log_c));
    }
    save_dataset(samples, out_dir);
    std::cout << "processed " << samples.size() << " images into " << out_dir << "\n";
    return 0;
}

int cmd_train(const std::string& data_dir, const std::string& out_dir,
              const TrainConfig& cfg, std::size_t held_out, double val_fraction,
              const std::string& model_spec_path) {
    echo_config("train", {{"data", data_dir},
                          {"out", out_dir},
                          {"held_out", held_out},
                          {"val_fraction", val_fraction},
                          {"model_spec", model_spec_path},
                          {"config", json::parse(cfg.to_json())}});
    const auto samples = load_dataset(data_dir);
    if (samples.empty()) throw DataError("train: dataset is empty");
    const DatasetSplit sp = split(samples, held_out, val_fraction);

    ModelSpec spec;
    if (!model_spec_path.empty()) {
        std::ifstream in(model_spec_path);
        if (!in) throw IngestError("cannot open model spec " + model_spec_path);
        std::stringstream ss;
        ss << in.rdbuf();
        spec = ModelSpec::from_json(ss.str());
    } else {
        spec = ModelSpec::desk_default(sorted_identities(sp.train).size(),
                                       samples.front().image.width);
    }

    auto [params, report] = train(sp.train, sp.validation, spec, cfg);

    fs::create_directories(out_dir);
    save_model(params, out_dir);
    {
        std::ofstream cfg_out(fs::path(out_dir) / "train_config.json", std::ios::trunc);
        cfg_out << cfg.to_json();
    }
    write_train_report_csv(report, fs::path(out_dir) / "train_report.csv");
    write_line_chart_svg({{"loss", "#aa4444", report.loss}}, "training loss",
                         fs::path(out_dir) / "loss.svg");
    write_line_chart_svg({{"train", "#4477aa", report.train_accuracy},
                          {"validation", "#aa7744", report.val_accuracy}},
                         "classification accuracy", fs::path(out_dir) / "accuracy.svg");

    std::cout << "trained " << report.stop_epoch << " epochs in "
              << fmt_real(report.wall_seconds, 4) << "s\n";
    if (!report.val_accuracy.empty() && !sp.validation.empty()) {
        double best = 0.0;
        for (double v : report.val_accuracy) best = std::max(best, v);
        std::cout << "best validation accuracy " << fmt_real(best, 6) << " (epoch "
                  << report.best_epoch << ")\n";
        std::cout << "nearest-centroid oracle  "
                  << fmt_real(nearest_centroid_oracle(sp), 6) << "\n";
    }
    std::cout << "model written to " << out_dir << "\n";
    return 0;
}

int cmd_enroll(const std::string& gallery_path, const std::string& subject,
               const std::string& model_dir, const std::vector<std::string>& image_paths) {
    echo_config("enroll", {{"gallery", gallery_path},
                           {"id", subject},
                           {"model", model_dir},
                           {"images", image_paths}});
    const ModelParams model = load_model(model_dir);
    std::vector<GrayImage> images;
    for (const std::string& p : image_paths) images.push_back(read_pgm(p));
    const GalleryEntry e = enroll(gallery_path, subject, images, model);
    std::cout << "enrolled " << subject << " dim " << e.embedding.size() << " norm "
              << fmt_real(e.norm, 6) << "\n";
    return 0;
}

int cmd_verify(const std::string& gallery_path, const std::string& subject,
               const std::string& probe_path, const std::string& model_dir, double alpha,
               bool use_f32, bool timed) {
    echo_config("verify", {{"gallery", gallery_path},
                           {"id", subject},
                           {"probe", probe_path},
                           {"model", model_dir},
                           {"alpha", alpha},
                           {"f32", use_f32},
                           {"time", timed}});
    const ModelParams model = load_model(model_dir);
    const GrayImage probe = read_pgm(probe_path);
    const VerifyResult r = verify(gallery_path, subject, probe, model, alpha, use_f32);
    std::cout << (r.accepted ? "accept" : "reject") << " score " << fmt_real(r.score, 9)
              << " alpha " << fmt_real(alpha, 6) << "\n";
    if (timed) std::cout << "pair seconds " << fmt_real(r.seconds, 6) << "\n";
    return 0;
}

int cmd_match(const std::string& data_dir, const std::string& model_dir,
              const std::string& out_dir, std::size_t held_out, double alpha,
              bool use_f32, bool timed, bool svg) {
    echo_config("match", {{"data", data_dir},
                          {"model", model_dir},
                          {"out", out_dir},
                          {"held_out", held_out},
                          {"alpha", alpha},
                          {"f32", use_f32},
                          {"time", timed},
                          {"svg", svg}});
    if (held_out == 0) throw ParamError("match: --held-out must be >= 1");
    const ModelParams model = load_model(model_dir);
    const auto samples = load_dataset(data_dir);
    const DatasetSplit sp = split(samples, held_out, 0.0);
    if (sp.match_gallery.empty() || sp.match_probes.empty())
        throw DataError("match: empty gallery or probe side after split");

    fs::create_directories(out_dir);
    MatchOutput mo = run_match(model, sp.match_gallery, sp.match_probes, use_f32);
    write_records_csv(mo.matrix.records, fs::path(out_dir) / "records.csv");
    for (const DegeneratePair& d : mo.matrix.degenerate)
        std::cerr << "warning: degenerate embedding pair " << d.id_a << " vs " << d.id_b
                  << "\n";
    std::cout << "scored " << mo.matrix.records.size() << " pairs (" << mo.gallery_size
              << " gallery x " << mo.probe_size << " probes)\n";

    if (svg)
        write_prediction_scatter_svg(mo.matrix.records, alpha, mo.gallery_size,
                                     mo.probe_size, fs::path(out_dir) / "scatter.svg");

    if (timed) {
        // Per-pair protocol: re-embed the probe for every pair, one cosine,
        // one decision, mirroring a deployed verify call.
        const auto gal_emb = embed_samples(model, sp.match_gallery, use_f32);
        std::vector<double> seconds;
        seconds.reserve(gal_emb.size() * sp.match_probes.size());
        std::optional<Infer32> engine;
        if (use_f32) engine.emplace(model);
        for (const Embedding& g : gal_emb) {
            for (const LabeledSample& probe : sp.match_probes) {
                const auto t0 = std::chrono::steady_clock::now();
                const std::vector<double> emb =
                    use_f32 ? engine->embed(probe.image)
                            : extract_embedding(model, to_tensor(probe.image));
                const double score = cosine_similarity(emb, g.values);
                volatile bool dec = decide(score, alpha);
                (void)dec;
                seconds.push_back(std::chrono::duration<double>(
                                      std::chrono::steady_clock::now() - t0)
                                      .count());
            }
        }
        double sum = 0.0, mx = 0.0;
        for (double s : seconds) {
            sum += s;
            mx = std::max(mx, s);
        }
        const double mean = sum / static_cast<double>(seconds.size());
        std::ofstream lat(fs::path(out_dir) / "latency.csv", std::ios::trunc);
        lat << "pair,seconds\n";
        for (std::size_t i = 0; i < seconds.size(); ++i)
            lat << (i + 1) << "," << fmt_real(seconds[i], 6) << "\n";
        write_latency_svg(seconds, fs::path(out_dir) / "latency.svg");
        std::cout << "per-pair seconds mean " << fmt_real(mean, 6) << " max "
                  << fmt_real(mx, 6) << " over " << seconds.size() << " pairs\n";
    }
    return 0;
}

int cmd_threshold(const std::string& records_path, const std::string& out_dir,
                  const std::string& mode, std::vector<double> candidates) {
    echo_config("threshold", {{"records", records_path},
                              {"out", out_dir},
                              {"mode", mode},
                              {"candidates", candidates}});
    const auto records = read_records_csv(records_path);
    fs::create_directories(out_dir);
    if (mode == "kmeans") {
        std::vector<double> scores;
        scores.reserve(records.size());
        for (const SimilarityRecord& r : records) scores.push_back(r.score);
        const ThresholdModel tm = kmeans_threshold(scores);
        json j;
        j["center_p"] = tm.center_p;
        j["center_n"] = tm.center_n;
        j["alpha"] = tm.alpha();
        std::ofstream out(fs::path(out_dir) / "threshold.json", std::ios::trunc);
        out << j.dump(2) << "\n";
        std::cout << "kmeans centers p " << fmt_real(tm.center_p, 6) << " n "
                  << fmt_real(tm.center_n, 6) << " alpha " << fmt_real(tm.alpha(), 6)
                  << "\n";
        return 0;
    }
    if (mode == "sweep") {
        if (candidates.empty()) candidates = default_threshold_candidates();
        const SweepResult sweep = sweep_thresholds(records, candidates);
        std::ofstream csv(fs::path(out_dir) / "sweep.csv", std::ios::trunc);
        csv << "alpha,correctly_accepted,wrong_accepted,wrong_rejected,"
               "correctly_rejected,correct_rate,auc,mg\n";
        std::vector<std::string> labels;
        std::vector<double> aucs;
        for (std::size_t i = 0; i < sweep.reports.size(); ++i) {
            const EvalReport& r = sweep.reports[i];
            csv << fmt_real(candidates[i], 6) << "," << r.correctly_accepted << ","
                << r.wrong_accepted << "," << r.wrong_rejected << ","
                << r.correctly_rejected << "," << fmt_real(r.correct_rate) << ","
                << fmt_real(r.auc) << "," << fmt_real(r.mg) << "\n";
            labels.push_back(fmt_real(candidates[i], 4));
            aucs.push_back(r.auc);
        }
        write_bar_chart_svg(labels, aucs, "AUC by threshold",
                            fs::path(out_dir) / "auc_by_threshold.svg");
        std::cout << "best candidate alpha "
                  << fmt_real(candidates[sweep.best_index], 6) << " (rate "
                  << fmt_real(sweep.reports[sweep.best_index].correct_rate, 6) << ")\n";
        return 0;
    }
    throw ParamError("threshold: unknown mode '" + mode + "'");
}

int cmd_evaluate(const std::string& records_path, const std::string& out_dir,
                 const std::string& alpha_mode, double alpha, bool svg) {
    echo_config("evaluate", {{"records", records_path},
                             {"out", out_dir},
                             {"alpha_mode", alpha_mode},
                             {"alpha", alpha},
                             {"svg", svg}});
    const auto records = read_records_csv(records_path);
    const double resolved = resolve_alpha(records, alpha_mode, alpha);
    const EvalReport report = evaluate(records, resolved);
    fs::create_directories(out_dir);
    write_eval_report(report, fs::path(out_dir) / "eval.json");
    write_confusion_svg(report, fs::path(out_dir) / "confusion.svg");
    if (svg) {
        std::set<std::string> ga, pb;
        for (const SimilarityRecord& r : records) {
            ga.insert(r.id_a);
            pb.insert(r.id_b);
        }
        write_prediction_scatter_svg(records, resolved, ga.size(), pb.size(),
                                     fs::path(out_dir) / "scatter.svg");
    }
    std::cout << eval_report_text(report);
    return 0;
}

int cmd_perturb(const std::string& data_dir, const std::string& model_dir,
                const std::string& out_dir, std::size_t held_out,
                const std::string& alpha_mode, double alpha, double blur_sigma,
                double noise_sigma, double angle, std::uint64_t noise_seed) {
    echo_config("perturb", {{"data", data_dir},
                            {"model", model_dir},
                            {"out", out_dir},
                            {"held_out", held_out},
                            {"alpha_mode", alpha_mode},
                            {"alpha", alpha},
                            {"blur_sigma", blur_sigma},
                            {"noise_sigma", noise_sigma},
                            {"angle", angle},
                            {"noise_seed", noise_seed}});
    if (held_out == 0) throw ParamError("perturb: --held-out must be >= 1");
    const ModelParams model = load_model(model_dir);
    const auto samples = load_dataset(data_dir);
    const DatasetSplit sp = split(samples, held_out, 0.0);
    fs::create_directories(out_dir);

    const MatchOutput original = run_match(model, sp.match_gallery, sp.match_probes, false);
    const double resolved = resolve_alpha(original.matrix.records, alpha_mode, alpha);

    struct Treatment {
        std::string name;
        std::vector<LabeledSample> probes;
    };
    std::vector<Treatment> treatments;
    treatments.push_back({"original", sp.match_probes});
    auto applied = [&](const Perturbation& p) {
        std::vector<LabeledSample> out = sp.match_probes;
        for (LabeledSample& s : out) s.image = perturb(s.image, p);
        return out;
    };
    treatments.push_back({"blur", applied(Perturbation::blur(blur_sigma))});
    treatments.push_back({"noise", applied(Perturbation::noise(noise_sigma, noise_seed))});
    treatments.push_back({"rotate", applied(Perturbation::rotate(angle))});

    std::ofstream csv(fs::path(out_dir) / "robustness.csv", std::ios::trunc);
    csv << "treatment,correct_rate,auc,mg\n";
    for (const Treatment& t : treatments) {
        const MatchOutput mo = t.name == "original"
                                   ? original
                                   : run_match(model, sp.match_gallery, t.probes, false);
        const EvalReport r = evaluate(mo.matrix.records, resolved);
        csv << t.name << "," << fmt_real(r.correct_rate) << "," << fmt_real(r.auc) << ","
            << fmt_real(r.mg) << "\n";
        std::cout << t.name << ": rate " << fmt_real(r.correct_rate, 6) << " auc "
                  << fmt_real(r.auc, 6) << " mg " << fmt_real(r.mg, 6) << "\n";
        write_eval_report(r, fs::path(out_dir) / ("eval_" + t.name + ".json"));
    }
    return 0;
}

int cmd_gradcheck(std::size_t trials, std::uint64_t seed, double eps) {
    echo_config("gradcheck", {{"trials", trials}, {"seed", seed}, {"eps", eps}});
    const auto results = run_gradcheck_suite(trials, seed, eps);
    for (const GradCheckResult& r : results)
        std::cout << r.name << " max relative error " << fmt_real(r.max_error, 6) << "\n";
    const double worst = gradcheck_suite_max(results);
    std::cout << "overall max relative error " << fmt_real(worst, 6) << "\n";
    return worst < 1e-4 ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"palm-vein verification pipeline"};
    app.require_subcommand(1);

    try {
        thread_cap();
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    std::string synth_out;
    std::size_t synth_ids = 10, synth_per = 6, synth_side = 64, synth_curves = 4;
    double synth_noise = 8.0;
    std::uint64_t synth_seed = 42;
    synth->add_option("--out", synth_out, "output dataset directory")->required();
    synth->add_option("--ids", synth_ids, "identity count");
    synth->add_option("--per-session", synth_per, "images per session");
    synth->add_option("--side", synth_side, "image side in pixels");
    synth->add_option("--curves", synth_curves, "strokes per identity");
    synth->add_option("--noise", synth_noise, "per-pixel noise sigma");
    synth->add_option("--seed", synth_seed, "generator seed");

    // preprocess
    auto* prep = app.add_subcommand("preprocess", "crop and enhance a dataset");
    std::string prep_in, prep_out, prep_enhance = "hist";
    double prep_clip = 2.0, prep_logc = 0.0;
    std::size_t prep_tiles = 8, prep_crop = 0;
    prep->add_option("--in", prep_in, "input dataset directory")->required();
    prep->add_option("--out", prep_out, "output dataset directory")->required();
    prep->add_option("--enhance", prep_enhance, "none|hist|clahe|laplacian|log")
        ->check(CLI::IsMember({"none", "hist", "clahe", "laplacian", "log"}));
    prep->add_option("--clahe-clip", prep_clip, "CLAHE clip limit (>1)");
    prep->add_option("--clahe-tiles", prep_tiles, "CLAHE tile grid side");
    prep->add_option("--log-c", prep_logc, "log transform scale (0 = full range)");
    prep->add_option("--crop-side", prep_crop, "center-crop side (0 = no crop)");

    // train
    auto* tr = app.add_subcommand("train", "train the feature extractor");
    std::string tr_data, tr_out, tr_config, tr_spec;
    std::size_t tr_held = 0;
    double tr_valfrac = 0.15;
    double tr_theta = -1.0, tr_lambda = -1.0, tr_lr = -1.0;
    long tr_epochs = -1, tr_patience = -1, tr_bp = -1, tr_bk = -1, tr_seed = -1;
    std::vector<std::string> tr_freeze;
    bool tr_l2all = false;
    tr->add_option("--data", tr_data, "dataset directory")->required();
    tr->add_option("--out", tr_out, "output directory")->required();
    tr->add_option("--config", tr_config, "TrainConfig JSON file");
    tr->add_option("--model-spec", tr_spec, "ModelSpec JSON file");
    tr->add_option("--held-out", tr_held, "identities held out for matching");
    tr->add_option("--val-fraction", tr_valfrac, "validation share of session 1");
    tr->add_option("--theta", tr_theta, "loss mix (1 = pure classification)");
    tr->add_option("--lambda", tr_lambda, "L2 strength");
    tr->add_option("--lr", tr_lr, "learning rate");
    tr->add_option("--epochs", tr_epochs, "epoch budget");
    tr->add_option("--patience", tr_patience, "early-stop patience");
    tr->add_option("--batch-p", tr_bp, "identities per batch");
    tr->add_option("--batch-k", tr_bk, "samples per identity per batch");
    tr->add_option("--seed", tr_seed, "training seed");
    tr->add_option("--freeze", tr_freeze, "parameter groups to freeze (name or prefix*)");
    tr->add_flag("--l2-all-weights", tr_l2all, "L2 over all trainable weights");

    // enroll
    auto* en = app.add_subcommand("enroll", "enroll a subject into a gallery");
    std::string en_gallery, en_id, en_model;
    std::vector<std::string> en_images;
    en->add_option("--gallery", en_gallery, "gallery file (*.gallery.jsonl)")->required();
    en->add_option("--id", en_id, "subject id")->required();
    en->add_option("--model", en_model, "model directory")->required();
    en->add_option("images", en_images, "PGM images")->required();

    // verify
    auto* ve = app.add_subcommand("verify", "verify a probe against an enrollment");
    std::string ve_gallery, ve_id, ve_probe, ve_model;
    double ve_alpha = 0.6;
    bool ve_f32 = false, ve_time = false;
    ve->add_option("--gallery", ve_gallery, "gallery file")->required();
    ve->add_option("--id", ve_id, "subject id")->required();
    ve->add_option("--probe", ve_probe, "probe PGM")->required();
    ve->add_option("--model", ve_model, "model directory")->required();
    ve->add_option("--alpha", ve_alpha, "acceptance threshold");
    ve->add_flag("--f32", ve_f32, "use float32 inference");
    ve->add_flag("--time", ve_time, "report pair latency");

    // match
    auto* ma = app.add_subcommand("match", "score gallery x probe pairs");
    std::string ma_data, ma_model, ma_out;
    std::size_t ma_held = 0;
    double ma_alpha = 0.6;
    bool ma_f32 = false, ma_time = false, ma_svg = false;
    ma->add_option("--data", ma_data, "dataset directory")->required();
    ma->add_option("--model", ma_model, "model directory")->required();
    ma->add_option("--out", ma_out, "output directory")->required();
    ma->add_option("--held-out", ma_held, "identities held out for matching")->required();
    ma->add_option("--alpha", ma_alpha, "threshold for scatter/decisions");
    ma->add_flag("--f32", ma_f32, "use float32 inference");
    ma->add_flag("--time", ma_time, "per-pair verify timing (re-embeds probes)");
    ma->add_flag("--svg", ma_svg, "emit prediction scatter");

    // threshold
    auto* th = app.add_subcommand("threshold", "calibrate the acceptance threshold");
    std::string th_records, th_out, th_mode = "kmeans";
    std::vector<double> th_candidates;
    th->add_option("--records", th_records, "records CSV from match")->required();
    th->add_option("--out", th_out, "output directory")->required();
    th->add_option("--mode", th_mode, "kmeans|sweep")
        ->check(CLI::IsMember({"kmeans", "sweep"}));
    th->add_option("--candidates", th_candidates, "sweep thresholds");

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "confusion counts and metrics");
    std::string ev_records, ev_out, ev_mode = "fixed";
    double ev_alpha = 0.6;
    bool ev_svg = false;
    ev->add_option("--records", ev_records, "records CSV")->required();
    ev->add_option("--out", ev_out, "output directory")->required();
    ev->add_option("--alpha-mode", ev_mode, "fixed|kmeans")
        ->check(CLI::IsMember({"fixed", "kmeans"}));
    ev->add_option("--alpha", ev_alpha, "threshold when --alpha-mode fixed");
    ev->add_flag("--svg", ev_svg, "emit prediction scatter");

    // perturb
    auto* pe = app.add_subcommand("perturb", "robustness study on the probe side");
    std::string pe_data, pe_model, pe_out, pe_mode = "kmeans";
    std::size_t pe_held = 0;
    double pe_alpha = 0.6, pe_blur = 2.0, pe_noise = 10.0, pe_angle = 10.0;
    std::uint64_t pe_seed = 1;
    pe->add_option("--data", pe_data, "dataset directory")->required();
    pe->add_option("--model", pe_model, "model directory")->required();
    pe->add_option("--out", pe_out, "output directory")->required();
    pe->add_option("--held-out", pe_held, "identities held out for matching")->required();
    pe->add_option("--alpha-mode", pe_mode, "fixed|kmeans (calibrated on originals)")
        ->check(CLI::IsMember({"fixed", "kmeans"}));
    pe->add_option("--alpha", pe_alpha, "threshold when fixed");
    pe->add_option("--sigma", pe_blur, "blur sigma");
    pe->add_option("--noise-sigma", pe_noise, "noise sigma");
    pe->add_option("--angle", pe_angle, "rotation degrees");
    pe->add_option("--noise-seed", pe_seed, "noise seed");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    std::size_t gc_trials = 100;
    std::uint64_t gc_seed = 7;
    double gc_eps = 1e-4;
    gc->add_option("--trials", gc_trials, "random trials per primitive");
    gc->add_option("--seed", gc_seed, "suite seed");
    gc->add_option("--eps", gc_eps, "central-difference step");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (synth->parsed())
            return cmd_synth(synth_out, synth_ids, synth_per, synth_side, synth_curves,
                             synth_noise, synth_seed);
        if (prep->parsed())
            return cmd_preprocess(prep_in, prep_out, prep_enhance, prep_clip, prep_tiles,
                                  prep_logc, prep_crop);
        if (tr->parsed()) {
            TrainConfig cfg;
            if (!tr_config.empty()) {
                std::ifstream in(tr_config);
                if (!in) throw IngestError("cannot open config " + tr_config);
                std::stringstream ss;
                ss << in.rdbuf();
                cfg = TrainConfig::from_json(ss.str());
            }
            if (tr_theta >= 0.0) cfg.theta = tr_theta;
            if (tr_lambda >= 0.0) cfg.lambda = tr_lambda;
            if (tr_lr > 0.0) cfg.lr = tr_lr;
            if (tr_epochs >= 0) cfg.epochs = static_cast<std::size_t>(tr_epochs);
            if (tr_patience >= 0) cfg.patience = static_cast<std::size_t>(tr_patience);
            if (tr_bp >= 0) cfg.batch_p = static_cast<std::size_t>(tr_bp);
            if (tr_bk >= 0) cfg.batch_k = static_cast<std::size_t>(tr_bk);
            if (tr_seed >= 0) cfg.seed = static_cast<std::uint64_t>(tr_seed);
            if (!tr_freeze.empty()) cfg.freeze = tr_freeze;
            if (tr_l2all) cfg.l2_all_weights = true;
            cfg.validate();
            return cmd_train(tr_data, tr_out, cfg, tr_held, tr_valfrac, tr_spec);
        }
        if (en->parsed()) return cmd_enroll(en_gallery, en_id, en_model, en_images);
        if (ve->parsed())
            return cmd_verify(ve_gallery, ve_id, ve_probe, ve_model, ve_alpha, ve_f32,
                              ve_time);
        if (ma->parsed())
            return cmd_match(ma_data, ma_model, ma_out, ma_held, ma_alpha, ma_f32,
                             ma_time, ma_svg);
        if (th->parsed()) return cmd_threshold(th_records, th_out, th_mode, th_candidates);
        if (ev->parsed()) return cmd_evaluate(ev_records, ev_out, ev_mode, ev_alpha, ev_svg);
        if (pe->parsed())
            return cmd_perturb(pe_data, pe_model, pe_out, pe_held, pe_mode, pe_alpha,
                               pe_blur, pe_noise, pe_angle, pe_seed);
        if (gc->parsed()) return cmd_gradcheck(gc_trials, gc_seed, gc_eps);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
