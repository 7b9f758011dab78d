#include "veinmatch/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace veinmatch {

namespace fs = std::filesystem;
using nlohmann::json;

std::string fmt_real(double v, int precision) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    return buf;
}

namespace {

std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IngestError("cannot open output file " + path.string());
    return out;
}

} // namespace

void write_train_report_csv(const TrainReport& report, const fs::path& path) {
    auto out = open_out(path);
    out << "epoch,loss,train_acc,val_acc,batch_mg_mean\n";
    for (std::size_t i = 0; i < report.loss.size(); ++i)
        out << (i + 1) << "," << fmt_real(report.loss[i]) << ","
            << fmt_real(report.train_accuracy[i]) << ","
            << fmt_real(report.val_accuracy[i]) << ","
            << fmt_real(report.batch_mg_mean[i]) << "\n";
}

void write_records_csv(const std::vector<SimilarityRecord>& records, const fs::path& path) {
    auto out = open_out(path);
    out << "id_a,id_b,score,same_identity\n";
    for (const SimilarityRecord& r : records) {
        out << r.id_a << "," << r.id_b << "," << fmt_real(r.score, 12) << ",";
        if (r.same_identity.has_value()) out << (*r.same_identity ? 1 : 0);
        out << "\n";
    }
}

std::vector<SimilarityRecord> read_records_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestError("cannot open records CSV " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "id_a,id_b,score,same_identity")
        throw IngestError("records CSV missing header: " + path.string());
    std::vector<SimilarityRecord> records;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        SimilarityRecord r;
        std::string score, same;
        if (!std::getline(ss, r.id_a, ',') || !std::getline(ss, r.id_b, ',') ||
            !std::getline(ss, score, ','))
            throw IngestError("records CSV: malformed line " + std::to_string(lineno) +
                              " in " + path.string());
        std::getline(ss, same, ',');
        try {
            r.score = std::stod(score);
        } catch (const std::exception&) {
            throw IngestError("records CSV: bad score on line " + std::to_string(lineno));
        }
        if (same == "0" || same == "1") r.same_identity = same == "1";
        records.push_back(std::move(r));
    }
    return records;
}

std::string eval_report_json(const EvalReport& r) {
    json j;
    j["correctly_accepted"] = r.correctly_accepted;
    j["wrong_accepted"] = r.wrong_accepted;
    j["wrong_rejected"] = r.wrong_rejected;
    j["correctly_rejected"] = r.correctly_rejected;
    j["correct_rate"] = r.correct_rate;
    j["auc"] = r.auc;
    j["mg"] = r.mg;
    j["threshold"] = r.threshold;
    if (r.mean_pair_seconds.has_value()) j["mean_pair_seconds"] = *r.mean_pair_seconds;
    if (r.max_pair_seconds.has_value()) j["max_pair_seconds"] = *r.max_pair_seconds;
    return j.dump(2) + "\n";
}

void write_eval_report(const EvalReport& report, const fs::path& path) {
    auto out = open_out(path);
    out << eval_report_json(report);
}

std::string eval_report_text(const EvalReport& r) {
    std::ostringstream os;
    os << "threshold alpha      " << fmt_real(r.threshold, 6) << "\n"
       << "correctly accepted   " << r.correctly_accepted << "\n"
       << "wrong accepted       " << r.wrong_accepted << "\n"
       << "wrong rejected       " << r.wrong_rejected << "\n"
       << "correctly rejected   " << r.correctly_rejected << "\n"
       << "correct rate         " << fmt_real(r.correct_rate * 100.0, 4) << "%\n"
       << "auc                  " << fmt_real(r.auc, 6) << "\n"
       << "mg                   " << fmt_real(r.mg, 6) << "\n";
    if (r.mean_pair_seconds.has_value())
        os << "mean pair seconds    " << fmt_real(*r.mean_pair_seconds, 6) << "\n";
    if (r.max_pair_seconds.has_value())
        os << "max pair seconds     " << fmt_real(*r.max_pair_seconds, 6) << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// SVG
// ---------------------------------------------------------------------------

namespace {

constexpr double kW = 640.0, kH = 400.0;
constexpr double kMargin = 50.0;

std::string coord(double v) { return fmt_real(v, 6); }

struct SvgFile {
    std::ofstream out;
    explicit SvgFile(const fs::path& path) : out(open_out(path)) {
        out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW
            << "\" height=\"" << kH << "\" viewBox=\"0 0 " << kW << " " << kH
            << "\">\n";
        out << "<rect width=\"" << kW << "\" height=\"" << kH
            << "\" fill=\"white\"/>\n";
    }
    ~SvgFile() { out << "</svg>\n"; }
    void title(const std::string& t) {
        out << "<text x=\"" << kW / 2
            << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\" "
               "font-family=\"sans-serif\">"
            << t << "</text>\n";
    }
};

void axis_frame(std::ofstream& out) {
    out << "<rect x=\"" << kMargin << "\" y=\"" << kMargin << "\" width=\""
        << kW - 2 * kMargin << "\" height=\"" << kH - 2 * kMargin
        << "\" fill=\"none\" stroke=\"#444\"/>\n";
}

} // namespace

void write_line_chart_svg(const std::vector<Series>& series, const std::string& title,
                          const fs::path& path) {
    SvgFile svg(path);
    svg.title(title);
    axis_frame(svg.out);

    double lo = 0.0, hi = 1.0;
    std::size_t n = 1;
    bool any = false;
    for (const Series& s : series)
        for (double v : s.values) {
            if (std::isnan(v)) continue;
            if (!any) {
                lo = hi = v;
                any = true;
            } else {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
        }
    for (const Series& s : series) n = std::max(n, s.values.size());
    if (hi == lo) hi = lo + 1.0;

    auto px = [n](std::size_t i) {
        return kMargin + (kW - 2 * kMargin) * (n == 1 ? 0.5
                                                      : static_cast<double>(i) /
                                                            static_cast<double>(n - 1));
    };
    auto py = [lo, hi](double v) {
        return kH - kMargin - (kH - 2 * kMargin) * (v - lo) / (hi - lo);
    };

    svg.out << "<text x=\"" << kMargin - 6 << "\" y=\"" << coord(py(lo) + 4)
            << "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">"
            << fmt_real(lo, 4) << "</text>\n";
    svg.out << "<text x=\"" << kMargin - 6 << "\" y=\"" << coord(py(hi) + 4)
            << "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">"
            << fmt_real(hi, 4) << "</text>\n";

    double legend_y = kMargin + 14.0;
    for (const Series& s : series) {
        svg.out << "<polyline fill=\"none\" stroke=\"" << s.color
                << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < s.values.size(); ++i) {
            if (std::isnan(s.values[i])) continue;
            svg.out << coord(px(i)) << "," << coord(py(s.values[i])) << " ";
        }
        svg.out << "\"/>\n";
        svg.out << "<text x=\"" << kW - kMargin - 4 << "\" y=\"" << coord(legend_y)
                << "\" text-anchor=\"end\" font-size=\"12\" fill=\"" << s.color
                << "\" font-family=\"sans-serif\">" << s.label << "</text>\n";
        legend_y += 16.0;
    }
}

void write_bar_chart_svg(const std::vector<std::string>& labels,
                         const std::vector<double>& values, const std::string& title,
                         const fs::path& path) {
    SvgFile svg(path);
    svg.title(title);
    axis_frame(svg.out);
    if (values.empty()) return;
    double hi = values[0];
    for (double v : values) hi = std::max(hi, v);
    if (hi <= 0.0) hi = 1.0;
    const double band = (kW - 2 * kMargin) / static_cast<double>(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double h = (kH - 2 * kMargin) * values[i] / hi;
        const double x = kMargin + band * static_cast<double>(i) + band * 0.15;
        svg.out << "<rect x=\"" << coord(x) << "\" y=\"" << coord(kH - kMargin - h)
                << "\" width=\"" << coord(band * 0.7) << "\" height=\"" << coord(h)
                << "\" fill=\"#4477aa\"/>\n";
        svg.out << "<text x=\"" << coord(x + band * 0.35) << "\" y=\""
                << coord(kH - kMargin + 16) << "\" text-anchor=\"middle\" "
                << "font-size=\"11\" font-family=\"sans-serif\">" << labels[i]
                << "</text>\n";
        svg.out << "<text x=\"" << coord(x + band * 0.35) << "\" y=\""
                << coord(kH - kMargin - h - 4) << "\" text-anchor=\"middle\" "
                << "font-size=\"11\" font-family=\"sans-serif\">" << fmt_real(values[i], 4)
                << "</text>\n";
    }
}

void write_confusion_svg(const EvalReport& r, const fs::path& path) {
    SvgFile svg(path);
    svg.title("confusion matrix (threshold " + fmt_real(r.threshold, 4) + ")");
    const double cell = 120.0;
    const double x0 = kW / 2 - cell, y0 = kH / 2 - cell + 20.0;
    const std::size_t counts[2][2] = {
        {r.correctly_accepted, r.wrong_rejected},
        {r.wrong_accepted, r.correctly_rejected},
    };
    const char* fill[2][2] = {{"#ddeedd", "#eedddd"}, {"#eedddd", "#ddeedd"}};
    const char* row_label[2] = {"same", "different"};
    const char* col_label[2] = {"accepted", "rejected"};
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            const double x = x0 + cell * j, y = y0 + cell * i;
            svg.out << "<rect x=\"" << coord(x) << "\" y=\"" << coord(y) << "\" width=\""
                    << cell << "\" height=\"" << cell << "\" fill=\"" << fill[i][j]
                    << "\" stroke=\"#444\"/>\n";
            svg.out << "<text x=\"" << coord(x + cell / 2) << "\" y=\""
                    << coord(y + cell / 2 + 6) << "\" text-anchor=\"middle\" "
                    << "font-size=\"20\" font-family=\"sans-serif\">" << counts[i][j]
                    << "</text>\n";
        }
    for (int j = 0; j < 2; ++j)
        svg.out << "<text x=\"" << coord(x0 + cell * j + cell / 2) << "\" y=\""
                << coord(y0 - 10) << "\" text-anchor=\"middle\" font-size=\"13\" "
                << "font-family=\"sans-serif\">" << col_label[j] << "</text>\n";
    for (int i = 0; i < 2; ++i)
        svg.out << "<text x=\"" << coord(x0 - 10) << "\" y=\""
                << coord(y0 + cell * i + cell / 2 + 4)
                << "\" text-anchor=\"end\" font-size=\"13\" "
                << "font-family=\"sans-serif\">" << row_label[i] << "</text>\n";
}

void write_prediction_scatter_svg(const std::vector<SimilarityRecord>& records,
                                  double alpha, std::size_t gallery_size,
                                  std::size_t probe_size, const fs::path& path) {
    SvgFile svg(path);
    svg.title("predictions at alpha " + fmt_real(alpha, 4));
    axis_frame(svg.out);
    if (records.size() != gallery_size * probe_size || gallery_size == 0)
        throw ConstraintError("prediction scatter: record count does not match grid");
    const double sx = (kW - 2 * kMargin) / static_cast<double>(gallery_size);
    const double sy = (kH - 2 * kMargin) / static_cast<double>(probe_size);
    for (std::size_t i = 0; i < gallery_size; ++i)
        for (std::size_t j = 0; j < probe_size; ++j) {
            const SimilarityRecord& r = records[i * probe_size + j];
            if (!r.same_identity.has_value())
                throw ConstraintError("prediction scatter: unlabeled record");
            const bool correct = decide(r.score, alpha) == *r.same_identity;
            // Paper palette: yellow correct, blue wrong.
            svg.out << "<circle cx=\""
                    << coord(kMargin + sx * (static_cast<double>(i) + 0.5)) << "\" cy=\""
                    << coord(kMargin + sy * (static_cast<double>(j) + 0.5))
                    << "\" r=\"" << coord(std::min(sx, sy) * 0.35) << "\" fill=\""
                    << (correct ? "#eec643" : "#2255cc") << "\"/>\n";
        }
}

void write_latency_svg(const std::vector<double>& seconds, const fs::path& path) {
    Series s;
    s.label = "seconds per pair";
    s.color = "#aa4444";
    s.values = seconds;
    write_line_chart_svg({s}, "per-pair prediction time", path);
}

} // namespace veinmatch
