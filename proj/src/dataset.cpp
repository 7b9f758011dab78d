#include "veinmatch/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "veinmatch/rng.hpp"

namespace veinmatch {

namespace fs = std::filesystem;

void SynthSpec::validate() const {
    if (identity_count < 1 || images_per_session < 1 || curve_count < 1)
        throw ParamError("SynthSpec: counts must be >= 1");
    if (side < 32) throw ParamError("SynthSpec: side must be >= 32");
    if (!(session_noise >= 0.0)) throw ParamError("SynthSpec: noise must be >= 0");
}

namespace {

std::string identity_name(std::size_t i, std::size_t count) {
    std::size_t width = 2;
    for (std::size_t c = count; c > 100; c /= 10) ++width;
    std::string digits = std::to_string(i);
    return "id" + std::string(width > digits.size() ? width - digits.size() : 0, '0') +
           digits;
}

// Identity template in doubles: bright background with low-frequency texture,
// minus Gaussian-profile strokes traced by seeded random walks.
std::vector<double> identity_template(const SynthSpec& spec, std::size_t identity) {
    const std::size_t side = spec.side;
    Rng rng(mix_seed(spec.identity_seed, "identity." + std::to_string(identity)));

    std::vector<double> img(side * side);
    const double base = rng.uniform(175.0, 210.0);
    struct Wave {
        double fx, fy, phase, amp;
    };
    std::vector<Wave> waves(3);
    for (Wave& wv : waves) {
        wv.fx = rng.uniform(0.5, 2.5) * 2.0 * M_PI / static_cast<double>(side);
        wv.fy = rng.uniform(0.5, 2.5) * 2.0 * M_PI / static_cast<double>(side);
        wv.phase = rng.uniform(0.0, 2.0 * M_PI);
        wv.amp = rng.uniform(2.0, 6.0);
    }
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
            double v = base;
            for (const Wave& wv : waves)
                v += wv.amp * std::sin(wv.fx * static_cast<double>(x) +
                                       wv.fy * static_cast<double>(y) + wv.phase);
            img[y * side + x] = v;
        }

    std::vector<double> field(side * side, 0.0);
    for (std::size_t c = 0; c < spec.curve_count; ++c) {
        double px = rng.uniform(0.15, 0.85) * static_cast<double>(side);
        double py = rng.uniform(0.15, 0.85) * static_cast<double>(side);
        double dir = rng.uniform(0.0, 2.0 * M_PI);
        const double sigma = rng.uniform(1.0, 1.8);
        const double depth = rng.uniform(60.0, 110.0);
        const std::size_t steps = static_cast<std::size_t>(
            rng.uniform(0.5, 1.1) * static_cast<double>(side));
        const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
        for (std::size_t s = 0; s < steps; ++s) {
            dir += rng.normal(0.0, 0.18);
            px += std::cos(dir);
            py += std::sin(dir);
            // Reflect off the frame so strokes stay visible.
            if (px < 2.0 || px > static_cast<double>(side) - 3.0) {
                dir = M_PI - dir;
                px = std::clamp(px, 2.0, static_cast<double>(side) - 3.0);
            }
            if (py < 2.0 || py > static_cast<double>(side) - 3.0) {
                dir = -dir;
                py = std::clamp(py, 2.0, static_cast<double>(side) - 3.0);
            }
            const auto cx = static_cast<std::ptrdiff_t>(std::floor(px));
            const auto cy = static_cast<std::ptrdiff_t>(std::floor(py));
            for (std::ptrdiff_t dy = -radius; dy <= radius; ++dy)
                for (std::ptrdiff_t dx = -radius; dx <= radius; ++dx) {
                    const std::ptrdiff_t qx = cx + dx, qy = cy + dy;
                    if (qx < 0 || qy < 0 || qx >= static_cast<std::ptrdiff_t>(side) ||
                        qy >= static_cast<std::ptrdiff_t>(side))
                        continue;
                    const double ddx = static_cast<double>(qx) - px;
                    const double ddy = static_cast<double>(qy) - py;
                    const double mag =
                        depth * std::exp(-(ddx * ddx + ddy * ddy) / (2.0 * sigma * sigma));
                    double& cell = field[static_cast<std::size_t>(qy) * side +
                                         static_cast<std::size_t>(qx)];
                    cell = std::max(cell, mag);
                }
        }
    }
    for (std::size_t i = 0; i < img.size(); ++i) img[i] -= field[i];
    return img;
}

} // namespace

std::vector<LabeledSample> synth_generate(const SynthSpec& spec) {
    spec.validate();
    const std::size_t side = spec.side;
    std::vector<LabeledSample> samples;
    samples.reserve(spec.identity_count * spec.images_per_session * 2);

    for (std::size_t id = 0; id < spec.identity_count; ++id) {
        const std::vector<double> tmpl = identity_template(spec, id);
        const std::string name = identity_name(id, spec.identity_count);
        for (int session = 1; session <= 2; ++session) {
            Rng session_rng(mix_seed(spec.identity_seed,
                                     "session." + std::to_string(id) + "." +
                                         std::to_string(session)));
            const double session_shift = session_rng.uniform(-8.0, 8.0);
            for (std::size_t idx = 0; idx < spec.images_per_session; ++idx) {
                Rng rng(mix_seed(spec.identity_seed,
                                 "image." + std::to_string(id) + "." +
                                     std::to_string(session) + "." + std::to_string(idx)));
                const double shift = session_shift + rng.uniform(-12.0, 12.0);
                const auto tx = static_cast<std::ptrdiff_t>(rng.uniform_index(7)) - 3;
                const auto ty = static_cast<std::ptrdiff_t>(rng.uniform_index(7)) - 3;

                GrayImage img(side, side);
                for (std::size_t y = 0; y < side; ++y)
                    for (std::size_t x = 0; x < side; ++x) {
                        const auto sx = std::clamp<std::ptrdiff_t>(
                            static_cast<std::ptrdiff_t>(x) - tx, 0,
                            static_cast<std::ptrdiff_t>(side) - 1);
                        const auto sy = std::clamp<std::ptrdiff_t>(
                            static_cast<std::ptrdiff_t>(y) - ty, 0,
                            static_cast<std::ptrdiff_t>(side) - 1);
                        double v = tmpl[static_cast<std::size_t>(sy) * side +
                                        static_cast<std::size_t>(sx)];
                        v += shift;
                        v += rng.normal(0.0, spec.session_noise);
                        img.at(x, y) = clamp_round_u8(v);
                    }

                LabeledSample s;
                s.image = std::move(img);
                s.identity = name;
                s.session = session;
                s.index = static_cast<int>(idx);
                samples.push_back(std::move(s));
            }
        }
    }
    return samples;
}

void save_dataset(const std::vector<LabeledSample>& samples, const fs::path& root) {
    for (const LabeledSample& s : samples) {
        const fs::path dir = root / s.identity / std::to_string(s.session);
        fs::create_directories(dir);
        char name[16];
        std::snprintf(name, sizeof name, "img%02d.pgm", s.index);
        write_pgm(s.image, dir / name);
    }
}

std::vector<LabeledSample> load_dataset(const fs::path& root) {
    if (!fs::exists(root))
        throw IngestError("load_dataset: root does not exist: " + root.string());
    if (!fs::is_directory(root))
        throw IngestError("load_dataset: root is not a directory: " + root.string());

    std::vector<fs::path> identities;
    for (const auto& e : fs::directory_iterator(root)) {
        if (!e.is_directory())
            throw IngestError("load_dataset: unexpected file " + e.path().string());
        identities.push_back(e.path());
    }
    std::sort(identities.begin(), identities.end());

    std::vector<LabeledSample> samples;
    std::size_t w = 0, h = 0;
    for (const fs::path& idp : identities) {
        for (const auto& se : fs::directory_iterator(idp)) {
            const std::string session_name = se.path().filename().string();
            if (!se.is_directory() || (session_name != "1" && session_name != "2"))
                throw IngestError("load_dataset: expected session directory 1 or 2, got " +
                                  se.path().string());
        }
        for (int session = 1; session <= 2; ++session) {
            const fs::path sp = idp / std::to_string(session);
            if (!fs::exists(sp)) continue;
            std::vector<fs::path> files;
            for (const auto& f : fs::directory_iterator(sp)) files.push_back(f.path());
            std::sort(files.begin(), files.end());
            int index = 0;
            for (const fs::path& f : files) {
                if (f.extension() != ".pgm")
                    throw IngestError("load_dataset: non-PGM file " + f.string());
                LabeledSample s;
                s.image = read_pgm(f);
                if (w == 0) {
                    w = s.image.width;
                    h = s.image.height;
                } else if (s.image.width != w || s.image.height != h) {
                    throw IngestError("load_dataset: mixed dimensions at " + f.string());
                }
                s.identity = idp.filename().string();
                s.session = session;
                s.index = index++;
                samples.push_back(std::move(s));
            }
        }
    }
    return samples;
}

std::vector<std::string> sorted_identities(const std::vector<LabeledSample>& samples) {
    std::set<std::string> ids;
    for (const LabeledSample& s : samples) ids.insert(s.identity);
    return {ids.begin(), ids.end()};
}

DatasetSplit split(const std::vector<LabeledSample>& samples,
                   std::size_t held_out_identities, double val_fraction) {
    if (!(val_fraction >= 0.0 && val_fraction < 1.0))
        throw ParamError("split: val_fraction must be in [0,1)");
    const std::vector<std::string> ids = sorted_identities(samples);
    if (held_out_identities >= ids.size() && !(held_out_identities == 0 && ids.empty()))
        throw DataError("split: held_out " + std::to_string(held_out_identities) +
                        " >= identity count " + std::to_string(ids.size()));

    std::set<std::string> held(ids.end() - static_cast<std::ptrdiff_t>(held_out_identities),
                               ids.end());

    // Per retained identity: last ceil-rounded share of session 1 goes to
    // validation, at least one image stays in train.
    std::map<std::string, std::vector<const LabeledSample*>> session1;
    for (const LabeledSample& s : samples)
        if (!held.count(s.identity) && s.session == 1)
            session1[s.identity].push_back(&s);

    std::map<std::string, std::size_t> val_start;
    for (auto& [id, list] : session1) {
        std::sort(list.begin(), list.end(),
                  [](const LabeledSample* a, const LabeledSample* b) {
                      return a->index < b->index;
                  });
        std::size_t n_val = 0;
        if (val_fraction > 0.0 && list.size() > 1) {
            n_val = static_cast<std::size_t>(
                std::floor(val_fraction * static_cast<double>(list.size()) + 0.5));
            n_val = std::clamp<std::size_t>(n_val, 1, list.size() - 1);
        }
        val_start[id] = list.size() - n_val;
    }

    DatasetSplit out;
    std::map<std::string, std::size_t> seen; // session-1 position per identity
    for (const LabeledSample& s : samples) {
        if (held.count(s.identity)) {
            (s.session == 1 ? out.match_gallery : out.match_probes).push_back(s);
        } else if (s.session == 1) {
            const std::size_t pos = seen[s.identity]++;
            (pos >= val_start[s.identity] ? out.validation : out.train).push_back(s);
        } else {
            out.unused.push_back(s);
        }
    }
    return out;
}

double nearest_centroid_oracle(const std::vector<LabeledSample>& train,
                               const std::vector<LabeledSample>& validation) {
    if (train.empty() || validation.empty())
        throw DataError("nearest_centroid_oracle: empty train or validation set");

    std::map<std::string, std::pair<std::vector<double>, std::size_t>> sums;
    for (const LabeledSample& s : train) {
        auto& [sum, count] = sums[s.identity];
        if (sum.empty()) sum.assign(s.image.pixels.size(), 0.0);
        for (std::size_t i = 0; i < s.image.pixels.size(); ++i)
            sum[i] += static_cast<double>(s.image.pixels[i]);
        ++count;
    }
    for (auto& [id, entry] : sums)
        for (double& v : entry.first) v /= static_cast<double>(entry.second);

    std::size_t correct = 0;
    for (const LabeledSample& s : validation) {
        double best = 0.0;
        std::string best_id;
        bool first = true;
        for (const auto& [id, entry] : sums) {
            double d2 = 0.0;
            for (std::size_t i = 0; i < entry.first.size(); ++i) {
                const double d = static_cast<double>(s.image.pixels[i]) - entry.first[i];
                d2 += d * d;
            }
            if (first || d2 < best) {
                best = d2;
                best_id = id;
                first = false;
            }
        }
        if (best_id == s.identity) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(validation.size());
}

double nearest_centroid_oracle(const DatasetSplit& s) {
    return nearest_centroid_oracle(s.train, s.validation);
}

} // namespace veinmatch
