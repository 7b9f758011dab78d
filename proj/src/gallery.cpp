#include "veinmatch/gallery.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>

#include <nlohmann/json.hpp>

#include "veinmatch/infer32.hpp"

namespace veinmatch {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string iso_timestamp() {
    std::time_t t;
    if (const char* env = std::getenv("SOURCE_DATE_EPOCH"))
        t = static_cast<std::time_t>(std::strtoll(env, nullptr, 10));
    else
        t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Advisory single-writer lock via O_EXCL creation. Stale locks must be
// removed by hand; a desk tool does not need recovery machinery.
class GalleryLock {
public:
    explicit GalleryLock(const fs::path& gallery) : path_(gallery.string() + ".lock") {
        const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0)
            throw GalleryError("gallery locked by another writer: " + path_.string());
        ::close(fd);
    }
    ~GalleryLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    GalleryLock(const GalleryLock&) = delete;
    GalleryLock& operator=(const GalleryLock&) = delete;

private:
    fs::path path_;
};

std::string entry_line(const GalleryEntry& e) {
    json j;
    j["id"] = e.id;
    j["dim"] = e.embedding.size();
    j["embedding"] = e.embedding;
    j["norm"] = e.norm;
    j["created"] = e.created;
    return j.dump();
}

void write_gallery(const Gallery& g, const fs::path& path) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw GalleryError("cannot open " + tmp.string());
        json header;
        header["format"] = "veinmatch-gallery";
        header["version"] = 1;
        header["model_hash"] = g.model_hash;
        out << header.dump() << "\n";
        for (const GalleryEntry& e : g.entries) out << entry_line(e) << "\n";
        if (!out) throw GalleryError("write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

} // namespace

const GalleryEntry* Gallery::find(const std::string& id) const {
    for (const GalleryEntry& e : entries)
        if (e.id == id) return &e;
    return nullptr;
}

Gallery read_gallery(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw GalleryError("cannot open gallery " + path.string());
    std::string line;
    if (!std::getline(in, line))
        throw GalleryError("gallery missing header: " + path.string());
    Gallery g;
    try {
        const json header = json::parse(line);
        if (header.at("format") != "veinmatch-gallery")
            throw GalleryError("not a veinmatch gallery: " + path.string());
        if (header.at("version") != 1)
            throw GalleryError("unsupported gallery version in " + path.string());
        g.model_hash = header.at("model_hash").get<std::string>();
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const json j = json::parse(line);
            GalleryEntry e;
            e.id = j.at("id").get<std::string>();
            e.embedding = j.at("embedding").get<std::vector<double>>();
            e.norm = j.at("norm").get<double>();
            e.created = j.at("created").get<std::string>();
            if (e.embedding.size() != j.at("dim").get<std::size_t>())
                throw GalleryError("gallery entry dim mismatch for " + e.id);
            g.entries.push_back(std::move(e));
        }
    } catch (const json::exception& ex) {
        throw GalleryError("malformed gallery " + path.string() + ": " + ex.what());
    }
    return g;
}

GalleryEntry enroll(const fs::path& path, const std::string& subject_id,
                    const std::vector<GrayImage>& images, const ModelParams& model) {
    if (images.empty()) throw GalleryError("enroll: no images for " + subject_id);
    const std::string hash = model_content_hash(model);

    std::vector<double> mean;
    for (const GrayImage& img : images) {
        const std::vector<double> emb = extract_embedding(model, to_tensor(img));
        if (mean.empty()) mean.assign(emb.size(), 0.0);
        for (std::size_t i = 0; i < emb.size(); ++i) mean[i] += emb[i];
    }
    for (double& v : mean) v /= static_cast<double>(images.size());

    double n2 = 0.0;
    for (double v : mean) n2 += v * v;
    if (n2 == 0.0)
        throw DegenerateEmbeddingError("enroll: zero-norm mean embedding for " +
                                       subject_id);

    GalleryLock lock(path);
    Gallery g;
    if (fs::exists(path)) {
        g = read_gallery(path);
        if (g.model_hash != hash)
            throw GalleryError("enroll: gallery " + path.string() +
                               " was built with model " + g.model_hash +
                               ", current model is " + hash);
    } else {
        g.model_hash = hash;
    }

    GalleryEntry e;
    e.id = subject_id;
    e.embedding = std::move(mean);
    e.norm = std::sqrt(n2);
    e.created = iso_timestamp();
    g.entries.push_back(e);
    write_gallery(g, path);
    return e;
}

VerifyResult verify(const fs::path& path, const std::string& subject_id,
                    const GrayImage& probe, const ModelParams& model, double alpha,
                    bool use_f32) {
    const Gallery g = read_gallery(path);
    const std::string hash = model_content_hash(model);
    if (g.model_hash != hash)
        throw GalleryError("verify: gallery model " + g.model_hash +
                           " does not match current model " + hash);
    const GalleryEntry* entry = g.find(subject_id);
    if (!entry) throw GalleryError("verify: unknown subject " + subject_id);

    // Timed region: one embedding, one cosine, one decision.
    VerifyResult r;
    if (use_f32) {
        const Infer32 engine(model);
        const auto t0 = std::chrono::steady_clock::now();
        const std::vector<double> emb = engine.embed(probe);
        r.score = cosine_similarity(emb, entry->embedding);
        r.accepted = decide(r.score, alpha);
        r.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    } else {
        const auto t0 = std::chrono::steady_clock::now();
        const std::vector<double> emb = extract_embedding(model, to_tensor(probe));
        r.score = cosine_similarity(emb, entry->embedding);
        r.accepted = decide(r.score, alpha);
        r.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    return r;
}

} // namespace veinmatch
