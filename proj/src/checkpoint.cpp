#include "veinmatch/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "veinmatch/errors.hpp"

namespace veinmatch {

namespace {

constexpr char kMagic[] = "VEINMATCHCKPT";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;
constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double d) {
    put_u64(out, std::bit_cast<std::uint64_t>(d));
}

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}
    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(byte()) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(byte()) << (8 * i);
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == b_.size(); }

private:
    std::uint8_t byte() {
        need(1);
        return b_[pos_++];
    }
    void need(std::size_t n) {
        if (pos_ + n > b_.size())
            throw IngestError("checkpoint: truncated data");
    }
    const std::vector<std::uint8_t>& b_;
    std::size_t pos_ = 0;
};

} // namespace

std::vector<std::uint8_t> checkpoint_bytes(const NamedTensors& tensors) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + kMagicLen);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t e : t.shape()) put_u64(out, e);
        for (double v : t.values()) put_f64(out, v);
    }
    return out;
}

NamedTensors checkpoint_from_bytes(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    if (r.str(kMagicLen) != kMagic)
        throw IngestError("checkpoint: bad magic string");
    const std::uint32_t version = r.u32();
    if (version != kVersion)
        throw IngestError("checkpoint: unsupported version " + std::to_string(version));
    const std::uint32_t count = r.u32();
    NamedTensors tensors;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.str(r.u32());
        const std::uint32_t rank = r.u32();
        std::vector<std::size_t> shape(rank);
        for (auto& e : shape) e = static_cast<std::size_t>(r.u64());
        const std::size_t n = Tensor::element_count(shape);
        std::vector<double> data(n);
        for (auto& v : data) v = r.f64();
        tensors.emplace(name, Tensor(std::move(shape), std::move(data)));
    }
    if (!r.done()) throw IngestError("checkpoint: trailing bytes");
    return tensors;
}

void write_checkpoint(const NamedTensors& tensors, const std::filesystem::path& path) {
    const auto bytes = checkpoint_bytes(tensors);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestError("checkpoint: cannot open " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IngestError("checkpoint: write failed for " + path.string());
}

NamedTensors read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("checkpoint: cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return checkpoint_from_bytes(bytes);
}

} // namespace veinmatch
