#include "veinmatch/gray_image.hpp"

#include <cctype>
#include <cmath>
#include <fstream>

namespace veinmatch {

GrayImage crop_roi(const GrayImage& img, std::size_t center_x, std::size_t center_y,
                   std::size_t side) {
    if (side == 0) throw DimensionError("crop_roi: side must be positive");
    if (side > img.width || side > img.height)
        throw DimensionError("crop_roi: side " + std::to_string(side) +
                             " exceeds source " + std::to_string(img.width) + "x" +
                             std::to_string(img.height));

    // Window top-left before clamping; integer half keeps the full-frame and
    // single-pixel cases exact.
    auto clamp_origin = [&](std::size_t center, std::size_t extent) {
        std::ptrdiff_t o = static_cast<std::ptrdiff_t>(center) -
                           static_cast<std::ptrdiff_t>(side / 2);
        if (o < 0) o = 0;
        std::ptrdiff_t max_o = static_cast<std::ptrdiff_t>(extent - side);
        if (o > max_o) o = max_o;
        return static_cast<std::size_t>(o);
    };
    const std::size_t x0 = clamp_origin(center_x, img.width);
    const std::size_t y0 = clamp_origin(center_y, img.height);

    GrayImage out(side, side);
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x)
            out.at(x, y) = img.at(x0 + x, y0 + y);
    return out;
}

Tensor to_tensor(const GrayImage& img) {
    Tensor t({1, img.height, img.width});
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        t[i] = static_cast<double>(img.pixels[i]) / 255.0;
    return t;
}

namespace {

// Skips whitespace and '#' comments in a PGM header.
int next_header_token(std::istream& in, const std::filesystem::path& path) {
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (!std::isspace(c)) {
            break;
        }
        c = in.get();
    }
    if (c == EOF) throw IngestError("read_pgm: truncated header in " + path.string());
    int value = 0;
    bool any = false;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + (c - '0');
        any = true;
        c = in.get();
    }
    if (!any) throw IngestError("read_pgm: malformed header in " + path.string());
    return value;
}

} // namespace

GrayImage read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("read_pgm: cannot open " + path.string());
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    if (m0 != 'P' || m1 != '5')
        throw IngestError("read_pgm: not a binary PGM (P5): " + path.string());
    const int w = next_header_token(in, path);
    const int h = next_header_token(in, path);
    const int maxval = next_header_token(in, path);
    if (w <= 0 || h <= 0)
        throw IngestError("read_pgm: bad dimensions in " + path.string());
    if (maxval != 255)
        throw IngestError("read_pgm: maxval must be 255 in " + path.string());
    // next_header_token consumed exactly one byte past the maxval digits, the
    // single whitespace separating header from raster.
    GrayImage img(static_cast<std::size_t>(w), static_cast<std::size_t>(h));
    in.read(reinterpret_cast<char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
        throw IngestError("read_pgm: truncated raster in " + path.string());
    return img;
}

void write_pgm(const GrayImage& img, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestError("write_pgm: cannot open " + path.string());
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw IngestError("write_pgm: write failed for " + path.string());
}

} // namespace veinmatch
