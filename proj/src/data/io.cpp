#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "crowdctx/core/errors.hpp"
#include "crowdctx/data.hpp"

namespace crowdctx {

namespace fs = std::filesystem;

namespace {

constexpr const char* kManifestHeader = "crowdctx-dataset 1";

// Cursor over a byte string that reports positions in its errors.
class Reader {
public:
    Reader(const std::string& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

    [[noreturn]] void fail(const std::string& what) const { throw ParseError(source_ + ": " + what, pos_); }

    void skip_space_and_comments() {
        while (pos_ < bytes_.size()) {
            const char c = bytes_[pos_];
            if (c == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
            } else if (std::isspace(static_cast<unsigned char>(c))) {
                ++pos_;
            } else {
                break;
            }
        }
    }

    std::string token() {
        skip_space_and_comments();
        const std::size_t start = pos_;
        while (pos_ < bytes_.size() && !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) ++pos_;
        if (start == pos_) fail("unexpected end of file");
        return bytes_.substr(start, pos_ - start);
    }

    long long integer() {
        skip_space_and_comments();
        const std::size_t start = pos_;
        const std::string t = token();
        std::size_t used = 0;
        long long v = 0;
        try {
            v = std::stoll(t, &used);
        } catch (const std::exception&) {
            pos_ = start;
            fail("expected an integer, found '" + t + "'");
        }
        if (used != t.size()) {
            pos_ = start;
            fail("expected an integer, found '" + t + "'");
        }
        return v;
    }

    void expect(const std::string& word) {
        skip_space_and_comments();
        const std::size_t start = pos_;
        if (token() != word) {
            pos_ = start;
            fail("expected '" + word + "'");
        }
    }

    // Exactly one whitespace byte, as after a PNM header's maxval.
    void single_space() {
        if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
            fail("expected whitespace after header");
        }
        ++pos_;
    }

    bool at_end() {
        skip_space_and_comments();
        return pos_ >= bytes_.size();
    }

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }
    const std::string& bytes() const { return bytes_; }
    void advance(std::size_t n) { pos_ += n; }

private:
    const std::string& bytes_;
    std::string source_;
    std::size_t pos_ = 0;
};

std::string index_name(std::size_t i) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%04zu", i);
    return buf;
}

}  // namespace

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("failed reading " + path);
    return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.close();
    if (!out) throw IoError("failed writing " + path);
}

void write_ppm(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw DimensionError("PPM export needs a [3, h, w] image, got " + shape_string(image.shape()));
    }
    const std::size_t h = image.dim(1), w = image.dim(2);
    std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    const auto v = image.data();
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                const double q = std::round(std::clamp(v[(c * h + y) * w + x], 0.0, 1.0) * 255.0);
                out.push_back(static_cast<char>(static_cast<unsigned char>(q)));
            }
        }
    }
    write_file(path, out);
}

Tensor decode_ppm(const std::string& bytes) {
    Reader r(bytes, "ppm");
    r.expect("P6");
    const long long w = r.integer(), h = r.integer(), maxval = r.integer();
    if (w <= 0 || h <= 0) r.fail("image dimensions must be positive");
    if (maxval != 255) r.fail("only maxval 255 is supported");
    r.single_space();
    const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3;
    if (r.remaining() < n) r.fail("truncated pixel data: need " + std::to_string(n) + " bytes");
    const std::size_t H = static_cast<std::size_t>(h), W = static_cast<std::size_t>(w);
    std::vector<double> img(n);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + r.pos());
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            for (std::size_t c = 0; c < 3; ++c) img[(c * H + y) * W + x] = p[(y * W + x) * 3 + c] / 255.0;
        }
    }
    return Tensor::from({3, H, W}, std::move(img));
}

Tensor read_ppm(const std::string& path) {
    const std::string bytes = read_file(path);
    try {
        return decode_ppm(bytes);
    } catch (const ParseError& e) {
        throw ParseError(path + ": " + e.what(), e.offset());
    }
}

void write_pgm16(const std::string& path, const std::vector<std::uint16_t>& pixels, std::size_t h,
                 std::size_t w) {
    if (pixels.size() != h * w) throw DimensionError("PGM pixel count does not match its size");
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n65535\n";
    for (auto v : pixels) {
        out.push_back(static_cast<char>(v >> 8));
        out.push_back(static_cast<char>(v & 0xff));
    }
    write_file(path, out);
}

std::vector<std::uint16_t> read_pgm16(const std::string& path, std::size_t* h, std::size_t* w) {
    const std::string bytes = read_file(path);
    Reader r(bytes, path);
    r.expect("P5");
    const long long ww = r.integer(), hh = r.integer(), maxval = r.integer();
    if (ww <= 0 || hh <= 0 || maxval != 65535) r.fail("unsupported PGM header");
    r.single_space();
    const std::size_t n = static_cast<std::size_t>(ww) * static_cast<std::size_t>(hh);
    if (r.remaining() < 2 * n) r.fail("truncated pixel data");
    std::vector<std::uint16_t> px(n);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + r.pos());
    for (std::size_t i = 0; i < n; ++i) px[i] = static_cast<std::uint16_t>((p[2 * i] << 8) | p[2 * i + 1]);
    *h = static_cast<std::size_t>(hh);
    *w = static_cast<std::size_t>(ww);
    return px;
}

void write_dataset(const std::string& dir, const Dataset& data) {
    std::error_code ec;
    fs::create_directories(fs::path(dir) / "images", ec);
    fs::create_directories(fs::path(dir) / "dots", ec);
    if (ec) throw IoError("cannot create dataset directory " + dir + ": " + ec.message());
    std::string manifest = std::string(kManifestHeader) + "\nstride " + std::to_string(data.stride) +
                           "\nsamples " + std::to_string(data.samples.size()) + "\n";
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
        const auto& s = data.samples[i];
        const std::string name = index_name(i);
        write_ppm((fs::path(dir) / "images" / (name + ".ppm")).string(), s.image);
        std::string dots;
        for (const auto& d : s.dots) dots += std::to_string(d.x) + " " + std::to_string(d.y) + "\n";
        write_file((fs::path(dir) / "dots" / (name + ".txt")).string(), dots);
        manifest += s.id + " images/" + name + ".ppm dots/" + name + ".txt " + std::to_string(s.dots.size()) + "\n";
    }
    write_file((fs::path(dir) / "manifest.txt").string(), manifest);
}

Dataset read_dataset(const std::string& dir) {
    const std::string manifest_path = (fs::path(dir) / "manifest.txt").string();
    const std::string text = read_file(manifest_path);
    Reader r(text, manifest_path);
    r.expect("crowdctx-dataset");
    r.expect("1");
    r.expect("stride");
    const long long stride = r.integer();
    if (stride < 1) r.fail("stride must be >= 1");
    r.expect("samples");
    const long long n = r.integer();
    if (n < 0) r.fail("negative sample count");

    Dataset data;
    data.stride = static_cast<std::size_t>(stride);
    for (long long i = 0; i < n; ++i) {
        const std::string id = r.token();
        const std::string image_rel = r.token();
        const std::string dots_rel = r.token();
        const long long count = r.integer();
        if (count < 0) r.fail("negative dot count");

        Tensor image = read_ppm((fs::path(dir) / image_rel).string());
        const std::string dots_path = (fs::path(dir) / dots_rel).string();
        const std::string dots_text = read_file(dots_path);
        Reader dr(dots_text, dots_path);
        std::vector<Dot> dots;
        for (long long k = 0; k < count; ++k) {
            const long long x = dr.integer(), y = dr.integer();
            if (x < 0 || y < 0 || x >= static_cast<long long>(image.dim(2)) ||
                y >= static_cast<long long>(image.dim(1))) {
                dr.fail("dot outside the image");
            }
            dots.push_back({static_cast<int>(x), static_cast<int>(y)});
        }
        if (!dr.at_end()) dr.fail("more dots than the manifest declares");
        data.samples.push_back(make_sample(id, std::move(image), std::move(dots), data.stride));
    }
    if (!r.at_end()) r.fail("trailing content after " + std::to_string(n) + " samples");
    return data;
}

}  // namespace crowdctx
