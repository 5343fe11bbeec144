#include "endomap/io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

namespace endomap {

namespace {

std::string extension(const std::string& path) {
    const auto dot = path.find_last_of('.');
    if (dot == std::string::npos) return {};
    std::string e = path.substr(dot + 1);
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
    return e;
}

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::string& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) throw IoError("cannot open " + path);
    return f;
}

void png_error_fn(png_structp, png_const_charp msg) { throw FormatError(std::string("png: ") + msg); }
void png_warn_fn(png_structp, png_const_charp) {}

int quantize(double v, int maxval) {
    return static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * maxval));
}

}  // namespace

void save_png(const ImageBuffer& img, const std::string& path, int bit_depth) {
    if (bit_depth != 8 && bit_depth != 16) throw Error("png bit depth must be 8 or 16");
    auto f = open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warn_fn);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    struct Guard {
        png_structp* p;
        png_infop* i;
        ~Guard() { png_destroy_write_struct(p, i); }
    } guard{&png, &info};

    const int w = img.width(), h = img.height(), nc = img.channels();
    png_init_io(png, f.get());
    png_set_IHDR(png, info, w, h, bit_depth, nc == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    // Fixed compression settings keep output bytes reproducible.
    png_set_compression_level(png, 6);
    png_write_info(png, info);

    const int bytes = bit_depth / 8;
    const int maxval = bit_depth == 8 ? 255 : 65535;
    std::vector<unsigned char> row(static_cast<std::size_t>(w) * nc * bytes);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < nc; ++c) {
                const int q = quantize(img.at(x, y, c), maxval);
                const std::size_t o = (static_cast<std::size_t>(x) * nc + c) * bytes;
                if (bytes == 1) {
                    row[o] = static_cast<unsigned char>(q);
                } else {
                    row[o] = static_cast<unsigned char>(q >> 8);
                    row[o + 1] = static_cast<unsigned char>(q & 0xff);
                }
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
}

ImageBuffer load_png(const std::string& path) {
    auto f = open_file(path, "rb");
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw FormatError(path + ": not a PNG file");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warn_fn);
    if (!png) throw IoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    struct Guard {
        png_structp* p;
        png_infop* i;
        ~Guard() { png_destroy_read_struct(p, i, nullptr); }
    } guard{&png, &info};

    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int nc = png_get_channels(png, info);
    const int bd = png_get_bit_depth(png, info);
    if (nc != 1 && nc != 3) throw FormatError(path + ": unsupported channel layout");
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    std::vector<unsigned char> buf(rowbytes * h);
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y) rows[y] = buf.data() + rowbytes * y;
    png_read_image(png, rows.data());

    std::vector<double> data(static_cast<std::size_t>(w) * h * nc);
    const double maxval = bd == 16 ? 65535.0 : 255.0;
    for (int y = 0; y < h; ++y) {
        for (std::size_t i = 0; i < static_cast<std::size_t>(w) * nc; ++i) {
            int v;
            if (bd == 16) v = (rows[y][2 * i] << 8) | rows[y][2 * i + 1];
            else v = rows[y][i];
            data[static_cast<std::size_t>(y) * w * nc + i] = v / maxval;
        }
    }
    return ImageBuffer(w, h, nc, std::move(data));
}

void save_pnm(const ImageBuffer& img, const std::string& path, int bit_depth, bool ascii) {
    if (bit_depth != 8 && bit_depth != 16) throw Error("pnm bit depth must be 8 or 16");
    const int nc = img.channels();
    const int maxval = bit_depth == 8 ? 255 : 65535;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path);
    const char* magic = nc == 1 ? (ascii ? "P2" : "P5") : (ascii ? "P3" : "P6");
    out << magic << "\n" << img.width() << " " << img.height() << "\n" << maxval << "\n";
    const std::size_t n = img.data().size();
    if (ascii) {
        for (std::size_t i = 0; i < n; ++i) {
            out << quantize(img.data()[i], maxval);
            out << (((i + 1) % (static_cast<std::size_t>(img.width()) * nc) == 0) ? '\n' : ' ');
        }
    } else {
        std::vector<unsigned char> bytes(n * (bit_depth / 8));
        for (std::size_t i = 0; i < n; ++i) {
            const int q = quantize(img.data()[i], maxval);
            if (bit_depth == 8) {
                bytes[i] = static_cast<unsigned char>(q);
            } else {
                bytes[2 * i] = static_cast<unsigned char>(q >> 8);
                bytes[2 * i + 1] = static_cast<unsigned char>(q & 0xff);
            }
        }
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
    if (!out) throw IoError("write failed: " + path);
}

namespace {

// Reads the next header integer, skipping whitespace and '#' comments.
int read_header_int(std::istream& in, const std::string& path) {
    int c = in.get();
    while (in) {
        if (c == '#') {
            while (in && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            c = in.get();
        } else {
            break;
        }
    }
    if (!in || !std::isdigit(c)) throw FormatError(path + ": malformed PNM header");
    long v = 0;
    while (in && std::isdigit(c)) {
        v = v * 10 + (c - '0');
        if (v > 1000000) throw FormatError(path + ": PNM header value out of range");
        c = in.get();
    }
    return static_cast<int>(v);
}

}  // namespace

ImageBuffer load_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    char magic[2];
    in.read(magic, 2);
    if (!in || magic[0] != 'P' || magic[1] < '2' || magic[1] > '6' || magic[1] == '4')
        throw FormatError(path + ": unsupported PNM type");
    const bool ascii = magic[1] == '2' || magic[1] == '3';
    const int nc = (magic[1] == '2' || magic[1] == '5') ? 1 : 3;
    const int w = read_header_int(in, path);
    const int h = read_header_int(in, path);
    const int maxval = read_header_int(in, path);
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) throw FormatError(path + ": bad PNM header");
    const std::size_t n = static_cast<std::size_t>(w) * h * nc;
    std::vector<double> data(n);
    if (ascii) {
        for (std::size_t i = 0; i < n; ++i) {
            long v;
            if (!(in >> v)) throw FormatError(path + ": truncated PNM data");
            data[i] = static_cast<double>(v) / maxval;
        }
    } else {
        const int bytes = maxval > 255 ? 2 : 1;
        std::vector<unsigned char> buf(n * bytes);
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (static_cast<std::size_t>(in.gcount()) != buf.size()) throw FormatError(path + ": truncated PNM data");
        for (std::size_t i = 0; i < n; ++i) {
            const int v = bytes == 1 ? buf[i] : (buf[2 * i] << 8) | buf[2 * i + 1];
            data[i] = static_cast<double>(v) / maxval;
        }
    }
    return ImageBuffer(w, h, nc, std::move(data));
}

void save_pfm(const Raster& r, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path);
    out << "Pf\n" << r.width() << " " << r.height() << "\n-1.0\n";
    std::vector<float> row(r.width());
    for (int y = r.height() - 1; y >= 0; --y) {
        for (int x = 0; x < r.width(); ++x) row[x] = static_cast<float>(r(x, y));
        if constexpr (std::endian::native == std::endian::big) {
            for (float& v : row) {
                auto u = std::bit_cast<std::uint32_t>(v);
                u = __builtin_bswap32(u);
                v = std::bit_cast<float>(u);
            }
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * 4));
    }
    if (!out) throw IoError("write failed: " + path);
}

Raster load_pfm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::string magic;
    int w = 0, h = 0;
    double scale = 0.0;
    in >> magic >> w >> h >> scale;
    if (!in || magic != "Pf") throw FormatError(path + ": expected single-channel PFM");
    if (w <= 0 || h <= 0 || scale == 0.0) throw FormatError(path + ": bad PFM header");
    in.get();
    const bool little = scale < 0.0;
    const bool swap = little != (std::endian::native == std::endian::little);
    Raster r(w, h);
    std::vector<float> row(w);
    for (int y = h - 1; y >= 0; --y) {
        in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(w * 4));
        if (in.gcount() != w * 4) throw FormatError(path + ": truncated PFM data");
        for (int x = 0; x < w; ++x) {
            float v = row[x];
            if (swap) v = std::bit_cast<float>(__builtin_bswap32(std::bit_cast<std::uint32_t>(v)));
            r(x, y) = v;
        }
    }
    return r;
}

ImageBuffer load_image(const std::string& path) {
    const std::string e = extension(path);
    if (e == "png") return load_png(path);
    if (e == "pgm" || e == "ppm" || e == "pnm") return load_pnm(path);
    if (e == "pfm") return ImageBuffer::from_raster(load_pfm(path));
    throw FormatError(path + ": unknown image extension");
}

void save_image(const ImageBuffer& img, const std::string& path, int bit_depth) {
    const std::string e = extension(path);
    if (e == "png") return save_png(img, path, bit_depth);
    if (e == "pgm" || e == "ppm" || e == "pnm") return save_pnm(img, path, bit_depth);
    if (e == "pfm") {
        if (img.channels() != 1) throw Error("PFM output is single-channel");
        return save_pfm(img.channel(0), path);
    }
    throw FormatError(path + ": unknown image extension");
}

void save_mask(const BinaryMask& m, const std::string& path) {
    std::vector<double> d(m.bits().size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = m.bits()[i] ? 1.0 : 0.0;
    save_image(ImageBuffer(m.width(), m.height(), 1, std::move(d)), path, 8);
}

BinaryMask load_mask(const std::string& path) {
    const ImageBuffer img = load_image(path);
    BinaryMask m(img.width(), img.height());
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) m.set(x, y, img.at(x, y, 0) > 0.5);
    return m;
}

}  // namespace endomap
