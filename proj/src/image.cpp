#include "endomap/image.hpp"

#include <algorithm>
#include <cmath>

#include "endomap/parallel.hpp"

namespace endomap {

namespace {

double clamp01(double v) {
    if (!(v > 0.0)) return 0.0;  // also maps NaN to 0
    return v < 1.0 ? v : 1.0;
}

void check_dims(int w, int h) {
    if (w <= 0 || h <= 0) throw Error("image dimensions must be positive");
}

int g_threads = 1;

}  // namespace

void set_thread_count(int n) { g_threads = std::max(1, n); }
int thread_count() { return g_threads; }

void require_same_size(int w0, int h0, int w1, int h1, const char* what) {
    if (w0 != w1 || h0 != h1) throw Error(std::string(what) + ": size mismatch");
}

Raster::Raster(int width, int height, double fill) : w_(width), h_(height) {
    check_dims(width, height);
    v_.assign(static_cast<std::size_t>(width) * height, fill);
}

Raster::Raster(int width, int height, std::vector<double> values)
    : w_(width), h_(height), v_(std::move(values)) {
    check_dims(width, height);
    if (v_.size() != static_cast<std::size_t>(width) * height)
        throw Error("raster data size does not match dimensions");
}

double Raster::clamped(int x, int y) const {
    x = std::clamp(x, 0, w_ - 1);
    y = std::clamp(y, 0, h_ - 1);
    return (*this)(x, y);
}

ImageBuffer::ImageBuffer(int width, int height, int channels, double fill)
    : w_(width), h_(height), c_(channels) {
    check_dims(width, height);
    if (channels != 1 && channels != 3) throw Error("image must have 1 or 3 channels");
    data_.assign(static_cast<std::size_t>(width) * height * channels, clamp01(fill));
}

ImageBuffer::ImageBuffer(int width, int height, int channels, std::vector<double> data)
    : w_(width), h_(height), c_(channels), data_(std::move(data)) {
    check_dims(width, height);
    if (channels != 1 && channels != 3) throw Error("image must have 1 or 3 channels");
    if (data_.size() != static_cast<std::size_t>(width) * height * channels)
        throw Error("image data size does not match dimensions");
    for (double& v : data_) v = clamp01(v);
}

ImageBuffer ImageBuffer::from_raster(const Raster& r) {
    return ImageBuffer(r.width(), r.height(), 1, r.values());
}

void ImageBuffer::set(int x, int y, int c, double v) {
    data_[(static_cast<std::size_t>(y) * w_ + x) * c_ + c] = clamp01(v);
}

Raster ImageBuffer::channel(int c) const {
    if (c < 0 || c >= c_) throw Error("channel index out of range");
    Raster r(w_, h_);
    const std::size_t n = static_cast<std::size_t>(w_) * h_;
    for (std::size_t i = 0; i < n; ++i) r.values()[i] = data_[i * c_ + c];
    return r;
}

BinaryMask::BinaryMask(int width, int height, bool fill) : w_(width), h_(height) {
    check_dims(width, height);
    bits_.assign(static_cast<std::size_t>(width) * height, fill ? 1 : 0);
}

std::size_t BinaryMask::count() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

BinaryMask BinaryMask::operator&(const BinaryMask& o) const {
    require_same_size(w_, h_, o.w_, o.h_, "mask and");
    BinaryMask r(w_, h_);
    for (std::size_t i = 0; i < bits_.size(); ++i) r.bits_[i] = bits_[i] & o.bits_[i];
    return r;
}

BinaryMask BinaryMask::operator|(const BinaryMask& o) const {
    require_same_size(w_, h_, o.w_, o.h_, "mask or");
    BinaryMask r(w_, h_);
    for (std::size_t i = 0; i < bits_.size(); ++i) r.bits_[i] = bits_[i] | o.bits_[i];
    return r;
}

BinaryMask BinaryMask::operator~() const {
    BinaryMask r(w_, h_);
    for (std::size_t i = 0; i < bits_.size(); ++i) r.bits_[i] = bits_[i] ? 0 : 1;
    return r;
}

}  // namespace endomap
