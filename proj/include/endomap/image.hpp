#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace endomap {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

// Single-channel double field with no range constraint (gradients, depth,
// weights, integral sums).
class Raster {
public:
    Raster() = default;
    Raster(int width, int height, double fill = 0.0);
    Raster(int width, int height, std::vector<double> values);

    int width() const { return w_; }
    int height() const { return h_; }
    std::size_t size() const { return v_.size(); }
    bool empty() const { return v_.empty(); }

    double& operator()(int x, int y) { return v_[static_cast<std::size_t>(y) * w_ + x]; }
    double operator()(int x, int y) const { return v_[static_cast<std::size_t>(y) * w_ + x]; }

    // Replicate-border read.
    double clamped(int x, int y) const;

    std::vector<double>& values() { return v_; }
    const std::vector<double>& values() const { return v_; }

private:
    int w_ = 0;
    int h_ = 0;
    std::vector<double> v_;
};

// Row-major, interleaved, 1 or 3 channels, every value kept in [0,1].
class ImageBuffer {
public:
    ImageBuffer() = default;
    ImageBuffer(int width, int height, int channels, double fill = 0.0);
    ImageBuffer(int width, int height, int channels, std::vector<double> data);

    static ImageBuffer from_raster(const Raster& r);

    int width() const { return w_; }
    int height() const { return h_; }
    int channels() const { return c_; }
    bool empty() const { return data_.empty(); }

    double at(int x, int y, int c = 0) const {
        return data_[(static_cast<std::size_t>(y) * w_ + x) * c_ + c];
    }
    void set(int x, int y, int c, double v);
    void set(int x, int y, double v) { set(x, y, 0, v); }

    const std::vector<double>& data() const { return data_; }

    // Copy of one channel as an unconstrained raster.
    Raster channel(int c = 0) const;

private:
    int w_ = 0;
    int h_ = 0;
    int c_ = 0;
    std::vector<double> data_;
};

class BinaryMask {
public:
    BinaryMask() = default;
    BinaryMask(int width, int height, bool fill = false);

    int width() const { return w_; }
    int height() const { return h_; }
    bool empty() const { return bits_.empty(); }

    bool operator()(int x, int y) const { return bits_[static_cast<std::size_t>(y) * w_ + x] != 0; }
    void set(int x, int y, bool v) { bits_[static_cast<std::size_t>(y) * w_ + x] = v ? 1 : 0; }

    std::size_t count() const;
    const std::vector<std::uint8_t>& bits() const { return bits_; }
    std::vector<std::uint8_t>& bits() { return bits_; }

    BinaryMask operator&(const BinaryMask& o) const;
    BinaryMask operator|(const BinaryMask& o) const;
    BinaryMask operator~() const;

private:
    int w_ = 0;
    int h_ = 0;
    std::vector<std::uint8_t> bits_;
};

struct GradientField {
    Raster dx;
    Raster dy;
    Raster magnitude;
};

struct ImageStats {
    double mean = 0.0;
    double stddev = 0.0;
    double min = 0.0;
    double max = 0.0;
    std::size_t count = 0;
};

void require_same_size(int w0, int h0, int w1, int h1, const char* what);

}  // namespace endomap
