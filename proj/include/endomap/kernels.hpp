#pragma once

#include "endomap/image.hpp"

namespace endomap {

// 0.299 R + 0.587 G + 0.114 B; single-channel input is copied.
ImageBuffer to_grayscale(const ImageBuffer& img);

// Central differences inside, one-sided at the borders. Needs width,height >= 2;
// the ImageBuffer overload rejects multi-channel input.
GradientField gradient(const Raster& r);
GradientField gradient(const ImageBuffer& gray);

// Separable Gaussian, radius ceil(3 sigma), replicate border; sigma must be > 0.
Raster gaussian_blur(const Raster& r, double sigma);
ImageBuffer gaussian_blur(const ImageBuffer& img, double sigma);

// Population statistics over pixels where `valid` is set (all pixels if null).
// Throws when no pixel qualifies. Multi-channel input is reduced to luminance.
ImageStats image_stats(const ImageBuffer& img, const BinaryMask* valid = nullptr);
ImageStats raster_stats(const Raster& r, const BinaryMask* valid = nullptr);

// Summed-area table with an extra zero row/column.
class IntegralImage {
public:
    IntegralImage() = default;
    explicit IntegralImage(const Raster& r);

    int width() const { return w_; }
    int height() const { return h_; }

    // Inclusive prefix sum over [0..x] x [0..y].
    double at(int x, int y) const { return s_[static_cast<std::size_t>(y + 1) * (w_ + 1) + x + 1]; }

    // Sum over the half-open rectangle [x0,x1) x [y0,y1), clipped to the image.
    double box_sum(int x0, int y0, int x1, int y1) const;

private:
    int w_ = 0;
    int h_ = 0;
    std::vector<double> s_;
};

// Bilinear read; returns false when (x,y) lies outside [0,w-1] x [0,h-1].
bool sample_bilinear(const Raster& r, double x, double y, double& out);
bool sample_bilinear(const ImageBuffer& img, double x, double y, int c, double& out);

}  // namespace endomap
