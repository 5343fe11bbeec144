#pragma once

#include <string>

#include "endomap/image.hpp"

namespace endomap {

// Dispatch on extension: .png, .pgm, .ppm, .pfm.
ImageBuffer load_image(const std::string& path);

// bit_depth 8 or 16; 16 applies to PNG and PNM.
void save_image(const ImageBuffer& img, const std::string& path, int bit_depth = 8);

void save_png(const ImageBuffer& img, const std::string& path, int bit_depth = 8);
ImageBuffer load_png(const std::string& path);

void save_pnm(const ImageBuffer& img, const std::string& path, int bit_depth = 8, bool ascii = false);
ImageBuffer load_pnm(const std::string& path);

// Little-endian single-channel PFM, bottom-to-top rows as the format requires.
void save_pfm(const Raster& r, const std::string& path);
Raster load_pfm(const std::string& path);

// Masks travel as 8-bit grey images, 0 or 255.
void save_mask(const BinaryMask& m, const std::string& path);
BinaryMask load_mask(const std::string& path);

}  // namespace endomap
