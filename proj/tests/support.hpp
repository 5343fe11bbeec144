#pragma once

#include <unistd.h>

#include <filesystem>
#include <random>
#include <string>

#include "endomap/image.hpp"
#include "endomap/parallel.hpp"

namespace testutil {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("endomap_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    std::string file(const std::string& name) const { return (path_ / name).string(); }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

// Sets the worker count for its lifetime.
class ThreadScope {
public:
    explicit ThreadScope(int n) : saved_(endomap::thread_count()) { endomap::set_thread_count(n); }
    ~ThreadScope() { endomap::set_thread_count(saved_); }
    ThreadScope(const ThreadScope&) = delete;
    ThreadScope& operator=(const ThreadScope&) = delete;

private:
    int saved_;
};

inline endomap::ImageBuffer random_image(int w, int h, std::uint64_t seed, int channels = 1) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> v(static_cast<std::size_t>(w) * h * channels);
    for (double& x : v) x = u(rng);
    return endomap::ImageBuffer(w, h, channels, std::move(v));
}

inline endomap::ImageBuffer from_function(int w, int h, auto f) {
    endomap::ImageBuffer img(w, h, 1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) img.set(x, y, f(x, y));
    return img;
}

}  // namespace testutil
