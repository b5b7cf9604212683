#pragma once

// Minimal image container and decoding. Netpbm (P2/P3/P5/P6) is always
// supported; PNG/JPEG and friends go through OpenCV when the build found it
// (PROTOALIGN_HAVE_OPENCV).

#include "common.hpp"

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#ifdef PROTOALIGN_HAVE_OPENCV
#pragma GCC diagnostic push
#pragma GCC diagnostic ignored "-Wdeprecated-enum-enum-conversion"
#include <opencv2/imgcodecs.hpp>
#pragma GCC diagnostic pop
#endif

namespace protoalign {

// Planar CHW floats in [0, 1].
struct Image {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> data;

    Image() = default;
    Image(int c, int h, int w) : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, 0.0f) {}

    float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    bool operator==(const Image&) const = default;
};

namespace detail {

inline bool read_token(std::istream& in, std::string& tok) {
    tok.clear();
    int ch = in.get();
    while (ch != EOF) {
        if (ch == '#') {
            while (ch != EOF && ch != '\n') ch = in.get();
        } else if (std::isspace(ch)) {
            ch = in.get();
        } else {
            break;
        }
    }
    while (ch != EOF && !std::isspace(ch) && ch != '#') {
        tok.push_back(static_cast<char>(ch));
        ch = in.get();
    }
    return !tok.empty();
}

inline bool parse_positive(const std::string& tok, int& out) {
    if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }))
        return false;
    out = std::stoi(tok);
    return out > 0;
}

}  // namespace detail

inline std::optional<Image> read_netpbm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    std::string magic, tok;
    if (!detail::read_token(in, magic)) return std::nullopt;
    if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6") return std::nullopt;
    const bool color = magic == "P3" || magic == "P6";
    const bool binary = magic == "P5" || magic == "P6";
    int w = 0, h = 0, maxval = 0;
    if (!detail::read_token(in, tok) || !detail::parse_positive(tok, w)) return std::nullopt;
    if (!detail::read_token(in, tok) || !detail::parse_positive(tok, h)) return std::nullopt;
    if (!detail::read_token(in, tok) || !detail::parse_positive(tok, maxval) || maxval > 65535) return std::nullopt;

    const int c = color ? 3 : 1;
    Image img(c, h, w);
    const float scale = 1.0f / static_cast<float>(maxval);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch) {
                int v = 0;
                if (binary) {
                    unsigned char b[2];
                    const int nbytes = maxval > 255 ? 2 : 1;
                    if (!in.read(reinterpret_cast<char*>(b), nbytes)) return std::nullopt;
                    v = nbytes == 2 ? (b[0] << 8) | b[1] : b[0];
                } else {
                    if (!detail::read_token(in, tok) || !std::all_of(tok.begin(), tok.end(), ::isdigit)) return std::nullopt;
                    v = std::stoi(tok);
                }
                if (v > maxval) return std::nullopt;
                img.at(ch, y, x) = static_cast<float>(v) * scale;
            }
    return img;
}

// 8-bit binary PPM (color) or PGM (single channel).
inline void write_netpbm(const std::filesystem::path& path, const Image& img) {
    if (img.channels != 1 && img.channels != 3) throw ConfigError("write_netpbm: need 1 or 3 channels");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write image " + path.string());
    out << (img.channels == 3 ? "P6" : "P5") << "\n" << img.width << " " << img.height << "\n255\n";
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) {
                const float v = std::clamp(img.at(c, y, x), 0.0f, 1.0f);
                out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
            }
}

inline bool is_netpbm_extension(const std::filesystem::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".ppm" || ext == ".pgm" || ext == ".pnm";
}

// nullopt when the file is not a decodable image.
inline std::optional<Image> load_image(const std::filesystem::path& path) {
    if (is_netpbm_extension(path)) return read_netpbm(path);
#ifdef PROTOALIGN_HAVE_OPENCV
    const cv::Mat m = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (m.empty()) return std::nullopt;
    Image img(3, m.rows, m.cols);
    for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x) {
            const auto& px = m.at<cv::Vec3b>(y, x);  // BGR
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(px[2 - c]) / 255.0f;
        }
    return img;
#else
    return read_netpbm(path);
#endif
}

inline Image to_rgb(const Image& img) {
    if (img.channels == 3) return img;
    Image out(3, img.height, img.width);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(0, y, x);
    return out;
}

// Bilinear resize with half-pixel centers.
inline Image resize_bilinear(const Image& img, int height, int width) {
    if (img.height == height && img.width == width) return img;
    Image out(img.channels, height, width);
    const double sy = static_cast<double>(img.height) / height;
    const double sx = static_cast<double>(img.width) / width;
    for (int y = 0; y < height; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, img.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < width; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, img.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < img.channels; ++c) {
                const double top = (1 - wx) * img.at(c, y0, x0) + wx * img.at(c, y0, x1);
                const double bot = (1 - wx) * img.at(c, y1, x0) + wx * img.at(c, y1, x1);
                out.at(c, y, x) = static_cast<float>((1 - wy) * top + wy * bot);
            }
        }
    }
    return out;
}

}  // namespace protoalign
