#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <openssl/evp.h>
#include <png.h>

namespace layerforge {

// 8-bit interleaved image, 3 (RGB) or 4 (RGBA) channels, row-major.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 4;
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(int w, int h, int c, std::uint8_t fill = 0)
        : width(w), height(h), channels(c),
          pixels(static_cast<std::size_t>(std::max(w, 0)) * std::max(h, 0) * c, fill) {}

    bool empty() const { return width <= 0 || height <= 0; }
    std::size_t index(int x, int y) const {
        return (static_cast<std::size_t>(y) * width + x) * channels;
    }
    std::uint8_t* at(int x, int y) { return pixels.data() + index(x, y); }
    const std::uint8_t* at(int x, int y) const { return pixels.data() + index(x, y); }

    bool operator==(const Image&) const = default;
};

inline Image make_rgba(int w, int h) { return Image(w, h, 4, 0); }
inline Image make_rgb(int w, int h) { return Image(w, h, 3, 0); }

inline Image rgb_of(const Image& rgba) {
    if (rgba.channels == 3) {
        return rgba;
    }
    Image out = make_rgb(rgba.width, rgba.height);
    for (int y = 0; y < rgba.height; ++y) {
        for (int x = 0; x < rgba.width; ++x) {
            std::copy_n(rgba.at(x, y), 3, out.at(x, y));
        }
    }
    return out;
}

class ImageCodecError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::vector<std::uint8_t> encode_png(const Image& img) {
    if (img.empty() || (img.channels != 3 && img.channels != 4)) {
        throw ImageCodecError("encode_png: unsupported image shape");
    }
    png_image desc{};
    desc.version = PNG_IMAGE_VERSION;
    desc.width = static_cast<png_uint_32>(img.width);
    desc.height = static_cast<png_uint_32>(img.height);
    desc.format = img.channels == 4 ? PNG_FORMAT_RGBA : PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&desc, nullptr, &size, 0, img.pixels.data(), 0, nullptr)) {
        std::string msg = desc.message;
        png_image_free(&desc);
        throw ImageCodecError("encode_png: " + msg);
    }
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&desc, out.data(), &size, 0, img.pixels.data(), 0, nullptr)) {
        std::string msg = desc.message;
        png_image_free(&desc);
        throw ImageCodecError("encode_png: " + msg);
    }
    out.resize(size);
    return out;
}

// Decodes to RGBA (channels = 4) or RGB (channels = 3); missing alpha reads as 255.
inline Image decode_png(const std::uint8_t* data, std::size_t size, int channels = 4) {
    png_image desc{};
    desc.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&desc, data, size)) {
        throw ImageCodecError(std::string("decode_png: ") + desc.message);
    }
    desc.format = channels == 4 ? PNG_FORMAT_RGBA : PNG_FORMAT_RGB;
    Image img(static_cast<int>(desc.width), static_cast<int>(desc.height), channels);
    if (PNG_IMAGE_SIZE(desc) != img.pixels.size()) {
        png_image_free(&desc);
        throw ImageCodecError("decode_png: unexpected buffer size");
    }
    if (!png_image_finish_read(&desc, nullptr, img.pixels.data(), 0, nullptr)) {
        std::string msg = desc.message;
        png_image_free(&desc);
        throw ImageCodecError("decode_png: " + msg);
    }
    return img;
}

inline Image decode_png(const std::vector<std::uint8_t>& bytes, int channels = 4) {
    return decode_png(bytes.data(), bytes.size(), channels);
}

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                            static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

inline std::vector<std::uint8_t> base64_decode(std::string_view text) {
    if (text.size() % 4 != 0) {
        throw ImageCodecError("base64: length is not a multiple of 4");
    }
    std::vector<std::uint8_t> out(3 * text.size() / 4);
    int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                            static_cast<int>(text.size()));
    if (n < 0) {
        throw ImageCodecError("base64: invalid character");
    }
    std::size_t pad = 0;
    if (!text.empty() && text.back() == '=') {
        pad = (text.size() >= 2 && text[text.size() - 2] == '=') ? 2 : 1;
    }
    out.resize(static_cast<std::size_t>(n) - pad);
    return out;
}

inline std::string png_base64(const Image& img) { return base64_encode(encode_png(img)); }

inline Image image_from_png_base64(std::string_view text, int channels = 4) {
    return decode_png(base64_decode(text), channels);
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open " + path);
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const void* data, std::size_t size) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write " + path);
    }
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    write_file(path, bytes.data(), bytes.size());
}

inline void write_file(const std::string& path, std::string_view text) {
    write_file(path, text.data(), text.size());
}

inline void save_png(const std::string& path, const Image& img) { write_file(path, encode_png(img)); }

inline Image load_png(const std::string& path, int channels = 4) {
    return decode_png(read_file(path), channels);
}

}  // namespace layerforge
