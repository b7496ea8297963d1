#include "kv2ct/png_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#if defined(KV2CT_HAVE_PNG)
#include <png.h>
#endif

namespace kv2ct {

bool png_supported() {
#if defined(KV2CT_HAVE_PNG)
    return true;
#else
    return false;
#endif
}

#if defined(KV2CT_HAVE_PNG)

void write_png_gray8(const std::string& path, int width, int height,
                     const std::vector<std::uint8_t>& pixels) {
    if (width <= 0 || height <= 0 || pixels.size() != std::size_t(width) * std::size_t(height))
        throw ShapeError("png: pixel buffer does not match " + std::to_string(width) + "x" +
                         std::to_string(height));
    std::FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw IoError("png: cannot open " + path + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        std::fclose(fp);
        throw IoError("png: library initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("png: write failed for " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, png_uint_32(width), png_uint_32(height), 8, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y)
        png_write_row(png, const_cast<png_bytep>(pixels.data() + std::size_t(y) * width));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

#else

void write_png_gray8(const std::string&, int, int, const std::vector<std::uint8_t>&) {
    throw IoError("png: support not built (libpng was not found at configure time)");
}

#endif

void write_slice_triptych(const Volume3D& ref, const Volume3D& syn, int z,
                          const std::string& path, double window_center,
                          double window_width) {
    ref.require_same_grid(syn, "triptych");
    if (z < 0 || z >= ref.dims[2])
        throw ShapeError("triptych: slice " + std::to_string(z) + " outside volume");
    if (!(window_width > 0.0)) throw ConfigError("triptych: window width must be positive");
    const int nx = ref.dims[0], ny = ref.dims[1];
    const int sep = 2;
    const int width = 3 * nx + 2 * sep;
    std::vector<std::uint8_t> img(std::size_t(width) * ny, 255);  // white separators
    const double lo = window_center - 0.5 * window_width;
    auto win = [&](double v) {
        return std::uint8_t(std::clamp((v - lo) / window_width * 255.0, 0.0, 255.0));
    };
    const double diff_scale = 255.0 / (window_width / 8.0);
    for (int y = 0; y < ny; ++y) {
        std::uint8_t* row = img.data() + std::size_t(y) * width;
        for (int x = 0; x < nx; ++x) {
            const double a = ref.at(x, y, z), b = syn.at(x, y, z);
            row[x] = win(a);
            row[nx + sep + x] = win(b);
            row[2 * (nx + sep) + x] =
                std::uint8_t(std::clamp(std::abs(a - b) * diff_scale, 0.0, 255.0));
        }
    }
    write_png_gray8(path, width, ny, img);
}

}  // namespace kv2ct
