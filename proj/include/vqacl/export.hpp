#pragma once

// Inspection artifacts: per-sample attention heatmaps as CSV, learned
// transforms as CSV rows, and crop-rectangle overlays drawn onto copies of
// the input images.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vqacl/attention.hpp"
#include "vqacl/synth.hpp"

namespace vqacl {

inline void write_attention_csv(const std::filesystem::path& path,
                                const std::vector<double>& heatmap, int h, int w) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  char buf[64];
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g", heatmap[static_cast<std::size_t>(r * w + c)]);
      f << (c ? "," : "") << buf;
    }
    f << '\n';
  }
}

struct TransformRow {
  int id = 0;
  int transformer = 1;
  double s1 = 1.0, s2 = 1.0, tx = 0.0, ty = 0.0;
};

inline void write_transforms_csv(const std::filesystem::path& path,
                                 const std::vector<TransformRow>& rows) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "id,transformer,s1,s2,tx,ty\n";
  char buf[64];
  for (const TransformRow& r : rows) {
    f << r.id << ',' << r.transformer;
    for (double v : {r.s1, r.s2, r.tx, r.ty}) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      f << ',' << buf;
    }
    f << '\n';
  }
}

// Draws the sampled region [t - s, t + s] (normalized coordinates) of each
// transform as a one-pixel rectangle outline on a copy of the image.
inline std::vector<std::uint8_t> render_transform_overlay(
    std::vector<std::uint8_t> rgb, int size, const TransformRow& t1, const TransformRow& t2) {
  const auto to_px = [size](double coord) {
    int p = static_cast<int>(std::lround((coord + 1.0) * 0.5 * (size - 1)));
    return std::min(std::max(p, 0), size - 1);
  };
  const auto draw = [&](const TransformRow& t, std::uint8_t r, std::uint8_t g,
                        std::uint8_t b) {
    const int x0 = to_px(t.tx - t.s1), x1 = to_px(t.tx + t.s1);
    const int y0 = to_px(t.ty - t.s2), y1 = to_px(t.ty + t.s2);
    const auto put = [&](int x, int y) {
      const std::size_t p = (static_cast<std::size_t>(y) * size + x) * 3;
      rgb[p] = r;
      rgb[p + 1] = g;
      rgb[p + 2] = b;
    };
    for (int x = x0; x <= x1; ++x) {
      put(x, y0);
      put(x, y1);
    }
    for (int y = y0; y <= y1; ++y) {
      put(x0, y);
      put(x1, y);
    }
  };
  draw(t1, 255, 0, 255);
  draw(t2, 0, 255, 255);
  return rgb;
}

}  // namespace vqacl
