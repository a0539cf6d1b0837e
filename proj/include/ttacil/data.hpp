#pragma once

// Labelled image sets: a procedural toy generator and IDX (MNIST-style) files.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ttacil/prototypes.hpp"
#include "ttacil/rng.hpp"
#include "ttacil/tensor.hpp"

namespace ttacil {

/// One image [H×W×C] in [0,1] with its label and a dataset-unique id.
struct Sample {
  Tensor image;
  ClassId label = 0;
  std::uint64_t id = 0;
};

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> test;
  std::size_t num_classes = 0;
  std::size_t image_size = 0;
  std::size_t channels = 1;
};

// ---------------------------------------------------------------------------
// Procedural toy data

struct SynthSpec {
  std::size_t num_classes = 10;
  std::size_t train_per_class = 48;
  std::size_t test_per_class = 16;
  std::size_t image_size = 16;
  double pixel_noise = 0.05;
  double contrast_min = 0.3;
  double contrast_max = 0.45;
  double phase_jitter = 0.5;
  std::uint64_t seed = 7;
};

/// Five horizontally-symmetric pattern families (vertical grating, horizontal
/// grating, diagonal plaid, rings, checker) crossed with spatial frequency levels.
/// Each class has a fixed base phase; samples jitter phase, frequency, contrast and
/// get additive pixel noise.
inline Dataset synth_dataset(const SynthSpec& spec) {
  constexpr std::size_t kFamilies = 5;
  constexpr std::array<double, 3> kCycles{1.5, 3.5, 6.0};
  if (spec.num_classes < 2 || spec.num_classes > kFamilies * kCycles.size()) {
    throw std::invalid_argument("synth_dataset: num_classes must be in [2, 15]");
  }
  if (spec.image_size < 4 || spec.train_per_class == 0 || spec.test_per_class == 0) {
    throw std::invalid_argument("synth_dataset: image_size >= 4 and non-empty splits required");
  }
  const std::size_t S = spec.image_size;
  const double two_pi = 2.0 * std::numbers::pi;

  std::mt19937_64 class_rng(derive_seed({spec.seed, 0xC1A55}));
  std::uniform_real_distribution<double> base_phase(0.0, two_pi);
  std::vector<std::array<double, 2>> phases(spec.num_classes);
  for (auto& p : phases) p = {base_phase(class_rng), base_phase(class_rng)};

  auto render = [&](ClassId k, std::mt19937_64& rng) {
    const std::size_t family = static_cast<std::size_t>(k) % kFamilies;
    const double cycles = kCycles[static_cast<std::size_t>(k) / kFamilies];
    std::uniform_real_distribution<double> jit(-spec.phase_jitter, spec.phase_jitter);
    std::uniform_real_distribution<double> fscale(0.9, 1.1);
    std::uniform_real_distribution<double> amp(spec.contrast_min, spec.contrast_max);
    std::normal_distribution<double> noise(0.0, spec.pixel_noise);
    const double w = two_pi * cycles * fscale(rng) / static_cast<double>(S);
    const double p1 = phases[static_cast<std::size_t>(k)][0] + jit(rng);
    const double p2 = phases[static_cast<std::size_t>(k)][1] + jit(rng);
    const double a = amp(rng);
    const double c = 0.5 * static_cast<double>(S - 1);
    Tensor img(Shape{S, S, 1});
    for (std::size_t y = 0; y < S; ++y) {
      for (std::size_t x = 0; x < S; ++x) {
        const double u = static_cast<double>(x) - c, v = static_cast<double>(y) - c;
        double val = 0.0;
        switch (family) {
          case 0: val = std::sin(w * u + p1); break;
          case 1: val = std::sin(w * v + p1); break;
          case 2:
            val = 0.5 * (std::sin(w * (u + v) / std::numbers::sqrt2 + p1) +
                         std::sin(w * (v - u) / std::numbers::sqrt2 + p2));
            break;
          case 3: val = std::sin(w * std::sqrt(u * u + v * v) + p1); break;
          default: val = std::sin(w * u + p1) * std::sin(w * v + p2); break;
        }
        double pix = 0.5 + a * val;
        if (spec.pixel_noise > 0.0) pix += noise(rng);
        img[y * S + x] = std::clamp(pix, 0.0, 1.0);
      }
    }
    return img;
  };

  Dataset ds;
  ds.num_classes = spec.num_classes;
  ds.image_size = S;
  std::mt19937_64 rng(derive_seed({spec.seed, 0x5A3B1E}));
  std::uint64_t next_id = 0;
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    for (std::size_t i = 0; i < spec.train_per_class; ++i) {
      ds.train.push_back({render(static_cast<ClassId>(k), rng), static_cast<ClassId>(k), next_id++});
    }
  }
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    for (std::size_t i = 0; i < spec.test_per_class; ++i) {
      ds.test.push_back({render(static_cast<ClassId>(k), rng), static_cast<ClassId>(k), next_id++});
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// IDX files

class IdxError : public std::runtime_error {
 public:
  enum class Kind { Io, BadMagic, Truncated, CountMismatch };
  IdxError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxError::Kind::Io, "cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t off,
                               const std::string& path) {
  if (off + 4 > buf.size()) throw IdxError(IdxError::Kind::Truncated, "'" + path + "': truncated header");
  return (std::uint32_t{buf[off]} << 24) | (std::uint32_t{buf[off + 1]} << 16) |
         (std::uint32_t{buf[off + 2]} << 8) | std::uint32_t{buf[off + 3]};
}

inline void put_be32(std::vector<unsigned char>& buf, std::uint32_t v) {
  buf.push_back(static_cast<unsigned char>(v >> 24));
  buf.push_back(static_cast<unsigned char>(v >> 16));
  buf.push_back(static_cast<unsigned char>(v >> 8));
  buf.push_back(static_cast<unsigned char>(v));
}

inline void write_file(const std::string& path, const std::vector<unsigned char>& buf) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IdxError(IdxError::Kind::Io, "cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

}  // namespace detail

/// Label bytes from an IDX1 file (magic 0x00000801).
inline std::vector<ClassId> read_idx_labels(const std::string& path) {
  const auto buf = detail::read_file(path);
  const auto magic = detail::read_be32(buf, 0, path);
  if (magic != kIdxLabelMagic) {
    throw IdxError(IdxError::Kind::BadMagic, "'" + path + "': bad label magic");
  }
  const std::size_t n = detail::read_be32(buf, 4, path);
  if (buf.size() < 8 + n) throw IdxError(IdxError::Kind::Truncated, "'" + path + "': truncated labels");
  std::vector<ClassId> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = buf[8 + i];
  return out;
}

/// Images from an IDX3 file (magic 0x00000803), pixels scaled by 1/255 to [0,1].
inline std::vector<Tensor> read_idx_images(const std::string& path) {
  const auto buf = detail::read_file(path);
  const auto magic = detail::read_be32(buf, 0, path);
  if (magic != kIdxImageMagic) {
    throw IdxError(IdxError::Kind::BadMagic, "'" + path + "': bad image magic");
  }
  const std::size_t n = detail::read_be32(buf, 4, path);
  const std::size_t rows = detail::read_be32(buf, 8, path);
  const std::size_t cols = detail::read_be32(buf, 12, path);
  if (rows == 0 || cols == 0) throw IdxError(IdxError::Kind::Truncated, "'" + path + "': zero image size");
  const std::size_t per = rows * cols;
  if (buf.size() < 16 + n * per) {
    throw IdxError(IdxError::Kind::Truncated, "'" + path + "': truncated pixel payload");
  }
  std::vector<Tensor> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor img(Shape{rows, cols, 1});
    for (std::size_t j = 0; j < per; ++j) img[j] = static_cast<double>(buf[16 + i * per + j]) / 255.0;
    out.push_back(std::move(img));
  }
  return out;
}

/// Paired image/label files. Sample ids are assigned from `first_id` upward.
inline std::vector<Sample> load_idx(const std::string& images_path, const std::string& labels_path,
                                    std::uint64_t first_id = 0) {
  auto images = read_idx_images(images_path);
  auto labels = read_idx_labels(labels_path);
  if (images.size() != labels.size()) {
    throw IdxError(IdxError::Kind::CountMismatch,
                   std::to_string(images.size()) + " images but " + std::to_string(labels.size()) + " labels");
  }
  std::vector<Sample> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    out.push_back({std::move(images[i]), labels[i], first_id + i});
  }
  return out;
}

inline void write_idx_labels(const std::string& path, const std::vector<ClassId>& labels) {
  std::vector<unsigned char> buf;
  detail::put_be32(buf, kIdxLabelMagic);
  detail::put_be32(buf, static_cast<std::uint32_t>(labels.size()));
  for (ClassId l : labels) {
    if (l < 0 || l > 255) throw std::invalid_argument("IDX labels must fit in one byte");
    buf.push_back(static_cast<unsigned char>(l));
  }
  detail::write_file(path, buf);
}

/// Quantises pixels to round(255·x).
inline void write_idx_images(const std::string& path, const std::vector<Tensor>& images) {
  if (images.empty()) throw std::invalid_argument("write_idx_images: no images");
  const std::size_t rows = images.front().dim(0), cols = images.front().dim(1);
  std::vector<unsigned char> buf;
  detail::put_be32(buf, kIdxImageMagic);
  detail::put_be32(buf, static_cast<std::uint32_t>(images.size()));
  detail::put_be32(buf, static_cast<std::uint32_t>(rows));
  detail::put_be32(buf, static_cast<std::uint32_t>(cols));
  for (const auto& img : images) {
    if (img.numel() != rows * cols) throw ShapeError("write_idx_images: mixed image sizes");
    for (double v : img.data()) {
      buf.push_back(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
    }
  }
  detail::write_file(path, buf);
}

}  // namespace ttacil
