#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "omnidet/core.hpp"
#include "omnidet/image_io.hpp"
#include "omnidet/tensor.hpp"

namespace omnidet::data {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 step over the combined value
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct SampleRecord {
  int id = 0;
  std::string path;
  Granularity granularity = Granularity::FULL;
  std::vector<GroundTruthBox> boxes;  // present iff FULL
  std::vector<int> labels;            // present iff FULL or WEAK
};

struct DatasetManifest {
  std::string split;
  std::uint64_t seed = 0;
  int num_classes = 0;
  int image_size = 0;
  std::vector<SampleRecord> records;
};

using HiddenSidecar = std::map<int, std::vector<GroundTruthBox>>;

struct BatchSpec {
  int n_full = 2, n_weak = 2, n_unlabeled = 2;
  int total() const { return n_full + n_weak + n_unlabeled; }
};

// ---------------------------------------------------------------------------
// Synthetic lesion rendering. Nine shape families, one per class, each with
// its own intensity so classes are separable by construction.
// ---------------------------------------------------------------------------

namespace detail {

inline void render_lesion(Tensor& img, int class_id, int x0, int y0, int s) {
  double amp = 0.40 + 0.05 * (class_id % 3);
  double cx = x0 + s / 2.0, cy = y0 + s / 2.0, r = s / 2.0;
  for (int y = y0; y < y0 + s; ++y)
    for (int x = x0; x < x0 + s; ++x) {
      double u = (x - cx) / r, v = (y - cy) / r;  // in [-1,1]
      double rad = std::sqrt(u * u + v * v);
      bool on = false;
      switch (class_id % 9) {
        case 0: on = rad <= 1.0; break;                                   // disk
        case 1: on = rad <= 1.0 && rad >= 0.55; break;                    // ring
        case 2: on = true; break;                                         // square
        case 3: on = std::max(std::fabs(u), std::fabs(v)) >= 0.55; break; // frame
        case 4: on = std::fabs(u) <= 0.3 || std::fabs(v) <= 0.3; break;   // cross
        case 5: on = std::fmod(std::fabs(u + v) * 2.5, 1.0) < 0.5; break; // diag stripes
        case 6: on = std::fmod(std::fabs(v) * 2.5, 1.0) < 0.5; break;     // h stripes
        case 7: on = (static_cast<int>((u + 1) * 2) + static_cast<int>((v + 1) * 2)) % 2 == 0; break;
        case 8: on = v >= -0.9 && std::fabs(u) <= (v + 1.0) / 2.0; break; // triangle
      }
      if (on) img.at2(y, x) = std::clamp(img.at2(y, x) + amp, 0.0, 1.0);
    }
}

inline Tensor render_background(int size, std::mt19937_64& rng) {
  Tensor img = Tensor::full({size, size}, 0.18);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  // A few smooth bumps and waves so the background is structured, not flat.
  for (int b = 0; b < 3; ++b) {
    double bx = uni(rng) * size, by = uni(rng) * size;
    double sg = size * (0.15 + 0.2 * uni(rng)), amp = 0.04 + 0.06 * uni(rng);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        double d2 = ((x - bx) * (x - bx) + (y - by) * (y - by)) / (2 * sg * sg);
        img.at2(y, x) += amp * std::exp(-d2);
      }
  }
  std::normal_distribution<double> noise(0.0, 0.02);
  for (double& v : img.v) v = std::clamp(v + noise(rng), 0.0, 1.0);
  return img;
}

}  // namespace detail

// Pure function of the seed: images with 0-4 square lesions of log-uniform
// size, boxes recorded exactly.
inline std::pair<DatasetManifest, std::vector<Tensor>> generate_synthetic(
    std::uint64_t seed, int n_images, int image_size, int num_classes,
    const std::string& split = "train") {
  if (image_size < 32) throw std::invalid_argument("generate_synthetic: image size too small");
  if (num_classes < 1 || num_classes > 9)
    throw std::invalid_argument("generate_synthetic: class count must be in [1,9]");
  DatasetManifest manifest;
  manifest.split = split;
  manifest.seed = seed;
  manifest.num_classes = num_classes;
  manifest.image_size = image_size;
  std::vector<Tensor> images;
  std::mt19937_64 rng(mix_seed(seed, std::hash<std::string>{}(split)));
  std::uniform_int_distribution<int> count_dist(0, 4);
  std::uniform_int_distribution<int> class_dist(0, num_classes - 1);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  double lo = std::log(10.0), hi = std::log(0.85 * image_size);
  for (int i = 0; i < n_images; ++i) {
    Tensor img = detail::render_background(image_size, rng);
    SampleRecord rec;
    rec.id = i;
    rec.granularity = Granularity::FULL;
    int n_lesions = count_dist(rng);
    for (int l = 0; l < n_lesions; ++l) {
      int s = static_cast<int>(std::exp(lo + (hi - lo) * uni(rng)));
      s = std::min(s, image_size - 2);
      int cls = class_dist(rng);
      for (int attempt = 0; attempt < 20; ++attempt) {
        int x0 = static_cast<int>(uni(rng) * (image_size - s));
        int y0 = static_cast<int>(uni(rng) * (image_size - s));
        GroundTruthBox box{static_cast<double>(x0), static_cast<double>(y0),
                           static_cast<double>(x0 + s), static_cast<double>(y0 + s), cls};
        bool clash = false;
        for (const auto& b : rec.boxes) {
          double ix = std::max(0.0, std::min(box.x_max, b.x_max) - std::max(box.x_min, b.x_min));
          double iy = std::max(0.0, std::min(box.y_max, b.y_max) - std::max(box.y_min, b.y_min));
          if (ix * iy > 0.1 * std::min(box.area(), b.area())) {
            clash = true;
            break;
          }
        }
        if (clash) continue;
        detail::render_lesion(img, cls, x0, y0, s);
        rec.boxes.push_back(box);
        break;
      }
    }
    rec.labels = labels_from_boxes(rec.boxes, num_classes);
    manifest.records.push_back(std::move(rec));
    images.push_back(std::move(img));
  }
  return {std::move(manifest), std::move(images)};
}

// Random partition into FULL/WEAK/UNLABELED. WEAK drops boxes, UNLABELED
// drops boxes and labels; dropped ground truth moves to the hidden sidecar.
inline HiddenSidecar assign_granularity(DatasetManifest& manifest, double r_full,
                                        double r_weak, double r_unlabeled,
                                        std::uint64_t seed) {
  if (std::fabs(r_full + r_weak + r_unlabeled - 1.0) > 1e-9)
    throw std::invalid_argument("assign_granularity: ratios must sum to 1");
  std::vector<int> idx(manifest.records.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, 0x6772616eULL));
  std::shuffle(idx.begin(), idx.end(), rng);
  std::size_t n = idx.size();
  std::size_t n_full = static_cast<std::size_t>(std::lround(r_full * n));
  std::size_t n_weak = static_cast<std::size_t>(std::lround(r_weak * n));
  n_weak = std::min(n_weak, n - n_full);
  HiddenSidecar hidden;
  for (std::size_t i = 0; i < n; ++i) {
    SampleRecord& rec = manifest.records[idx[i]];
    if (i < n_full) {
      rec.granularity = Granularity::FULL;
    } else {
      hidden[rec.id] = rec.boxes;
      rec.boxes.clear();
      if (i < n_full + n_weak) {
        rec.granularity = Granularity::WEAK;
      } else {
        rec.granularity = Granularity::UNLABELED;
        rec.labels.clear();
      }
    }
  }
  return hidden;
}

// ---------------------------------------------------------------------------
// On-disk layout: <dir>/manifest.jsonl, <dir>/images/NNNNNN.png, and the
// evaluation-only <dir>/hidden.jsonl.
// ---------------------------------------------------------------------------

// Guard against label leakage: the sidecar may only be read while an
// evaluation-scoped gate is open.
inline bool& sidecar_access_allowed() {
  static bool allowed = false;
  return allowed;
}

namespace detail {

inline nlohmann::json box_to_json(const GroundTruthBox& b) {
  return {{"x_min", b.x_min}, {"y_min", b.y_min}, {"x_max", b.x_max},
          {"y_max", b.y_max}, {"class_id", b.class_id}};
}

inline GroundTruthBox box_from_json(const nlohmann::json& j) {
  return {j.at("x_min"), j.at("y_min"), j.at("x_max"), j.at("y_max"), j.at("class_id")};
}

}  // namespace detail

inline void write_dataset(const std::string& dir, DatasetManifest& manifest,
                          const std::vector<Tensor>& images, const HiddenSidecar& hidden) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  std::ofstream mf(fs::path(dir) / "manifest.jsonl");
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    SampleRecord& rec = manifest.records[i];
    char name[32];
    std::snprintf(name, sizeof(name), "images/%06d.png", rec.id);
    rec.path = name;
    write_gray_png((fs::path(dir) / rec.path).string(), images[i]);
    nlohmann::json j{{"id", rec.id}, {"path", rec.path},
                     {"granularity", to_string(rec.granularity)}};
    if (rec.granularity == Granularity::FULL) {
      auto boxes = nlohmann::json::array();
      for (const auto& b : rec.boxes) boxes.push_back(detail::box_to_json(b));
      j["boxes"] = boxes;
    }
    if (rec.granularity != Granularity::UNLABELED) j["labels"] = rec.labels;
    mf << j.dump() << "\n";
  }
  std::ofstream meta(fs::path(dir) / "meta.json");
  meta << nlohmann::json{{"split", manifest.split}, {"seed", manifest.seed},
                          {"num_classes", manifest.num_classes},
                          {"image_size", manifest.image_size}}
              .dump(2);
  std::ofstream hf(fs::path(dir) / "hidden.jsonl");
  for (const auto& [id, boxes] : hidden) {
    auto arr = nlohmann::json::array();
    for (const auto& b : boxes) arr.push_back(detail::box_to_json(b));
    hf << nlohmann::json{{"id", id}, {"boxes", arr}}.dump() << "\n";
  }
}

inline DatasetManifest load_manifest(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream meta(fs::path(dir) / "meta.json");
  if (!meta) throw std::runtime_error("missing meta.json in " + dir);
  nlohmann::json jm = nlohmann::json::parse(meta);
  DatasetManifest manifest;
  manifest.split = jm.at("split");
  manifest.seed = jm.at("seed");
  manifest.num_classes = jm.at("num_classes");
  manifest.image_size = jm.at("image_size");
  std::ifstream mf(fs::path(dir) / "manifest.jsonl");
  if (!mf) throw std::runtime_error("missing manifest.jsonl in " + dir);
  std::string line;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    SampleRecord rec;
    rec.id = j.at("id");
    rec.path = j.at("path");
    rec.granularity = granularity_from_string(j.at("granularity"));
    if (j.contains("boxes"))
      for (const auto& b : j["boxes"]) rec.boxes.push_back(detail::box_from_json(b));
    if (j.contains("labels")) rec.labels = j["labels"].get<std::vector<int>>();
    manifest.records.push_back(std::move(rec));
  }
  return manifest;
}

// Evaluation-only: throws unless the sidecar gate is open.
inline HiddenSidecar load_hidden_sidecar(const std::string& dir) {
  if (!sidecar_access_allowed())
    throw std::logic_error("hidden sidecar read outside an evaluation gate");
  namespace fs = std::filesystem;
  std::ifstream hf(fs::path(dir) / "hidden.jsonl");
  if (!hf) throw std::runtime_error("missing hidden.jsonl in " + dir);
  HiddenSidecar hidden;
  std::string line;
  while (std::getline(hf, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    std::vector<GroundTruthBox> boxes;
    for (const auto& b : j["boxes"]) boxes.push_back(detail::box_from_json(b));
    hidden[j.at("id").get<int>()] = std::move(boxes);
  }
  return hidden;
}

inline Sample load_sample(const std::string& dir, const SampleRecord& rec) {
  namespace fs = std::filesystem;
  Sample s;
  s.id = rec.id;
  s.image = read_gray_png((fs::path(dir) / rec.path).string());
  s.granularity = rec.granularity;
  s.boxes = rec.boxes;
  s.image_labels = rec.labels;
  return s;
}

// ---------------------------------------------------------------------------
// Augmentation: horizontal flip (p=0.5) and up to 5% translation, with the
// image resized to the configured square size first.
// ---------------------------------------------------------------------------

struct AugmentParams {
  bool flip = false;
  double dx_frac = 0, dy_frac = 0;  // in [-0.05, 0.05]
  double noise_std = 0;             // per-pixel jitter, student view only
  std::uint64_t noise_seed = 0;
};

inline AugmentParams draw_augment_params(std::mt19937_64& rng, double noise_std = 0.0) {
  AugmentParams p;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  p.flip = uni(rng) < 0.5;
  p.dx_frac = (uni(rng) * 2 - 1) * 0.05;
  p.dy_frac = (uni(rng) * 2 - 1) * 0.05;
  p.noise_std = noise_std;
  p.noise_seed = rng();
  return p;
}

inline Sample augment(const Sample& in, const AugmentParams& params, int target_size) {
  Sample out = in;
  out.teacher_view = Tensor();
  int h = in.image.shape[0], w = in.image.shape[1];
  double sy = static_cast<double>(target_size) / h;
  double sx = static_cast<double>(target_size) / w;
  Tensor img = bilinear_resize2d(in.image, target_size, target_size);
  for (auto& b : out.boxes) {
    b.x_min *= sx;
    b.x_max *= sx;
    b.y_min *= sy;
    b.y_max *= sy;
  }
  int W = target_size;
  if (params.flip) {
    Tensor flipped({W, W});
    for (int y = 0; y < W; ++y)
      for (int x = 0; x < W; ++x) flipped.at2(y, x) = img.at2(y, W - 1 - x);
    img = std::move(flipped);
    for (auto& b : out.boxes) {
      double x0 = W - b.x_max, x1 = W - b.x_min;
      b.x_min = x0;
      b.x_max = x1;
    }
  }
  int dx = static_cast<int>(std::lround(params.dx_frac * W));
  int dy = static_cast<int>(std::lround(params.dy_frac * W));
  if (dx != 0 || dy != 0) {
    Tensor shifted({W, W});
    for (int y = 0; y < W; ++y)
      for (int x = 0; x < W; ++x) {
        int sy2 = y - dy, sx2 = x - dx;
        shifted.at2(y, x) = (sy2 >= 0 && sy2 < W && sx2 >= 0 && sx2 < W)
                                ? img.at2(sy2, sx2)
                                : 0.0;
      }
    img = std::move(shifted);
    for (auto& b : out.boxes) {
      b.x_min += dx;
      b.x_max += dx;
      b.y_min += dy;
      b.y_max += dy;
    }
  }
  // Clip into the image; keep at least a one-pixel sliver so the derived
  // image labels never change under augmentation.
  for (auto& b : out.boxes) {
    b.x_min = std::clamp(b.x_min, 0.0, static_cast<double>(W - 1));
    b.y_min = std::clamp(b.y_min, 0.0, static_cast<double>(W - 1));
    b.x_max = std::clamp(b.x_max, b.x_min + 1.0, static_cast<double>(W));
    b.y_max = std::clamp(b.y_max, b.y_min + 1.0, static_cast<double>(W));
  }
  if (params.noise_std > 0) {
    out.teacher_view = img;
    std::mt19937_64 noise_rng(params.noise_seed);
    std::normal_distribution<double> jitter(0.0, params.noise_std);
    for (double& v : img.v) v = std::clamp(v + jitter(noise_rng), 0.0, 1.0);
  }
  out.image = std::move(img);
  return out;
}

// ---------------------------------------------------------------------------
// Batch composition: fixed quotas per granularity, drawn without replacement
// within an epoch, reshuffling per epoch. A pure function of
// (manifest, spec, seed, step), which makes resume trivially exact.
// ---------------------------------------------------------------------------

inline std::vector<int> compose_batch(const DatasetManifest& manifest,
                                      const BatchSpec& spec, std::uint64_t seed,
                                      long long step) {
  std::vector<int> pools[3];
  for (std::size_t i = 0; i < manifest.records.size(); ++i)
    pools[static_cast<int>(manifest.records[i].granularity)].push_back(static_cast<int>(i));
  int quotas[3] = {spec.n_full, spec.n_weak, spec.n_unlabeled};
  std::vector<int> batch;
  for (int g = 0; g < 3; ++g) {
    if (quotas[g] == 0) continue;
    if (pools[g].empty())
      throw std::invalid_argument("compose_batch: empty pool for nonzero quota");
    for (int i = 0; i < quotas[g]; ++i) {
      long long gidx = step * quotas[g] + i;
      long long epoch = gidx / static_cast<long long>(pools[g].size());
      long long pos = gidx % static_cast<long long>(pools[g].size());
      std::vector<int> order = pools[g];
      std::mt19937_64 rng(mix_seed(seed, mix_seed(static_cast<std::uint64_t>(g) + 17,
                                                  static_cast<std::uint64_t>(epoch))));
      std::shuffle(order.begin(), order.end(), rng);
      batch.push_back(order[pos]);
    }
  }
  return batch;
}

}  // namespace omnidet::data
