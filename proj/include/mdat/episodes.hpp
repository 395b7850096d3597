#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mdat/rng.hpp"
#include "mdat/tensor.hpp"

namespace mdat {

enum class Split { train, val, test };

std::string split_name(Split s);
Split parse_split(const std::string& s);

struct ClassEntry {
  std::string name;
  Split split = Split::train;
  std::vector<Tensor> images;  // each [c,h,w], values in [0,1]
};

// Class splits are disjoint by construction: every class carries exactly one
// split tag and global class ids are indices into `classes`.
struct Dataset {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<ClassEntry> classes;

  std::vector<int> class_ids(Split s) const;
};

// Index-based view into a Dataset. Local label c in [0, c_way) maps to global
// class id class_ids[c]; support and query index sets are disjoint per class.
struct Episode {
  int c_way = 0;
  int k_shot = 0;
  int q_per_class = 0;
  std::uint64_t seed = 0;
  std::vector<int> class_ids;
  std::vector<std::vector<int>> support_indices;  // [c_way][k_shot]
  std::vector<std::vector<int>> query_indices;    // [c_way][q_per_class]
};

const Tensor& support_image(const Dataset& ds, const Episode& ep, int c, int k);
const Tensor& query_image(const Dataset& ds, const Episode& ep, int c, int q);

// Manifest format: one line per class, `<class_name> <tensor_file> <split>`,
// lines starting with # ignored. Tensor paths resolve relative to the
// manifest's directory.
Dataset load_dataset(const std::string& manifest_path);

// Writes manifest.txt plus one tensor file per class into dir (created if
// missing). Returns the manifest path.
std::string save_dataset(const Dataset& ds, const std::string& dir);

// Procedural texture families: per-class oriented sinusoid plus a fixed blob
// layout, with per-image jitter and pixel noise. Deterministic in seed.
Dataset generate_synthetic(int n_classes, int images_per_class, int resolution,
                           std::uint64_t seed);

Episode sample_episode(const Dataset& ds, Split split, int c_way, int k_shot, int q_per_class,
                       Rng& rng);

}  // namespace mdat
