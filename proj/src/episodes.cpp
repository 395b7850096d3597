#include "mdat/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mdat {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'F', 'S', 'D', 'S'};
constexpr std::uint16_t kVersion = 1;

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, const std::string& ident) : b_(bytes), ident_(ident) {}
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint8_t>(b_[pos_]) |
                      (static_cast<std::uint16_t>(static_cast<std::uint8_t>(b_[pos_ + 1])) << 8);
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(b_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  void expect_magic() {
    need(4);
    if (std::memcmp(b_.data() + pos_, kMagic, 4) != 0)
      throw std::runtime_error("episodes: " + ident_ + ": bad magic, not a dataset tensor file");
    pos_ += 4;
  }
  void expect_end() const {
    if (pos_ != b_.size())
      throw std::runtime_error("episodes: " + ident_ + ": trailing bytes after tensor data");
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw std::runtime_error("episodes: " + ident_ + ": truncated file");
  }
  const std::string& b_;
  std::string ident_;
  std::size_t pos_ = 0;
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("episodes: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("episodes: cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("episodes: write failed for " + path.string());
}

std::vector<Tensor> read_class_file(const fs::path& path, const std::string& class_name, int& c,
                                    int& h, int& w) {
  const std::string ident = path.string() + " (class " + class_name + ")";
  const std::string bytes = read_file(path);
  ByteReader r(bytes, ident);
  r.expect_magic();
  const std::uint16_t ver = r.u16();
  if (ver != kVersion)
    throw std::runtime_error("episodes: " + ident + ": unsupported version " +
                             std::to_string(ver));
  const std::uint32_t count = r.u32();
  c = static_cast<int>(r.u32());
  h = static_cast<int>(r.u32());
  w = static_cast<int>(r.u32());
  if (count == 0) throw std::runtime_error("episodes: " + ident + ": class below minimum size");
  if (c <= 0 || h <= 0 || w <= 0)
    throw std::runtime_error("episodes: " + ident + ": malformed header dimensions");
  std::vector<Tensor> images;
  images.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor t({c, h, w});
    for (std::size_t p = 0; p < t.numel(); ++p) {
      const float v = r.f32();
      if (!(v >= 0.0f && v <= 1.0f))
        throw std::runtime_error("episodes: " + ident + ": pixel out of [0,1] in image " +
                                 std::to_string(i));
      t.data[p] = static_cast<double>(v);
    }
    images.push_back(std::move(t));
  }
  r.expect_end();
  return images;
}

std::string class_file_bytes(const ClassEntry& cls, int c, int h, int w) {
  std::string out;
  out.reserve(22 + cls.images.size() * static_cast<std::size_t>(c) * h * w * 4);
  out.append(kMagic, 4);
  put_u16(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(cls.images.size()));
  put_u32(out, static_cast<std::uint32_t>(c));
  put_u32(out, static_cast<std::uint32_t>(h));
  put_u32(out, static_cast<std::uint32_t>(w));
  for (const Tensor& img : cls.images)
    for (double v : img.data) put_f32(out, static_cast<float>(v));
  return out;
}

// Draws k distinct values from [0, n) via a partial Fisher-Yates pass.
std::vector<int> draw_without_replacement(int n, int k, Rng& rng) {
  std::vector<int> pool(n);
  for (int i = 0; i < n; ++i) pool[i] = i;
  for (int i = 0; i < k; ++i) {
    const int j = i + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n - i)));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

}  // namespace

std::string split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw std::invalid_argument("episodes: unknown split '" + s + "'");
}

std::vector<int> Dataset::class_ids(Split s) const {
  std::vector<int> ids;
  for (std::size_t i = 0; i < classes.size(); ++i)
    if (classes[i].split == s) ids.push_back(static_cast<int>(i));
  return ids;
}

const Tensor& support_image(const Dataset& ds, const Episode& ep, int c, int k) {
  return ds.classes[ep.class_ids[c]].images[ep.support_indices[c][k]];
}

const Tensor& query_image(const Dataset& ds, const Episode& ep, int c, int q) {
  return ds.classes[ep.class_ids[c]].images[ep.query_indices[c][q]];
}

Dataset load_dataset(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("episodes: cannot open manifest " + manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();
  Dataset ds;
  std::set<std::string> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string name, file, split;
    if (!(ls >> name)) continue;
    if (name[0] == '#') continue;
    std::string extra;
    if (!(ls >> file >> split) || (ls >> extra))
      throw std::runtime_error("episodes: " + manifest_path + ":" + std::to_string(line_no) +
                               ": malformed manifest line, want <class> <file> <split>");
    if (!seen.insert(name).second)
      throw std::runtime_error("episodes: " + manifest_path + ": class '" + name +
                               "' listed more than once (split assignment must be unique)");
    ClassEntry cls;
    cls.name = name;
    cls.split = parse_split(split);
    fs::path fpath(file);
    if (fpath.is_relative()) fpath = base / fpath;
    int c = 0, h = 0, w = 0;
    cls.images = read_class_file(fpath, name, c, h, w);
    if (ds.classes.empty()) {
      ds.channels = c;
      ds.height = h;
      ds.width = w;
    } else if (c != ds.channels || h != ds.height || w != ds.width) {
      throw std::runtime_error("episodes: class '" + name + "' has image shape " +
                               std::to_string(c) + "x" + std::to_string(h) + "x" +
                               std::to_string(w) + ", dataset uses " +
                               std::to_string(ds.channels) + "x" + std::to_string(ds.height) +
                               "x" + std::to_string(ds.width));
    }
    ds.classes.push_back(std::move(cls));
  }
  if (ds.classes.empty())
    throw std::runtime_error("episodes: manifest " + manifest_path + " lists no classes");
  return ds;
}

std::string save_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(dir);
  std::string manifest;
  for (const ClassEntry& cls : ds.classes) {
    const std::string fname = cls.name + ".fsds";
    write_file(fs::path(dir) / fname, class_file_bytes(cls, ds.channels, ds.height, ds.width));
    manifest += cls.name + " " + fname + " " + split_name(cls.split) + "\n";
  }
  const fs::path mpath = fs::path(dir) / "manifest.txt";
  write_file(mpath, manifest);
  return mpath.string();
}

Dataset generate_synthetic(int n_classes, int images_per_class, int resolution,
                           std::uint64_t seed) {
  if (n_classes < 2) throw std::invalid_argument("episodes: need at least 2 classes");
  if (images_per_class < 1) throw std::invalid_argument("episodes: need at least 1 image/class");
  if (resolution < 4) throw std::invalid_argument("episodes: resolution too small");

  // Each class carries two kinds of signal. The oriented sinusoid and the
  // blobs are sturdy: moderate amplitude, noisy, jittered per image. The
  // per-class pixel code is the opposite: noiseless and perfectly stable,
  // but with an amplitude small enough that a budget-limited perturbation
  // can cancel it. Models that shortcut onto the code separate cleanly and
  // collapse under attack; models pushed off it must use the sturdy signal.
  constexpr double kPi = 3.14159265358979323846;
  constexpr double kSinAmp = 0.10;
  constexpr double kNoiseSigma = 0.07;
  constexpr double kPhaseJitter = 0.30;
  constexpr double kThetaJitter = 0.04;
  constexpr double kFreqJitter = 0.03;
  constexpr double kBlobAmp = 0.10;
  constexpr double kBlobJitter = 0.04;
  constexpr double kCodeAmp = 0.02;
  constexpr int kBlobs = 2;

  const int n_train = (n_classes * 3) / 5;
  const int n_val = n_classes / 5;

  Dataset ds;
  ds.channels = 3;
  ds.height = resolution;
  ds.width = resolution;

  for (int c = 0; c < n_classes; ++c) {
    ClassEntry cls;
    {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "class_%02d", c);
      cls.name = buf;
    }
    cls.split = c < n_train ? Split::train : (c < n_train + n_val ? Split::val : Split::test);

    Rng crng = derive_rng(seed, "synth-class", static_cast<std::uint64_t>(c));
    const double theta_c = (c + 0.5) / n_classes * kPi;
    const double freq_c = 4.0 + 1.5 * (c % 3);
    const double phase_c = crng.uniform(0.0, 2.0 * kPi);
    double color[3];
    for (double& v : color) v = crng.uniform(0.7, 1.0);
    double bx[kBlobs], by[kBlobs], bs[kBlobs], ba[kBlobs], bw[kBlobs][3];
    for (int b = 0; b < kBlobs; ++b) {
      bx[b] = crng.uniform(0.2, 0.8);
      by[b] = crng.uniform(0.2, 0.8);
      bs[b] = crng.uniform(0.10, 0.18);
      ba[b] = (crng.uniform() < 0.5 ? -1.0 : 1.0) * kBlobAmp;
      for (double& v : bw[b]) v = crng.uniform(0.5, 1.0);
    }
    // 2x2-block binary mask, constant within a class across images
    const int cb = (resolution + 1) / 2;
    std::vector<double> code(static_cast<std::size_t>(cb) * cb);
    for (double& v : code) v = (crng.uniform() < 0.5 ? -1.0 : 1.0) * kCodeAmp;

    for (int i = 0; i < images_per_class; ++i) {
      Rng irng = derive_rng(seed, "synth-image", static_cast<std::uint64_t>(c),
                            static_cast<std::uint64_t>(i));
      const double theta = theta_c + kThetaJitter * irng.normal();
      const double freq = freq_c * (1.0 + kFreqJitter * irng.normal());
      const double phase = phase_c + kPhaseJitter * irng.normal();
      double jx[kBlobs], jy[kBlobs];
      for (int b = 0; b < kBlobs; ++b) {
        jx[b] = bx[b] + kBlobJitter * irng.normal();
        jy[b] = by[b] + kBlobJitter * irng.normal();
      }
      const double ct = std::cos(theta), st = std::sin(theta);

      Tensor img({3, resolution, resolution});
      std::vector<double> pattern(static_cast<std::size_t>(resolution) * resolution);
      std::vector<double> blob(pattern.size(), 0.0);
      for (int y = 0; y < resolution; ++y) {
        const double v = (y + 0.5) / resolution;
        for (int x = 0; x < resolution; ++x) {
          const double u = (x + 0.5) / resolution;
          const std::size_t p = static_cast<std::size_t>(y) * resolution + x;
          pattern[p] = std::sin(2.0 * kPi * freq * (u * ct + v * st) + phase);
          for (int b = 0; b < kBlobs; ++b) {
            const double dx = u - jx[b], dy = v - jy[b];
            blob[p] += ba[b] * std::exp(-(dx * dx + dy * dy) / (2.0 * bs[b] * bs[b])) *
                       (bw[b][0] + bw[b][1] + bw[b][2]) / 3.0;
          }
          blob[p] += code[static_cast<std::size_t>(y / 2) * cb + x / 2];
        }
      }
      for (int ch = 0; ch < 3; ++ch) {
        double* plane = img.ptr() + static_cast<std::size_t>(ch) * pattern.size();
        for (std::size_t p = 0; p < pattern.size(); ++p) {
          double val = 0.5 + kSinAmp * color[ch] * pattern[p] + blob[p] +
                       kNoiseSigma * irng.normal();
          val = std::min(1.0, std::max(0.0, val));
          // Quantize through the storage precision so save/load is lossless.
          plane[p] = static_cast<double>(static_cast<float>(val));
        }
      }
      cls.images.push_back(std::move(img));
    }
    ds.classes.push_back(std::move(cls));
  }
  return ds;
}

Episode sample_episode(const Dataset& ds, Split split, int c_way, int k_shot, int q_per_class,
                       Rng& rng) {
  if (c_way < 1 || k_shot < 1 || q_per_class < 1)
    throw std::invalid_argument("episodes: way/shot/queries must be positive");
  const std::vector<int> ids = ds.class_ids(split);
  if (static_cast<int>(ids.size()) < c_way)
    throw std::runtime_error("episodes: split '" + split_name(split) + "' has " +
                             std::to_string(ids.size()) + " classes, need " +
                             std::to_string(c_way));
  Episode ep;
  ep.c_way = c_way;
  ep.k_shot = k_shot;
  ep.q_per_class = q_per_class;
  const std::vector<int> pick = draw_without_replacement(static_cast<int>(ids.size()), c_way, rng);
  for (int p : pick) ep.class_ids.push_back(ids[p]);
  for (int c = 0; c < c_way; ++c) {
    const ClassEntry& cls = ds.classes[ep.class_ids[c]];
    const int n = static_cast<int>(cls.images.size());
    if (n < k_shot + q_per_class)
      throw std::runtime_error("episodes: class '" + cls.name + "' has " + std::to_string(n) +
                               " images, need " + std::to_string(k_shot + q_per_class));
    std::vector<int> idx = draw_without_replacement(n, k_shot + q_per_class, rng);
    ep.support_indices.emplace_back(idx.begin(), idx.begin() + k_shot);
    ep.query_indices.emplace_back(idx.begin() + k_shot, idx.end());
  }
  return ep;
}

}  // namespace mdat
