#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "mdat/episodes.hpp"
#include "mdat/rng.hpp"
#include "mdat/tensor.hpp"

using namespace mdat;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("mdat_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// independent little-endian writers, so the expected wire format is pinned
// down by the test and not by the code under test
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

std::string tensor_file_bytes(int count, int c, int h, int w, float fill,
                              std::uint16_t version = 1, const char* magic = "FSDS") {
  std::string out(magic, 4);
  put_u16(out, version);
  put_u32(out, static_cast<std::uint32_t>(count));
  put_u32(out, static_cast<std::uint32_t>(c));
  put_u32(out, static_cast<std::uint32_t>(h));
  put_u32(out, static_cast<std::uint32_t>(w));
  for (int i = 0; i < count * c * h * w; ++i) put_f32(out, fill);
  return out;
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

double image_dist(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a.data[i] - b.data[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace

TEST_CASE("synthetic datasets are deterministic in the seed") {
  const Dataset a = generate_synthetic(5, 4, 8, 123);
  const Dataset b = generate_synthetic(5, 4, 8, 123);
  const Dataset c = generate_synthetic(5, 4, 8, 124);
  REQUIRE(a.classes.size() == 5);
  for (int i = 0; i < 5; ++i) {
    CHECK(a.classes[i].name == b.classes[i].name);
    CHECK(a.classes[i].split == b.classes[i].split);
    for (int j = 0; j < 4; ++j) CHECK(a.classes[i].images[j].data == b.classes[i].images[j].data);
  }
  bool any_diff = false;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 4; ++j)
      if (a.classes[i].images[j].data != c.classes[i].images[j].data) any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("class splits follow the 3/5, 1/5 rule") {
  const auto split_sizes = [](const Dataset& ds) {
    int tr = 0, va = 0, te = 0;
    for (const ClassEntry& c : ds.classes) {
      if (c.split == Split::train) ++tr;
      if (c.split == Split::val) ++va;
      if (c.split == Split::test) ++te;
    }
    return std::vector<int>{tr, va, te};
  };
  CHECK(split_sizes(generate_synthetic(20, 2, 4, 1)) == std::vector<int>{12, 4, 4});
  CHECK(split_sizes(generate_synthetic(25, 2, 4, 1)) == std::vector<int>{15, 5, 5});
  CHECK(split_sizes(generate_synthetic(10, 2, 4, 1)) == std::vector<int>{6, 2, 2});
  CHECK(split_sizes(generate_synthetic(3, 2, 4, 1)) == std::vector<int>{1, 0, 2});
}

TEST_CASE("generator preconditions") {
  CHECK_THROWS_AS(generate_synthetic(1, 4, 8, 0), std::invalid_argument);
  CHECK_THROWS_AS(generate_synthetic(4, 0, 8, 0), std::invalid_argument);
  CHECK_THROWS_AS(generate_synthetic(4, 4, 3, 0), std::invalid_argument);
}

TEST_CASE("images are valid and classes are visually separated") {
  const Dataset ds = generate_synthetic(4, 6, 16, 77);
  for (const ClassEntry& cls : ds.classes)
    for (const Tensor& img : cls.images) {
      REQUIRE(img.shape == std::vector<int>{3, 16, 16});
      for (double v : img.data) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
    }

  double intra = 0.0, inter = 0.0;
  int n_intra = 0, n_inter = 0;
  for (int c1 = 0; c1 < 4; ++c1)
    for (int i = 0; i < 6; ++i)
      for (int c2 = c1; c2 < 4; ++c2)
        for (int j = (c1 == c2 ? i + 1 : 0); j < 6; ++j) {
          const double d = image_dist(ds.classes[c1].images[i], ds.classes[c2].images[j]);
          if (c1 == c2) {
            intra += d;
            ++n_intra;
          } else {
            inter += d;
            ++n_inter;
          }
        }
  CHECK(inter / n_inter > intra / n_intra);
}

TEST_CASE("a full-size dataset generates quickly") {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = generate_synthetic(20, 60, 32, 9);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(ds.classes.size() == 20);
  CHECK(ds.classes[0].images.size() == 60);
  CHECK(secs < 10.0);
}

TEST_CASE("save and load round-trip bit-exactly") {
  TempDir dir("roundtrip");
  const Dataset ds = generate_synthetic(6, 5, 8, 42);
  const std::string manifest = save_dataset(ds, dir.path.string());
  const Dataset back = load_dataset(manifest);
  CHECK(back.channels == ds.channels);
  CHECK(back.height == ds.height);
  CHECK(back.width == ds.width);
  REQUIRE(back.classes.size() == ds.classes.size());
  for (std::size_t c = 0; c < ds.classes.size(); ++c) {
    CHECK(back.classes[c].name == ds.classes[c].name);
    CHECK(back.classes[c].split == ds.classes[c].split);
    REQUIRE(back.classes[c].images.size() == ds.classes[c].images.size());
    for (std::size_t i = 0; i < ds.classes[c].images.size(); ++i)
      CHECK(back.classes[c].images[i].data == ds.classes[c].images[i].data);
  }
}

TEST_CASE("manifest and tensor file validation") {
  TempDir dir("corrupt");
  const auto manifest_for = [&](const std::string& fname) {
    const fs::path m = dir.path / (fname + ".manifest");
    write_text(m, "c0 " + fname + " train\n");
    return m.string();
  };

  write_bytes(dir.path / "ok.fsds", tensor_file_bytes(2, 3, 4, 4, 0.5f));
  CHECK(load_dataset(manifest_for("ok.fsds")).classes.size() == 1);

  write_bytes(dir.path / "magic.fsds", tensor_file_bytes(2, 3, 4, 4, 0.5f, 1, "XSDS"));
  CHECK(error_of([&] { load_dataset(manifest_for("magic.fsds")); }).find("bad magic") !=
        std::string::npos);

  write_bytes(dir.path / "version.fsds", tensor_file_bytes(2, 3, 4, 4, 0.5f, 9));
  CHECK(error_of([&] { load_dataset(manifest_for("version.fsds")); })
            .find("unsupported version 9") != std::string::npos);

  std::string cut = tensor_file_bytes(2, 3, 4, 4, 0.5f);
  cut.resize(cut.size() - 7);
  write_bytes(dir.path / "cut.fsds", cut);
  CHECK(error_of([&] { load_dataset(manifest_for("cut.fsds")); }).find("truncated") !=
        std::string::npos);

  std::string extra = tensor_file_bytes(2, 3, 4, 4, 0.5f) + "x";
  write_bytes(dir.path / "extra.fsds", extra);
  CHECK(error_of([&] { load_dataset(manifest_for("extra.fsds")); }).find("trailing bytes") !=
        std::string::npos);

  write_bytes(dir.path / "range.fsds", tensor_file_bytes(1, 3, 4, 4, 1.5f));
  CHECK(error_of([&] { load_dataset(manifest_for("range.fsds")); })
            .find("pixel out of [0,1] in image 0") != std::string::npos);

  write_bytes(dir.path / "empty.fsds", tensor_file_bytes(0, 3, 4, 4, 0.5f));
  CHECK(error_of([&] { load_dataset(manifest_for("empty.fsds")); })
            .find("class below minimum size") != std::string::npos);
}

TEST_CASE("manifest structure is validated with line numbers") {
  TempDir dir("manifest");
  write_bytes(dir.path / "a.fsds", tensor_file_bytes(2, 3, 4, 4, 0.5f));
  write_bytes(dir.path / "b.fsds", tensor_file_bytes(2, 3, 4, 4, 0.5f));

  const fs::path dup = dir.path / "dup.txt";
  write_text(dup, "alpha a.fsds train\nalpha b.fsds val\n");
  const std::string dup_err = error_of([&] { load_dataset(dup.string()); });
  CHECK(dup_err.find("'alpha'") != std::string::npos);
  CHECK(dup_err.find("listed more than once") != std::string::npos);

  const fs::path malformed = dir.path / "malformed.txt";
  write_text(malformed, "# comment line\nalpha a.fsds train\nbeta b.fsds\n");
  const std::string mal_err = error_of([&] { load_dataset(malformed.string()); });
  CHECK(mal_err.find(":3") != std::string::npos);
  CHECK(mal_err.find("malformed manifest line") != std::string::npos);

  const fs::path badsplit = dir.path / "badsplit.txt";
  write_text(badsplit, "alpha a.fsds holdout\n");
  CHECK(error_of([&] { load_dataset(badsplit.string()); }).find("unknown split 'holdout'") !=
        std::string::npos);

  const fs::path empty = dir.path / "empty.txt";
  write_text(empty, "# nothing here\n");
  CHECK(error_of([&] { load_dataset(empty.string()); }).find("lists no classes") !=
        std::string::npos);

  write_bytes(dir.path / "odd.fsds", tensor_file_bytes(2, 1, 4, 4, 0.5f));
  const fs::path mixed = dir.path / "mixed.txt";
  write_text(mixed, "alpha a.fsds train\ngamma odd.fsds val\n");
  CHECK(error_of([&] { load_dataset(mixed.string()); }).find("dataset uses 3x4x4") !=
        std::string::npos);
}

TEST_CASE("episode sampling is well-formed and disjoint") {
  const Dataset ds = generate_synthetic(20, 20, 8, 7);
  Rng rng(100);
  const Episode ep = sample_episode(ds, Split::train, 5, 5, 10, rng);
  CHECK(ep.c_way == 5);
  REQUIRE(ep.class_ids.size() == 5);
  REQUIRE(ep.support_indices.size() == 5);
  REQUIRE(ep.query_indices.size() == 5);

  std::set<int> classes_seen;
  for (int c = 0; c < 5; ++c) {
    classes_seen.insert(ep.class_ids[c]);
    CHECK(ds.classes[ep.class_ids[c]].split == Split::train);
    REQUIRE(ep.support_indices[c].size() == 5);
    REQUIRE(ep.query_indices[c].size() == 10);
    std::set<int> seen;
    for (int idx : ep.support_indices[c]) {
      CHECK(idx >= 0);
      CHECK(idx < 20);
      CHECK(seen.insert(idx).second);
    }
    for (int idx : ep.query_indices[c]) {
      CHECK(idx >= 0);
      CHECK(idx < 20);
      CHECK(seen.insert(idx).second);  // also disjoint from the support set
    }
    // accessors agree with the index sets
    CHECK(&support_image(ds, ep, c, 0) == &ds.classes[ep.class_ids[c]].images[ep.support_indices[c][0]]);
    CHECK(&query_image(ds, ep, c, 0) == &ds.classes[ep.class_ids[c]].images[ep.query_indices[c][0]]);
  }
  CHECK(classes_seen.size() == 5);  // no class repeats within an episode
}

TEST_CASE("when the way equals the split size every class is used") {
  const Dataset ds = generate_synthetic(10, 6, 8, 3);  // 6/2/2 split
  Rng rng(5);
  const Episode ep = sample_episode(ds, Split::train, 6, 1, 2, rng);
  std::set<int> seen(ep.class_ids.begin(), ep.class_ids.end());
  CHECK(seen.size() == 6);
}

TEST_CASE("class selection is unbiased across episodes") {
  const Dataset ds = generate_synthetic(20, 4, 8, 11);  // 12 train classes
  Rng rng(2718);
  std::vector<int> counts(20, 0);
  const int n = 10000;
  for (int e = 0; e < n; ++e) {
    const Episode ep = sample_episode(ds, Split::train, 5, 1, 1, rng);
    for (int id : ep.class_ids) ++counts[id];
  }
  // each train class is a binomial(n, 5/12) draw: mean 4166.7, sigma ~ 49.3;
  // the bound is ~4 sigma so that twelve simultaneous checks stay reliable
  for (int id = 0; id < 20; ++id) {
    if (ds.classes[id].split != Split::train) {
      CHECK(counts[id] == 0);
      continue;
    }
    CHECK(std::abs(counts[id] - 4166.7) < 200.0);
  }
}

TEST_CASE("sampling errors name the split or the class") {
  const Dataset ds = generate_synthetic(10, 4, 8, 13);  // splits 6/2/2, 4 images per class
  Rng rng(1);
  CHECK_THROWS_AS(sample_episode(ds, Split::train, 0, 1, 1, rng), std::invalid_argument);

  const std::string split_err =
      error_of([&] { Rng r(1); sample_episode(ds, Split::val, 3, 1, 1, r); });
  CHECK(split_err.find("'val'") != std::string::npos);
  CHECK(split_err.find("has 2 classes, need 3") != std::string::npos);

  const std::string class_err =
      error_of([&] { Rng r(1); sample_episode(ds, Split::train, 2, 3, 2, r); });
  CHECK(class_err.find("has 4 images, need 5") != std::string::npos);
  CHECK(class_err.find("class_") != std::string::npos);
}

TEST_CASE("identical generator streams sample identical episodes") {
  const Dataset ds = generate_synthetic(15, 8, 8, 21);
  Rng a = derive_rng(99, "episodes", 3);
  Rng b = derive_rng(99, "episodes", 3);
  for (int t = 0; t < 5; ++t) {
    const Episode ea = sample_episode(ds, Split::train, 4, 2, 3, a);
    const Episode eb = sample_episode(ds, Split::train, 4, 2, 3, b);
    CHECK(ea.class_ids == eb.class_ids);
    CHECK(ea.support_indices == eb.support_indices);
    CHECK(ea.query_indices == eb.query_indices);
  }
  Rng c = derive_rng(99, "episodes", 4);
  const Episode ea = sample_episode(ds, Split::train, 4, 2, 3, a);
  const Episode ec = sample_episode(ds, Split::train, 4, 2, 3, c);
  CHECK((ea.class_ids != ec.class_ids || ea.support_indices != ec.support_indices ||
         ea.query_indices != ec.query_indices));
}
