#include <gtest/gtest.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "rotaudit/io.hpp"

using namespace rotaudit;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("rotaudit_io_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// NPY bytes laid out by hand, the way numpy writes a v1.0 file.
void write_raw_npy(const fs::path& path, const std::string& dict, const void* data, std::size_t nbytes) {
  std::string header = dict;
  const std::size_t base = 10;
  while ((base + header.size() + 1) % 64 != 0) header += ' ';
  header += '\n';
  std::ofstream out(path, std::ios::binary);
  out.write("\x93NUMPY\x01\x00", 8);
  const std::uint16_t len = static_cast<std::uint16_t>(header.size());
  out.write(reinterpret_cast<const char*>(&len), 2);
  out << header;
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(nbytes));
}

}  // namespace

TEST(Npy, ReadsHandWrittenFile) {
  const auto dir = temp_dir("hand");
  const double vals[6] = {1, 2, 3, 4, 5, 6};
  write_raw_npy(dir / "a.npy", "{'descr': '<f8', 'fortran_order': False, 'shape': (2, 3), }", vals, sizeof vals);
  const MatD m = io::load_array<double>(dir / "a.npy");
  ASSERT_EQ(m.rows(), 2);
  ASSERT_EQ(m.cols(), 3);
  EXPECT_EQ(m(0, 2), 3.0);
  EXPECT_EQ(m(1, 0), 4.0);
  // the same values in column-major order
  const double fvals[6] = {1, 4, 2, 5, 3, 6};
  write_raw_npy(dir / "f.npy", "{'descr': '<f8', 'fortran_order': True, 'shape': (2, 3), }", fvals, sizeof fvals);
  EXPECT_EQ(io::load_array<double>(dir / "f.npy"), m);
  // 1-D loads as one row
  const float v[4] = {1.5f, -2.f, 0.f, 7.f};
  write_raw_npy(dir / "v.npy", "{'descr': '<f4', 'fortran_order': False, 'shape': (4,), }", v, sizeof v);
  const MatF r = io::load_array<float>(dir / "v.npy");
  EXPECT_EQ(r.rows(), 1);
  EXPECT_EQ(r(0, 3), 7.f);
  fs::remove_all(dir);
}

TEST(Npy, RoundTripAndHeaderAlignment) {
  const auto dir = temp_dir("rt");
  Rng rng(1);
  const MatF a = random_normal<float>(17, 5, rng);
  io::save_array(dir / "a.npy", a);
  EXPECT_EQ(io::load_array<float>(dir / "a.npy"), a);
  std::ifstream in(dir / "a.npy", std::ios::binary);
  char magic[10];
  in.read(magic, 10);
  EXPECT_EQ(std::memcmp(magic, "\x93NUMPY\x01\x00", 8), 0);
  std::uint16_t len = 0;
  std::memcpy(&len, magic + 8, 2);
  EXPECT_EQ((10 + len) % 64, 0);
  EXPECT_EQ(fs::file_size(dir / "a.npy"), 10u + len + 17u * 5u * 4u);
  const MatD b = random_normal<double>(3, 4, rng);
  io::save_array(dir / "b.npy", b);
  EXPECT_EQ(io::load_array<double>(dir / "b.npy"), b);
  fs::remove_all(dir);
}

TEST(Npy, RejectsMismatches) {
  const auto dir = temp_dir("bad");
  const double vals[5] = {1, 2, 3, 4, 5};
  write_raw_npy(dir / "short.npy", "{'descr': '<f8', 'fortran_order': False, 'shape': (2, 3), }", vals, sizeof vals);
  EXPECT_THROW(io::load_array<double>(dir / "short.npy"), std::runtime_error);
  write_raw_npy(dir / "int.npy", "{'descr': '<i4', 'fortran_order': False, 'shape': (2,), }", vals, 8);
  EXPECT_THROW(io::load_array<double>(dir / "int.npy"), std::runtime_error);
  EXPECT_THROW(io::load_array<double>(dir / "missing.npy"), std::runtime_error);
  fs::remove_all(dir);
}

TEST(Npy, IntegerArrays) {
  const auto dir = temp_dir("int");
  io::save_int_array(dir / "t.npy", {0, 3, 4, 1, 0, 5, 6, 1}, {2, 4});
  std::vector<std::size_t> shape;
  const auto v = io::load_int_array(dir / "t.npy", &shape);
  EXPECT_EQ(shape, (std::vector<std::size_t>{2, 4}));
  EXPECT_EQ(v[5], 5);
  const std::int32_t raw[3] = {7, 8, 9};
  write_raw_npy(dir / "i4.npy", "{'descr': '<i4', 'fortran_order': False, 'shape': (3,), }", raw, sizeof raw);
  EXPECT_EQ(io::load_int_array(dir / "i4.npy"), (std::vector<std::int64_t>{7, 8, 9}));
  fs::remove_all(dir);
}

TEST(Checkpoint, RoundTripsWeightsAndMeta) {
  const auto dir = temp_dir("ckpt");
  Rng rng(2);
  const auto w = model::init_weights(model::ModelConfig::desk(), rng);
  io::save_checkpoint(dir / "w.ckpt", w, {.cohort = "B", .step = 123, .seed = 9});
  io::CheckpointMeta meta;
  const auto back = io::load_checkpoint(dir / "w.ckpt", &meta);
  EXPECT_EQ(meta.step, 123);
  EXPECT_EQ(meta.seed, 9u);
  EXPECT_EQ(meta.cohort, "B");
  EXPECT_TRUE(back.config == w.config);
  EXPECT_EQ(back.frozen, w.frozen);
  auto ta = w.tensors();
  auto tb = back.tensors();
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(*ta[i].second, *tb[i].second) << ta[i].first;
  // a truncated file is rejected
  fs::resize_file(dir / "w.ckpt", fs::file_size(dir / "w.ckpt") - 4);
  EXPECT_THROW(io::load_checkpoint(dir / "w.ckpt"), std::runtime_error);
  fs::remove_all(dir);
}

TEST(Bundle, WriteIngestRoundTrip) {
  const auto dir = temp_dir("bundle");
  Rng rng(3);
  io::ActsBundle b;
  b.model_id = "m";
  b.revision = "r1";
  b.sites = {"resid_pre_0", "resid_mid_0"};
  b.d_model = 6;
  b.n_rows = 11;
  for (const auto& s : b.sites) b.acts[s] = random_normal<float>(11, 6, rng);
  io::write_bundle(dir, b);
  const auto back = io::ingest_bundle(dir);
  EXPECT_EQ(back.sites, b.sites);
  EXPECT_EQ(back.n_rows, 11);
  EXPECT_EQ(back.site("resid_mid_0"), b.acts.at("resid_mid_0"));
  EXPECT_THROW(back.site("nope"), std::out_of_range);
  fs::remove_all(dir);
}

TEST(Bundle, ErrorsNameTheSite) {
  const auto dir = temp_dir("bundle_bad");
  Rng rng(4);
  io::ActsBundle b;
  b.model_id = "m";
  b.sites = {"resid_pre_0", "resid_post_1"};
  b.d_model = 4;
  b.n_rows = 5;
  for (const auto& s : b.sites) b.acts[s] = random_normal<float>(5, 4, rng);
  io::write_bundle(dir, b);
  io::save_array(dir / "resid_post_1.npy", MatF(random_normal<float>(6, 4, rng)));
  try {
    io::ingest_bundle(dir);
    FAIL() << "expected a row-count error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("resid_post_1"), std::string::npos);
  }
  fs::remove(dir / "resid_post_1.npy");
  try {
    io::ingest_bundle(dir);
    FAIL() << "expected a missing-file error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("resid_post_1"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(Reports, HeaderAndExperimentsDir) {
  const auto h = io::report_header("audit", {1, 2});
  EXPECT_EQ(h["schema_version"], io::kSchemaVersion);
  EXPECT_EQ(h["kind"], "audit");
  EXPECT_EQ(h["seeds"].size(), 2u);
  ::setenv("ROTAUDIT_EXPERIMENTS_DIR", "/tmp/somewhere", 1);
  EXPECT_EQ(io::experiments_dir(), fs::path("/tmp/somewhere"));
  ::unsetenv("ROTAUDIT_EXPERIMENTS_DIR");
  EXPECT_EQ(io::experiments_dir(), fs::path("experiments"));
}
