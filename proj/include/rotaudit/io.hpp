#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rotaudit/linalg.hpp"
#include "rotaudit/model.hpp"

namespace rotaudit::io {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kToolVersion = "0.3.0";

// ---------------------------------------------------------------------------
// NPY v1.0

/// Writes a 2-D little-endian '<f4' or '<f8' array, row-major.
template <typename S>
void save_array(const fs::path& path, const Mat<S>& m);

/// Reads a 1-D or 2-D '<f4'/'<f8' array. 1-D arrays load as a single row;
/// fortran_order arrays are transposed into row-major with values preserved.
template <typename S>
Mat<S> load_array(const fs::path& path);

/// Integer token arrays ('<i4' or '<i8').
void save_int_array(const fs::path& path, const std::vector<std::int64_t>& values,
                    std::vector<std::size_t> shape);
std::vector<std::int64_t> load_int_array(const fs::path& path, std::vector<std::size_t>* shape = nullptr);

// ---------------------------------------------------------------------------
// Tensor container: "RTAC" magic, u32 version, u64 header length, JSON header
// (user metadata plus a tensor index), then float32 payloads in index order.

struct TensorFile {
  json meta;
  std::vector<std::pair<std::string, MatF>> tensors;

  const MatF& at(const std::string& name) const;
};

void write_tensor_file(const fs::path& path, const json& meta,
                       const std::vector<std::pair<std::string, const MatF*>>& tensors);
TensorFile read_tensor_file(const fs::path& path);

struct CheckpointMeta {
  std::string cohort;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  json extra = json::object();
};

void save_checkpoint(const fs::path& path, const model::WeightsF& w, const CheckpointMeta& meta);
model::WeightsF load_checkpoint(const fs::path& path, CheckpointMeta* meta = nullptr);

json config_to_json(const model::ModelConfig& c);
model::ModelConfig config_from_json(const json& j);

// ---------------------------------------------------------------------------
// Activation bundles: <dir>/manifest.json plus one <site>.npy per site.

struct ActsBundle {
  std::string model_id;
  std::string revision;
  std::vector<std::string> sites;
  int d_model = 0;
  std::int64_t n_rows = 0;
  json token_batch = json::object();
  std::map<std::string, MatF> acts;

  const MatF& site(const std::string& name) const;
};

void write_bundle(const fs::path& dir, const ActsBundle& bundle);
/// Validates the manifest against the arrays; errors name the offending site.
ActsBundle ingest_bundle(const fs::path& dir);

// ---------------------------------------------------------------------------
// Reports

/// Output root: $ROTAUDIT_EXPERIMENTS_DIR, else "experiments".
fs::path experiments_dir();

/// Common report fields: schema_version, tool_version, kind, seeds.
json report_header(const std::string& kind, const std::vector<std::uint64_t>& seeds);

void write_json(const fs::path& path, const json& j);
json read_json(const fs::path& path);

}  // namespace rotaudit::io
