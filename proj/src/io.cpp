#include "rotaudit/io.hpp"

#include <bit>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <regex>
#include <sstream>
#include <stdexcept>

namespace rotaudit::io {

static_assert(std::endian::native == std::endian::little, "NPY payloads are read and written natively");

namespace {

constexpr char kNpyMagic[] = "\x93NUMPY";
constexpr char kContainerMagic[4] = {'R', 'T', 'A', 'C'};
constexpr std::uint32_t kContainerVersion = 1;

struct NpyHeader {
  std::string descr;
  bool fortran_order = false;
  std::vector<std::size_t> shape;
  std::size_t count() const {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
};

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    s += std::to_string(shape[i]);
    if (shape.size() == 1 || i + 1 < shape.size()) s += ",";
    if (i + 1 < shape.size()) s += " ";
  }
  return s + ")";
}

void write_npy(const fs::path& path, const std::string& descr, const std::vector<std::size_t>& shape,
               const void* data, std::size_t nbytes) {
  std::string header = "{'descr': '" + descr + "', 'fortran_order': False, 'shape': " + shape_string(shape) + ", }";
  // Pad with spaces so magic + version + length + header + '\n' is a multiple of 64.
  const std::size_t prefix = 6 + 2 + 2;
  const std::size_t total = prefix + header.size() + 1;
  header.append((64 - total % 64) % 64, ' ');
  header.push_back('\n');
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out.write(kNpyMagic, 6);
  const char version[2] = {1, 0};
  out.write(version, 2);
  const auto len = static_cast<std::uint16_t>(header.size());
  out.write(reinterpret_cast<const char*>(&len), 2);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(nbytes));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

NpyHeader parse_header(const std::string& h, const fs::path& path) {
  NpyHeader out;
  std::smatch m;
  if (!std::regex_search(h, m, std::regex(R"('descr'\s*:\s*'([^']*)')")))
    throw std::runtime_error("npy header missing descr: " + path.string());
  out.descr = m[1];
  if (!std::regex_search(h, m, std::regex(R"('fortran_order'\s*:\s*(True|False))")))
    throw std::runtime_error("npy header missing fortran_order: " + path.string());
  out.fortran_order = m[1] == "True";
  if (!std::regex_search(h, m, std::regex(R"('shape'\s*:\s*\(([^)]*)\))")))
    throw std::runtime_error("npy header missing shape: " + path.string());
  const std::string dims = m[1];
  std::regex num(R"(\d+)");
  for (auto it = std::sregex_iterator(dims.begin(), dims.end(), num); it != std::sregex_iterator(); ++it)
    out.shape.push_back(static_cast<std::size_t>(std::stoull(it->str())));
  return out;
}

std::vector<char> read_npy(const fs::path& path, NpyHeader& header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  char magic[6];
  in.read(magic, 6);
  if (!in || std::memcmp(magic, kNpyMagic, 6) != 0) throw std::runtime_error("bad npy magic: " + path.string());
  unsigned char version[2];
  in.read(reinterpret_cast<char*>(version), 2);
  std::uint32_t hlen = 0;
  if (version[0] == 1) {
    std::uint16_t l16 = 0;
    in.read(reinterpret_cast<char*>(&l16), 2);
    hlen = l16;
  } else if (version[0] == 2 || version[0] == 3) {
    in.read(reinterpret_cast<char*>(&hlen), 4);
  } else {
    throw std::runtime_error("unsupported npy version in " + path.string());
  }
  std::string h(hlen, '\0');
  in.read(h.data(), hlen);
  if (!in) throw std::runtime_error("truncated npy header: " + path.string());
  header = parse_header(h, path);
  if (header.shape.size() > 2) throw std::runtime_error("npy arrays above 2-D are not supported: " + path.string());
  std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return payload;
}

std::size_t descr_size(const std::string& descr) {
  if (descr == "<f4" || descr == "<i4") return 4;
  if (descr == "<f8" || descr == "<i8") return 8;
  return 0;
}

template <typename Src, typename S>
Mat<S> to_matrix(const std::vector<char>& payload, const NpyHeader& h) {
  const std::size_t rows = h.shape.size() == 2 ? h.shape[0] : 1;
  const std::size_t cols = h.shape.size() == 2 ? h.shape[1] : (h.shape.empty() ? 1 : h.shape[0]);
  std::vector<Src> vals(h.count());
  std::memcpy(vals.data(), payload.data(), vals.size() * sizeof(Src));
  Mat<S> m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t idx = h.fortran_order ? c * rows + r : r * cols + c;
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = static_cast<S>(vals[idx]);
    }
  return m;
}

}  // namespace

template <typename S>
void save_array(const fs::path& path, const Mat<S>& m) {
  const std::string descr = sizeof(S) == 4 ? "<f4" : "<f8";
  write_npy(path, descr, {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, m.data(),
            static_cast<std::size_t>(m.size()) * sizeof(S));
}

template <typename S>
Mat<S> load_array(const fs::path& path) {
  NpyHeader h;
  const auto payload = read_npy(path, h);
  const std::size_t width = descr_size(h.descr);
  if (width == 0 || h.descr[1] != 'f') throw std::runtime_error("unsupported npy dtype '" + h.descr + "': " + path.string());
  if (payload.size() != h.count() * width)
    throw std::runtime_error("npy payload size does not match declared shape: " + path.string());
  return width == 4 ? to_matrix<float, S>(payload, h) : to_matrix<double, S>(payload, h);
}

template void save_array<float>(const fs::path&, const MatF&);
template void save_array<double>(const fs::path&, const MatD&);
template MatF load_array<float>(const fs::path&);
template MatD load_array<double>(const fs::path&);

void save_int_array(const fs::path& path, const std::vector<std::int64_t>& values, std::vector<std::size_t> shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  if (n != values.size()) throw std::invalid_argument("save_int_array: shape does not match value count");
  write_npy(path, "<i8", shape, values.data(), values.size() * sizeof(std::int64_t));
}

std::vector<std::int64_t> load_int_array(const fs::path& path, std::vector<std::size_t>* shape) {
  NpyHeader h;
  const auto payload = read_npy(path, h);
  const std::size_t width = descr_size(h.descr);
  if (width == 0 || h.descr[1] != 'i') throw std::runtime_error("unsupported npy dtype '" + h.descr + "': " + path.string());
  if (h.fortran_order && h.shape.size() == 2 && h.shape[0] > 1 && h.shape[1] > 1)
    throw std::runtime_error("fortran-order integer arrays are not supported: " + path.string());
  if (payload.size() != h.count() * width)
    throw std::runtime_error("npy payload size does not match declared shape: " + path.string());
  std::vector<std::int64_t> out(h.count());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (width == 4) {
      std::int32_t v;
      std::memcpy(&v, payload.data() + i * 4, 4);
      out[i] = v;
    } else {
      std::memcpy(&out[i], payload.data() + i * 8, 8);
    }
  }
  if (shape) *shape = h.shape;
  return out;
}

// ---------------------------------------------------------------------------

const MatF& TensorFile::at(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw std::out_of_range("tensor not in file: " + name);
}

void write_tensor_file(const fs::path& path, const json& meta,
                       const std::vector<std::pair<std::string, const MatF*>>& tensors) {
  json header = {{"meta", meta}, {"tensors", json::array()}};
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const std::uint64_t nbytes = static_cast<std::uint64_t>(t->size()) * sizeof(float);
    header["tensors"].push_back(
        {{"name", name}, {"dtype", "f4"}, {"shape", {t->rows(), t->cols()}}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string text = header.dump();
  const auto hlen = static_cast<std::uint64_t>(text.size());
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + tmp.string());
    out.write(kContainerMagic, 4);
    out.write(reinterpret_cast<const char*>(&kContainerVersion), 4);
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : tensors)
      out.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(float)));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

TensorFile read_tensor_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t hlen = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&hlen), 8);
  if (!in || std::memcmp(magic, kContainerMagic, 4) != 0 || version != kContainerVersion)
    throw std::runtime_error("not a tensor container: " + path.string());
  std::string text(hlen, '\0');
  in.read(text.data(), static_cast<std::streamsize>(hlen));
  const auto header = json::parse(text);
  TensorFile out;
  out.meta = header.at("meta");
  for (const auto& entry : header.at("tensors")) {
    const auto shape = entry.at("shape").get<std::vector<Eigen::Index>>();
    MatF t(shape.at(0), shape.at(1));
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!in) throw std::runtime_error("truncated tensor payload in " + path.string());
    out.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  return out;
}

json config_to_json(const model::ModelConfig& c) {
  return {{"d_model", c.d_model}, {"n_layers", c.n_layers}, {"n_heads", c.n_heads}, {"d_head", c.d_head},
          {"d_mlp", c.d_mlp},     {"n_ctx", c.n_ctx},       {"vocab", c.vocab},     {"n_pos_dims", c.n_pos_dims}};
}

model::ModelConfig config_from_json(const json& j) {
  model::ModelConfig c;
  c.d_model = j.at("d_model");
  c.n_layers = j.at("n_layers");
  c.n_heads = j.at("n_heads");
  c.d_head = j.at("d_head");
  c.d_mlp = j.at("d_mlp");
  c.n_ctx = j.at("n_ctx");
  c.vocab = j.at("vocab");
  c.n_pos_dims = j.at("n_pos_dims");
  c.validate();
  return c;
}

void save_checkpoint(const fs::path& path, const model::WeightsF& w, const CheckpointMeta& meta) {
  json m = {{"kind", "model_checkpoint"},
            {"schema_version", kSchemaVersion},
            {"tool_version", kToolVersion},
            {"config", config_to_json(w.config)},
            {"cohort", meta.cohort},
            {"step", meta.step},
            {"seed", meta.seed},
            {"frozen", std::vector<std::string>(w.frozen.begin(), w.frozen.end())},
            {"extra", meta.extra}};
  write_tensor_file(path, m, w.tensors());
}

model::WeightsF load_checkpoint(const fs::path& path, CheckpointMeta* meta) {
  const auto file = read_tensor_file(path);
  if (file.meta.value("kind", "") != "model_checkpoint") throw std::runtime_error("not a model checkpoint: " + path.string());
  auto w = model::WeightsF::zeros(config_from_json(file.meta.at("config")));
  for (auto& [name, t] : w.tensors()) {
    const auto& src = file.at(name);
    if (src.rows() != t->rows() || src.cols() != t->cols())
      throw std::runtime_error("checkpoint tensor has wrong shape: " + name);
    *t = src;
  }
  for (const auto& name : file.meta.at("frozen")) w.frozen.insert(name.get<std::string>());
  if (meta) {
    meta->cohort = file.meta.at("cohort");
    meta->step = file.meta.at("step");
    meta->seed = file.meta.at("seed");
    meta->extra = file.meta.value("extra", json::object());
  }
  return w;
}

// ---------------------------------------------------------------------------

const MatF& ActsBundle::site(const std::string& name) const {
  auto it = acts.find(name);
  if (it == acts.end()) throw std::out_of_range("bundle has no site " + name);
  return it->second;
}

namespace {

std::string site_file(const std::string& site) {
  std::string f = site;
  for (auto& ch : f)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' || ch == '.')) ch = '_';
  return f + ".npy";
}

}  // namespace

void write_bundle(const fs::path& dir, const ActsBundle& b) {
  fs::create_directories(dir);
  json files = json::object();
  for (const auto& s : b.sites) {
    save_array(dir / site_file(s), b.site(s));
    files[s] = site_file(s);
  }
  const json manifest = {{"schema_version", kSchemaVersion},
                         {"model_id", b.model_id},
                         {"revision", b.revision},
                         {"sites", b.sites},
                         {"files", files},
                         {"d_model", b.d_model},
                         {"n_rows", b.n_rows},
                         {"token_batch", b.token_batch}};
  write_json(dir / "manifest.json", manifest);
}

ActsBundle ingest_bundle(const fs::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw std::runtime_error("bundle has no manifest.json: " + dir.string());
  const auto m = read_json(manifest_path);
  ActsBundle b;
  b.model_id = m.value("model_id", "");
  b.revision = m.contains("revision") && m["revision"].is_string() ? m["revision"].get<std::string>()
               : m.contains("revision")                          ? m["revision"].dump()
                                                                 : "";
  b.sites = m.at("sites").get<std::vector<std::string>>();
  b.d_model = m.at("d_model");
  b.n_rows = m.at("n_rows");
  b.token_batch = m.value("token_batch", json::object());
  if (b.sites.empty()) throw std::runtime_error("bundle manifest lists no sites: " + dir.string());
  const json files = m.value("files", json::object());
  for (const auto& s : b.sites) {
    const fs::path file = dir / (files.contains(s) ? files[s].get<std::string>() : site_file(s));
    if (!fs::exists(file)) throw std::runtime_error("bundle site '" + s + "': missing array file " + file.string());
    MatF a = load_array<float>(file);
    if (a.rows() != b.n_rows)
      throw std::runtime_error("bundle site '" + s + "': " + std::to_string(a.rows()) + " rows, manifest says " +
                               std::to_string(b.n_rows));
    if (a.cols() != b.d_model)
      throw std::runtime_error("bundle site '" + s + "': width " + std::to_string(a.cols()) + ", manifest d_model " +
                               std::to_string(b.d_model));
    b.acts.emplace(s, std::move(a));
  }
  return b;
}

// ---------------------------------------------------------------------------

fs::path experiments_dir() {
  if (const char* env = std::getenv("ROTAUDIT_EXPERIMENTS_DIR"); env && *env) return env;
  return "experiments";
}

json report_header(const std::string& kind, const std::vector<std::uint64_t>& seeds) {
  return {{"schema_version", kSchemaVersion}, {"tool_version", kToolVersion}, {"kind", kind}, {"seeds", seeds}};
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  return json::parse(in);
}

}  // namespace rotaudit::io
