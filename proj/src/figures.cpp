#include "rotaudit/figures.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <stdexcept>

#include "rotaudit/io.hpp"
#include "rotaudit/rotation.hpp"

namespace rotaudit::figures {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string num(double x) {
  if (!std::isfinite(x)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

std::string num(const json& j) { return j.is_number() ? num(j.get<double>()) : std::string("nan"); }

class Csv {
 public:
  Csv(const fs::path& path, const std::string& header) : path_(path), out_(path) {
    if (!out_) throw std::runtime_error("cannot open for writing: " + path.string());
    out_ << header << '\n';
  }
  template <typename... T>
  void row(const T&... cells) {
    bool first = true;
    ((out_ << (first ? "" : ",") << cells, first = false), ...);
    out_ << '\n';
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
  std::ofstream out_;
};

std::vector<const json*> of_kind(const std::vector<json>& reports, const std::string& kind) {
  std::vector<const json*> out;
  for (const auto& r : reports)
    if (r.value("kind", "") == kind) out.push_back(&r);
  return out;
}

std::string pair_label(const json& r) { return r.value("src", "?") + "->" + r.value("ref", "?"); }

}  // namespace

json effects_report(std::uint64_t seed, const bars::ComponentEffects& e) {
  json j = io::report_header("component_effects", {seed});
  j["seed"] = seed;
  j["effects"] = e.to_json();
  return j;
}

json steering_report(const std::vector<steering::TransferCurve>& curves,
                     const std::vector<steering::RegimeResult>& regimes) {
  std::vector<std::uint64_t> seeds;
  json j = io::report_header("steering", {});
  j["curves"] = json::array();
  for (std::size_t i = 0; i < curves.size(); ++i) {
    json c = curves[i].to_json();
    if (i < regimes.size()) c["regime"] = regimes[i].to_json();
    j["curves"].push_back(c);
    for (auto s : {curves[i].source_seed, curves[i].target_seed})
      if (std::find(seeds.begin(), seeds.end(), s) == seeds.end()) seeds.push_back(s);
  }
  j["seeds"] = seeds;
  return j;
}

std::vector<fs::path> emit_figures(const std::vector<json>& reports, const fs::path& out_dir,
                                   const FigureOptions& options) {
  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  const auto audits = of_kind(reports, "audit");

  if (!audits.empty()) {
    Csv ev(out_dir / "ev.csv", "pair,site,condition,ev");
    for (const json* r : audits)
      for (const auto& s : (*r)["sites"])
        for (const char* cond : {"self", "naive", "rotated"})
          ev.row(pair_label(*r), s["site"].get<std::string>(), cond, num(s[std::string(cond) + "_ev"]));
    written.push_back(ev.path());

    // Group by residual width so the sqrt(2d) marker and Haar curve are well defined.
    std::map<int, std::vector<double>> frobs, angles;
    for (const json* r : audits)
      for (const auto& s : (*r)["sites"]) {
        const int d = s["d"].get<int>();
        frobs[d].push_back(s["frob_from_identity"].get<double>());
        const auto a = s["eigen_angles"].get<std::vector<double>>();
        angles[d].insert(angles[d].end(), a.begin(), a.end());
      }

    Csv fh(out_dir / "frob_hist.csv", "d,bin_lo,bin_hi,count,sqrt_2d");
    for (const auto& [d, xs] : frobs) {
      const double marker = rotation::frob_identity_prediction(d);
      const double hi = 2.0 * marker;
      const double w = hi / options.frob_bins;
      std::vector<int> counts(static_cast<std::size_t>(options.frob_bins), 0);
      for (double x : xs) {
        const int b = std::clamp(static_cast<int>(std::floor(x / w)), 0, options.frob_bins - 1);
        ++counts[static_cast<std::size_t>(b)];
      }
      for (int b = 0; b < options.frob_bins; ++b) fh.row(d, num(b * w), num((b + 1) * w), counts[static_cast<std::size_t>(b)], num(marker));
    }
    written.push_back(fh.path());

    Csv ea(out_dir / "eigen_angles.csv", "d,bin_lo,bin_hi,observed_density,haar_density");
    const double pi = std::numbers::pi;
    for (const auto& [d, xs] : angles) {
      const double w = 2.0 * pi / options.angle_bins;
      std::vector<int> counts(static_cast<std::size_t>(options.angle_bins), 0);
      for (double x : xs) {
        const int b = std::clamp(static_cast<int>(std::floor((x + pi) / w)), 0, options.angle_bins - 1);
        ++counts[static_cast<std::size_t>(b)];
      }
      for (int b = 0; b < options.angle_bins; ++b) {
        const double lo = -pi + b * w, hi = lo + w;
        const double observed = xs.empty() ? 0.0 : counts[static_cast<std::size_t>(b)] / (w * static_cast<double>(xs.size()));
        const double haar = (rotation::haar_angle_cdf(hi, d) - rotation::haar_angle_cdf(lo, d)) / w;
        ea.row(d, num(lo), num(hi), num(observed), num(haar));
      }
    }
    written.push_back(ea.path());
  }

  const auto steer = of_kind(reports, "steering");
  if (!steer.empty()) {
    Csv sc(out_dir / "steering.csv", "kind,source_seed,target_seed,rotated,alpha,within,cross,ratio");
    for (const json* r : steer)
      for (const auto& c : (*r)["curves"])
        for (std::size_t i = 0; i < c["alphas"].size(); ++i)
          sc.row(c["kind"].get<std::string>(), c["source_seed"].get<std::uint64_t>(), c["target_seed"].get<std::uint64_t>(),
                 c["rotated"].get<bool>() ? 1 : 0, num(c["alphas"][i]), num(c["within"][i]), num(c["cross"][i]),
                 num(c["ratio"][i]));
    written.push_back(sc.path());
  }

  const auto effects = of_kind(reports, "component_effects");
  if (!effects.empty()) {
    Csv ig(out_dir / "ig_ap.csv", "seed,component,measured,ap,ig");
    for (const json* r : effects)
      for (const auto& c : (*r)["effects"]["components"])
        ig.row((*r)["seed"].get<std::uint64_t>(), c["component"].get<std::string>(), num(c["measured"]), num(c["ap"]),
               num(c["ig"]));
    written.push_back(ig.path());
  }
  return written;
}

std::vector<json> load_reports(const fs::path& dir) {
  std::vector<fs::path> paths;
  if (!fs::is_directory(dir)) return {};
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json") paths.push_back(e.path());
  std::sort(paths.begin(), paths.end());
  std::vector<json> out;
  for (const auto& p : paths) {
    json j;
    try {
      j = io::read_json(p);
    } catch (const json::parse_error&) {
      continue;
    }
    if (j.is_object() && j.contains("kind")) out.push_back(std::move(j));
  }
  return out;
}

}  // namespace rotaudit::figures
