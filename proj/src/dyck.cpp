#include "rotaudit/dyck.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace rotaudit::dyck {

namespace {

constexpr int kMaxRetries = 10000;
constexpr char kDatasetMagic[4] = {'D', 'Y', 'C', 'K'};
constexpr std::uint32_t kDatasetVersion = 1;

int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

std::vector<int> with_markers(const std::vector<int>& brackets) {
  std::vector<int> tokens;
  tokens.reserve(brackets.size() + 2);
  tokens.push_back(kBos);
  tokens.insert(tokens.end(), brackets.begin(), brackets.end());
  tokens.push_back(kEos);
  return tokens;
}

// Random well-nested string of even length with depth never above kMaxDepth.
std::vector<int> random_dyck(int length, Rng& rng) {
  std::vector<int> out;
  std::vector<int> stack;
  out.reserve(static_cast<std::size_t>(length));
  for (int i = 0; i < length; ++i) {
    const int remaining = length - i;
    const int d = static_cast<int>(stack.size());
    const bool can_open = d + 1 <= remaining - 1 && d < kMaxDepth;
    const bool can_close = d > 0;
    bool open = can_open;
    if (can_open && can_close) open = std::bernoulli_distribution(0.5)(rng);
    if (open) {
      const int fam = uniform_int(rng, 0, kFamilies - 1);
      stack.push_back(fam);
      out.push_back(opener_of(fam));
    } else {
      out.push_back(closer_of(stack.back()));
      stack.pop_back();
    }
  }
  return out;
}

std::vector<int> random_brackets(int length, Rng& rng) {
  std::vector<int> out(static_cast<std::size_t>(length));
  for (auto& t : out) t = uniform_int(rng, kFirstOpener, kFirstCloser + kFamilies - 1);
  return out;
}

int even_length_in(int lo, int hi, Rng& rng) {
  const int first = lo + (lo % 2);
  const int last = hi - (hi % 2);
  return first + 2 * uniform_int(rng, 0, (last - first) / 2);
}

std::vector<int> mixed_brackets(const DistributionSpec& spec, Rng& rng) {
  if (std::bernoulli_distribution(spec.valid_fraction)(rng))
    return random_dyck(even_length_in(spec.lo, spec.hi, rng), rng);
  return random_brackets(uniform_int(rng, spec.lo, spec.hi), rng);
}

// Deep single-family nest flanked by shallow alternating pairs of the other families.
std::vector<int> compositional_brackets(const DistributionSpec& spec, Rng& rng) {
  for (int attempt = 0; attempt < kMaxRetries; ++attempt) {
    const int fam = uniform_int(rng, 0, kFamilies - 1);
    const int nest = uniform_int(rng, 4, 8);
    const int left = uniform_int(rng, 2, 6);
    const int right = uniform_int(rng, 2, 6);
    const int length = 2 * (nest + left + right);
    if (length < spec.lo || length > spec.hi) continue;

    const int other_a = (fam + 1) % kFamilies;
    const int other_b = (fam + 2) % kFamilies;
    auto flank = [&](int pairs, std::vector<int>& out) {
      bool use_a = std::bernoulli_distribution(0.5)(rng);
      for (int p = 0; p < pairs; ++p) {
        const int f = use_a ? other_a : other_b;
        out.push_back(opener_of(f));
        out.push_back(closer_of(f));
        use_a = !use_a;
      }
    };
    std::vector<int> out;
    flank(left, out);
    for (int i = 0; i < nest; ++i) out.push_back(opener_of(fam));
    for (int i = 0; i < nest; ++i) out.push_back(closer_of(fam));
    flank(right, out);
    return out;
  }
  throw std::runtime_error("compositional sampler: no sequence fits the length range after retry cap");
}

}  // namespace

int LabeledSequence::bracket_length() const {
  return static_cast<int>(std::count_if(tokens.begin(), tokens.end(), is_bracket));
}

std::string to_string(DistributionKind kind) {
  switch (kind) {
    case DistributionKind::train_mix: return "train_mix";
    case DistributionKind::compositional: return "compositional";
    case DistributionKind::long_range: return "long";
    case DistributionKind::random: return "random";
  }
  return "unknown";
}

DistributionKind distribution_kind_from_string(const std::string& name) {
  if (name == "train_mix") return DistributionKind::train_mix;
  if (name == "compositional") return DistributionKind::compositional;
  if (name == "long") return DistributionKind::long_range;
  if (name == "random") return DistributionKind::random;
  throw std::invalid_argument("unknown distribution kind: " + name);
}

void DistributionSpec::validate() const {
  if (lo < 2) throw std::invalid_argument("DistributionSpec: lo must be >= 2");
  if (hi > 62) throw std::invalid_argument("DistributionSpec: hi must be <= 62");
  if (lo > hi) throw std::invalid_argument("DistributionSpec: lo > hi");
  if (!(valid_fraction >= 0.0 && valid_fraction <= 1.0))
    throw std::invalid_argument("DistributionSpec: valid_fraction outside [0,1]");
  const bool needs_even = kind == DistributionKind::compositional ||
                          ((kind == DistributionKind::train_mix || kind == DistributionKind::long_range) &&
                           valid_fraction > 0.0);
  if (needs_even && lo == hi && lo % 2 == 1)
    throw std::invalid_argument("DistributionSpec: valid sequences need an even length in range");
}

DistributionSpec DistributionSpec::train_mix(int lo, int hi, double valid_fraction) {
  return {DistributionKind::train_mix, lo, hi, valid_fraction};
}
DistributionSpec DistributionSpec::compositional(int lo, int hi) {
  return {DistributionKind::compositional, lo, hi, 1.0};
}
DistributionSpec DistributionSpec::long_range(int lo, int hi) {
  return {DistributionKind::long_range, lo, hi, 0.5};
}
DistributionSpec DistributionSpec::random(int lo, int hi) {
  return {DistributionKind::random, lo, hi, 0.0};
}

TaskDistributions TaskDistributions::paper() {
  return {DistributionSpec::train_mix(2, 62), DistributionSpec::compositional(2, 62),
          DistributionSpec::long_range(50, 60)};
}

TaskDistributions TaskDistributions::desk() {
  return {DistributionSpec::train_mix(2, 32), DistributionSpec::compositional(2, 32),
          DistributionSpec::long_range(26, 31)};
}

TaskDistributions TaskDistributions::paper_length_restricted() {
  return {DistributionSpec::train_mix(2, 48), DistributionSpec::compositional(2, 48),
          DistributionSpec::long_range(50, 60)};
}

LabeledSequence label_sequence(std::span<const int> tokens) {
  if (tokens.empty() || tokens.front() != kBos) throw std::invalid_argument("label_sequence: missing BOS");
  LabeledSequence out;
  out.tokens.assign(tokens.begin(), tokens.end());
  out.depth.resize(tokens.size());
  out.valid.resize(tokens.size());
  out.bracket_type.assign(tokens.begin(), tokens.end());

  std::vector<int> stack;
  int invalid = 0;
  bool ended = false;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const int tok = tokens[t];
    if (tok < 0 || tok >= kMeaningfulTokens)
      throw std::invalid_argument("label_sequence: token id outside the meaningful range");
    if (t > 0 && tok == kBos) throw std::invalid_argument("label_sequence: BOS after position 0");
    if (ended && tok != kPad) throw std::invalid_argument("label_sequence: token after EOS");
    if (!ended && t > 0 && tok == kPad) throw std::invalid_argument("label_sequence: PAD before EOS");
    if (tok == kEos) ended = true;

    if (is_opener(tok)) {
      stack.push_back(family(tok));
    } else if (is_closer(tok)) {
      if (stack.empty()) {
        invalid = 1;
      } else {
        if (stack.back() != family(tok)) invalid = 1;
        stack.pop_back();
      }
    }
    out.depth[t] = std::min(static_cast<int>(stack.size()), kMaxDepth);
    out.valid[t] = invalid;
  }
  return out;
}

bool is_dyck_valid(std::span<const int> tokens) {
  std::vector<int> stack;
  for (int tok : tokens) {
    if (is_opener(tok)) {
      stack.push_back(family(tok));
    } else if (is_closer(tok)) {
      if (stack.empty() || stack.back() != family(tok)) return false;
      stack.pop_back();
    }
  }
  return stack.empty();
}

LabeledSequence sample_sequence(const DistributionSpec& spec, Rng& rng) {
  spec.validate();
  std::vector<int> brackets;
  switch (spec.kind) {
    case DistributionKind::train_mix:
    case DistributionKind::long_range: brackets = mixed_brackets(spec, rng); break;
    case DistributionKind::compositional: brackets = compositional_brackets(spec, rng); break;
    case DistributionKind::random: brackets = random_brackets(uniform_int(rng, spec.lo, spec.hi), rng); break;
  }
  const auto tokens = with_markers(brackets);
  return label_sequence(tokens);
}

std::vector<LabeledSequence> sample_sequences(const DistributionSpec& spec, std::size_t count, Rng& rng) {
  std::vector<LabeledSequence> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(sample_sequence(spec, rng));
  return out;
}

std::vector<LabeledSequence> sample_sequences(const DistributionSpec& spec, std::size_t count,
                                              std::uint64_t seed) {
  Rng rng(seed);
  return sample_sequences(spec, count, rng);
}

void write_dataset(const std::filesystem::path& stem, const std::vector<LabeledSequence>& seqs,
                   const DistributionSpec& spec, std::uint64_t seed) {
  auto bin_path = stem;
  bin_path += ".bin";
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("write_dataset: cannot open " + bin_path.string());
  bin.write(kDatasetMagic, 4);
  bin.write(reinterpret_cast<const char*>(&kDatasetVersion), sizeof kDatasetVersion);
  const auto count = static_cast<std::uint64_t>(seqs.size());
  bin.write(reinterpret_cast<const char*>(&count), sizeof count);
  for (const auto& s : seqs) {
    const auto len = static_cast<std::uint32_t>(s.size());
    bin.write(reinterpret_cast<const char*>(&len), sizeof len);
    for (const auto* stream : {&s.tokens, &s.depth, &s.valid, &s.bracket_type}) {
      std::vector<std::uint8_t> bytes(stream->begin(), stream->end());
      bin.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
  }
  if (!bin) throw std::runtime_error("write_dataset: write failed for " + bin_path.string());

  nlohmann::json manifest = {
      {"format", "dyck3-records"},
      {"version", kDatasetVersion},
      {"spec",
       {{"kind", to_string(spec.kind)},
        {"length_range", {spec.lo, spec.hi}},
        {"valid_fraction", spec.valid_fraction}}},
      {"seed", seed},
      {"count", count},
  };
  auto json_path = stem;
  json_path += ".json";
  std::ofstream(json_path) << manifest.dump(2) << '\n';
}

std::vector<LabeledSequence> read_dataset(const std::filesystem::path& stem) {
  auto bin_path = stem;
  bin_path += ".bin";
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("read_dataset: cannot open " + bin_path.string());
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t count = 0;
  bin.read(magic, 4);
  bin.read(reinterpret_cast<char*>(&version), sizeof version);
  bin.read(reinterpret_cast<char*>(&count), sizeof count);
  if (!bin || !std::equal(magic, magic + 4, kDatasetMagic) || version != kDatasetVersion)
    throw std::runtime_error("read_dataset: bad header in " + bin_path.string());
  std::vector<LabeledSequence> out;
  out.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t len = 0;
    bin.read(reinterpret_cast<char*>(&len), sizeof len);
    LabeledSequence s;
    for (auto* stream : {&s.tokens, &s.depth, &s.valid, &s.bracket_type}) {
      std::vector<std::uint8_t> bytes(len);
      bin.read(reinterpret_cast<char*>(bytes.data()), len);
      stream->assign(bytes.begin(), bytes.end());
    }
    if (!bin) throw std::runtime_error("read_dataset: truncated record stream");
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace rotaudit::dyck
