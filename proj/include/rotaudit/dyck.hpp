#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rotaudit/linalg.hpp"

// Bounded-depth Dyck-3 task: token ids, the three per-position label streams,
// and the train / held-out sequence distributions.
namespace rotaudit::dyck {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kFirstOpener = 3;
inline constexpr int kFirstCloser = 6;
inline constexpr int kFamilies = 3;
inline constexpr int kMeaningfulTokens = 9;
inline constexpr int kVocab = 40;
inline constexpr int kMaxDepth = 8;
inline constexpr int kDepthClasses = kMaxDepth + 1;
inline constexpr int kValidClasses = 2;

constexpr bool is_opener(int t) { return t >= kFirstOpener && t < kFirstOpener + kFamilies; }
constexpr bool is_closer(int t) { return t >= kFirstCloser && t < kFirstCloser + kFamilies; }
constexpr bool is_bracket(int t) { return is_opener(t) || is_closer(t); }
constexpr int family(int t) { return is_opener(t) ? t - kFirstOpener : t - kFirstCloser; }
constexpr int opener_of(int fam) { return kFirstOpener + fam; }
constexpr int closer_of(int fam) { return kFirstCloser + fam; }

struct LabeledSequence {
  std::vector<int> tokens;
  std::vector<int> depth;         // clamp(#unmatched openers, 0, 8)
  std::vector<int> valid;         // sticky: 1 from the first violation onwards
  std::vector<int> bracket_type;  // copy of the current token

  std::size_t size() const { return tokens.size(); }
  /// Number of tokens strictly between BOS and EOS.
  int bracket_length() const;
};

enum class DistributionKind { train_mix, compositional, long_range, random };

std::string to_string(DistributionKind kind);
DistributionKind distribution_kind_from_string(const std::string& name);

struct DistributionSpec {
  DistributionKind kind = DistributionKind::train_mix;
  int lo = 2;
  int hi = 62;
  double valid_fraction = 0.5;

  /// Throws std::invalid_argument when the range or fraction is unusable.
  void validate() const;

  static DistributionSpec train_mix(int lo, int hi, double valid_fraction = 0.5);
  static DistributionSpec compositional(int lo, int hi);
  static DistributionSpec long_range(int lo, int hi);
  static DistributionSpec random(int lo, int hi);
};

/// The train and held-out distributions at one model scale.
struct TaskDistributions {
  DistributionSpec train;
  DistributionSpec compositional;
  DistributionSpec long_range;

  static TaskDistributions paper();
  static TaskDistributions desk();
  /// Train lengths capped at 2-48 with the long set left at 50-60.
  static TaskDistributions paper_length_restricted();
};

/// Label a BOS-prefixed token list. Throws std::invalid_argument on ids >= 9,
/// a missing BOS, or brackets outside BOS...EOS.
LabeledSequence label_sequence(std::span<const int> tokens);

/// True when the bracket portion is balanced and correctly nested.
bool is_dyck_valid(std::span<const int> tokens);

LabeledSequence sample_sequence(const DistributionSpec& spec, Rng& rng);
std::vector<LabeledSequence> sample_sequences(const DistributionSpec& spec, std::size_t count, Rng& rng);
std::vector<LabeledSequence> sample_sequences(const DistributionSpec& spec, std::size_t count, std::uint64_t seed);

/// Writes `<stem>.bin` (length-prefixed records) and `<stem>.json` (manifest).
void write_dataset(const std::filesystem::path& stem, const std::vector<LabeledSequence>& seqs,
                   const DistributionSpec& spec, std::uint64_t seed);
std::vector<LabeledSequence> read_dataset(const std::filesystem::path& stem);

}  // namespace rotaudit::dyck
