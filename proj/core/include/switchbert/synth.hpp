#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "switchbert/encoder.hpp"
#include "switchbert/rng.hpp"

namespace switchbert {

struct SynthConfig {
  std::size_t num_classes = 16;
  std::size_t feature_dim = 32;
  std::size_t min_objects = 1;
  std::size_t max_objects = 4;
  std::size_t vocab = 1000;
  std::size_t max_text = 16;
  double attr_std = 0.05;       // per-dimension attribute noise
  double attr_max_norm = 0.4;   // attribute vectors are clipped to this norm
  double detector_scale = 10.0;
  std::uint64_t world_seed = 0;  // class prototypes; shared by corpora of one task

  void validate() const;
};

/// Word ids used by the caption template.
namespace words {
inline constexpr std::size_t kA = tokens::kFirstWordId;
inline constexpr std::size_t kLeft = kA + 1;
inline constexpr std::size_t kRight = kA + 2;
inline constexpr std::size_t kAbove = kA + 3;
inline constexpr std::size_t kBelow = kA + 4;
inline constexpr std::size_t kFirstClass = kA + 5;
}  // namespace words

inline std::size_t class_word(std::size_t cls) { return words::kFirstClass + cls; }

struct LatentSlot {
  std::size_t cls = 0;
  std::array<double, 4> box{};  // x1, y1, x2, y2
  std::vector<double> attr;
};

struct LatentScene {
  std::vector<LatentSlot> slots;
};

struct PairedSample {
  LatentScene scene;
  std::vector<float> features;     // K × d_i
  std::vector<float> class_dists;  // K × C
  std::vector<std::size_t> tokens;

  std::vector<std::size_t> classes() const;
  MultimodalSample to_input() const;
};

struct Corpus {
  SynthConfig config;
  std::vector<std::vector<double>> prototypes;  // C × d_i unit vectors
  std::vector<PairedSample> samples;
  std::vector<std::vector<std::size_t>> by_class;  // sample indices containing each class

  void index_classes();
};

/// Unit class prototypes whose minimum pairwise distance exceeds twice the
/// attribute norm bound, so every region lies nearest its own prototype.
std::vector<std::vector<double>> make_prototypes(const SynthConfig& config, std::uint64_t seed);

/// softmax(−scale · ‖feature − prototype_c‖).
std::vector<double> detector_distribution(std::span<const double> feature,
                                          const std::vector<std::vector<double>>& prototypes,
                                          double scale);

/// CLS a c1 REL a c2 ... a cK SEP, REL relating consecutive slots by box centre.
std::vector<std::size_t> caption_tokens(const LatentScene& scene);

/// Deterministic in (n, config, seed); prototypes come from config.world_seed.
/// Samples are generated in blocks with their own derived seeds; class ids are
/// dealt from a shuffled deck inside a block so class marginals stay uniform.
Corpus gen_corpus(std::size_t n, const SynthConfig& config, std::uint64_t seed);

enum class CandidateKind : std::uint8_t { Positive, RandomCaption, RandomImage, HardImage };
const char* to_string(CandidateKind kind) noexcept;

struct FourwayGroup {
  std::array<std::size_t, 4> image{};    // corpus index of each candidate's image
  std::array<std::size_t, 4> caption{};  // corpus index of each candidate's caption
  std::array<CandidateKind, 4> kind{};
  std::size_t positive = 0;
  bool hard_fallback = false;
};

/// One group per requested anchor: positive, random-caption, random-image and
/// hard-image candidates, shuffled. The hard image shares at least one class
/// with the anchor but not the whole class set; failing that a random image
/// is used and the group is flagged.
FourwayGroup make_fourway_group(const Corpus& corpus, std::size_t anchor, Rng& rng);
std::vector<FourwayGroup> gen_fourway_batch(const Corpus& corpus, std::size_t groups, Rng& rng);

/// Image of one sample with the caption of another.
MultimodalSample compose_pair(const Corpus& corpus, std::size_t image, std::size_t caption);

// Line-delimited corpus records -------------------------------------------

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

void save_corpus(const Corpus& corpus, const std::string& path);
/// Restores samples; prototypes are not stored and stay empty.
Corpus load_corpus(const std::string& path, const SynthConfig& config);

}  // namespace switchbert
