#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>

#include "switchbert/attention.hpp"
#include "switchbert/router.hpp"
#include "switchbert/tensor.hpp"

namespace switchbert {

/// Which vector the matching head scores.
enum class ItmReadout : std::uint8_t {
  Cls = 0,    // final CLS state
  Fused = 1,  // IMG ⊙ CLS
};

const char* to_string(ItmReadout readout) noexcept;
ItmReadout parse_readout(const std::string& text);

struct EncoderConfig {
  std::size_t layers = 4;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t vocab = 1000;
  std::size_t feature_dim = 32;   // d_i
  std::size_t num_classes = 16;   // C
  std::size_t max_visual = 8;     // N_i, IMG slot included
  std::size_t max_text = 16;      // N_t, CLS and SEP included
  double init_std = 0.02;
  double ln_eps = 1e-5;
  DType dtype = DType::F32;
  std::size_t sab_topk = 4;
  std::size_t sib_topk = 4;
  /// Modes the SAB switcher may pick.
  std::array<std::uint8_t, kNumModes> mode_space{1, 1, 1, 1};
  ItmReadout itm_readout = ItmReadout::Cls;

  /// Throws ConfigError on inconsistent values.
  void validate() const;
  std::size_t mode_space_size() const;
};

/// Parses "all", "M0", "M1,M2", ... into mode-space flags.
std::array<std::uint8_t, kNumModes> parse_mode_space(const std::string& text);
std::string mode_space_str(const std::array<std::uint8_t, kNumModes>& flags);

/// Debug overrides that pin switchers to fixed routes, e.g.
/// "SAB:1=M3,SAB:2=M0,SIB:2=0" or "SAB:*=M0,SIB:*=0".
struct RouteOverrides {
  std::map<int, InteractionMode> sab;
  std::map<int, std::size_t> sib;
  std::optional<InteractionMode> sab_all;
  std::optional<std::size_t> sib_all;

  static RouteOverrides parse(const std::string& text);
  std::string str() const;
  bool empty() const noexcept { return sab.empty() && sib.empty() && !sab_all && !sib_all; }

  std::optional<std::size_t> sab_route(int layer) const;
  std::optional<std::size_t> sib_route(int layer) const;
};

/// Per-call switcher settings.
struct ForwardOptions {
  RouteMode mode = RouteMode::Infer;
  double tau = 1.0;
  /// Gumbel noise source for training; null means zero noise.
  Rng* noise = nullptr;
  /// Zero overrides take the values from EncoderConfig.
  std::size_t sab_topk = 0;
  std::size_t sib_topk = 0;
  const RouteOverrides* overrides = nullptr;
};

}  // namespace switchbert
