#include "switchbert/config.hpp"

#include <sstream>

namespace switchbert {

const char* to_string(ItmReadout readout) noexcept {
  return readout == ItmReadout::Cls ? "cls" : "fused";
}

ItmReadout parse_readout(const std::string& text) {
  if (text == "cls") return ItmReadout::Cls;
  if (text == "fused") return ItmReadout::Fused;
  throw ConfigError("unknown ITM readout '" + text + "' (expected cls or fused)");
}

void EncoderConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (layers < 2) fail("layers must be >= 2");
  if (dim == 0 || heads == 0 || dim % heads != 0) fail("heads must divide dim");
  if (ffn_dim == 0) fail("ffn_dim must be >= 1");
  if (vocab < 8) fail("vocab too small");
  if (feature_dim == 0 || num_classes < 2) fail("feature_dim >= 1 and num_classes >= 2 required");
  if (max_visual < 2) fail("max_visual must leave room for IMG and one region");
  if (max_text < 3) fail("max_text must be >= 3");
  if (!(init_std > 0.0) || !(ln_eps > 0.0)) fail("init_std and ln_eps must be positive");
  if (sab_topk < 1 || sab_topk > kNumModes) fail("topk must be in [1, 4]");
  if (sib_topk < 1 || sib_topk > 4) fail("sib_topk must be in [1, 4]");
  if (mode_space_size() == 0) fail("mode space is empty");
}

std::size_t EncoderConfig::mode_space_size() const {
  std::size_t n = 0;
  for (auto f : mode_space) n += f ? 1 : 0;
  return n;
}

std::array<std::uint8_t, kNumModes> parse_mode_space(const std::string& text) {
  if (text == "all") return {1, 1, 1, 1};
  if (text == "joint") return {0, 0, 0, 1};
  if (text == "cross") return {0, 1, 1, 0};
  std::array<std::uint8_t, kNumModes> flags{0, 0, 0, 0};
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ','))
    flags[static_cast<std::size_t>(parse_mode(item))] = 1;
  return flags;
}

std::string mode_space_str(const std::array<std::uint8_t, kNumModes>& flags) {
  std::string out;
  for (std::size_t i = 0; i < kNumModes; ++i) {
    if (!flags[i]) continue;
    if (!out.empty()) out += ',';
    out += to_string(mode_from_index(i));
  }
  return out;
}

RouteOverrides RouteOverrides::parse(const std::string& text) {
  RouteOverrides out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    const auto colon = item.find(':');
    const auto eq = item.find('=');
    if (colon == std::string::npos || eq == std::string::npos || eq < colon)
      throw ConfigError("bad route override '" + item + "' (expected BLOCK:LAYER=VALUE)");
    const std::string block = item.substr(0, colon);
    const std::string layer = item.substr(colon + 1, eq - colon - 1);
    const std::string value = item.substr(eq + 1);
    std::optional<int> l;
    if (layer != "*") {
      try {
        std::size_t used = 0;
        l = std::stoi(layer, &used);
        if (used != layer.size() || *l < 1) throw std::invalid_argument(layer);
      } catch (const std::exception&) {
        throw ConfigError("bad layer index '" + layer + "' in route override");
      }
    }
    if (block == "SAB") {
      const InteractionMode m =
          value.size() == 1 && value[0] >= '0' && value[0] <= '3'
              ? mode_from_index(static_cast<std::size_t>(value[0] - '0'))
              : parse_mode(value);
      if (l) out.sab[*l] = m;
      else out.sab_all = m;
    } else if (block == "SIB") {
      if (value.size() != 1 || value[0] < '0' || value[0] > '3')
        throw ConfigError("SIB route must be 0..3, got '" + value + "'");
      if (l && *l < 2) throw ConfigError("SIB blocks exist only for layers >= 2");
      const std::size_t idx = static_cast<std::size_t>(value[0] - '0');
      if (l) out.sib[*l] = idx;
      else out.sib_all = idx;
    } else {
      throw ConfigError("unknown block '" + block + "' in route override");
    }
  }
  return out;
}

std::string RouteOverrides::str() const {
  std::string out;
  auto add = [&](const std::string& s) {
    if (!out.empty()) out += ',';
    out += s;
  };
  if (sab_all) add(std::string("SAB:*=") + to_string(*sab_all));
  for (const auto& [l, m] : sab) add("SAB:" + std::to_string(l) + "=" + to_string(m));
  if (sib_all) add("SIB:*=" + std::to_string(*sib_all));
  for (const auto& [l, i] : sib) add("SIB:" + std::to_string(l) + "=" + std::to_string(i));
  return out;
}

std::optional<std::size_t> RouteOverrides::sab_route(int layer) const {
  if (auto it = sab.find(layer); it != sab.end()) return static_cast<std::size_t>(it->second);
  if (sab_all) return static_cast<std::size_t>(*sab_all);
  return std::nullopt;
}

std::optional<std::size_t> RouteOverrides::sib_route(int layer) const {
  if (auto it = sib.find(layer); it != sib.end()) return it->second;
  return sib_all;
}

}  // namespace switchbert
