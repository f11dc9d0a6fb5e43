#include "switchbert/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

namespace switchbert {

namespace {

constexpr std::size_t kBlock = 16;

double distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

std::vector<std::size_t> sorted_classes(const PairedSample& s) {
  auto c = s.classes();
  std::sort(c.begin(), c.end());
  return c;
}

}  // namespace

void SynthConfig::validate() const {
  if (num_classes < 2) throw ConfigError("synth: num_classes must be >= 2");
  if (feature_dim < 2) throw ConfigError("synth: feature_dim must be >= 2");
  if (min_objects < 1 || min_objects > max_objects)
    throw ConfigError("synth: need 1 <= min_objects <= max_objects");
  if (max_objects > num_classes) throw ConfigError("synth: more objects than classes");
  if (3 * max_objects + 1 > max_text)
    throw ConfigError("synth: captions of " + std::to_string(max_objects) +
                      " objects need " + std::to_string(3 * max_objects + 1) +
                      " tokens, max_text is " + std::to_string(max_text));
  if (vocab < words::kFirstClass + num_classes)
    throw ConfigError("synth: vocab " + std::to_string(vocab) + " cannot hold the " +
                      std::to_string(words::kFirstClass + num_classes) + " template words");
  if (!(attr_std >= 0.0) || !(attr_max_norm >= 0.0) || !(detector_scale > 0.0))
    throw ConfigError("synth: noise and scale parameters must be non-negative");
}

std::vector<std::size_t> PairedSample::classes() const {
  std::vector<std::size_t> c;
  for (const auto& s : scene.slots) c.push_back(s.cls);
  return c;
}

MultimodalSample PairedSample::to_input() const {
  MultimodalSample m;
  m.regions = scene.slots.size();
  m.features = features;
  m.class_dists = class_dists;
  for (const auto& s : scene.slots)
    for (double b : s.box) m.boxes.push_back(static_cast<float>(b));
  m.tokens = tokens;
  return m;
}

void Corpus::index_classes() {
  by_class.assign(config.num_classes, {});
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (auto c : samples[i].classes()) {
      if (c >= config.num_classes) throw FormatError("corpus: class id out of range");
      by_class[c].push_back(i);
    }
}

std::vector<std::vector<double>> make_prototypes(const SynthConfig& config, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x9707));
  const double min_gap = 2.0 * config.attr_max_norm;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::vector<std::vector<double>> protos(config.num_classes,
                                            std::vector<double>(config.feature_dim));
    for (auto& p : protos) {
      double norm = 0.0;
      for (auto& v : p) {
        v = rng.normal();
        norm += v * v;
      }
      norm = std::sqrt(norm);
      for (auto& v : p) v /= norm;
    }
    double gap = 1e300;
    for (std::size_t a = 0; a < protos.size(); ++a)
      for (std::size_t b = a + 1; b < protos.size(); ++b)
        gap = std::min(gap, distance(protos[a], protos[b]));
    if (gap > min_gap) return protos;
  }
  throw ConfigError("synth: could not place class prototypes " + std::to_string(min_gap) +
                    " apart; lower attr_max_norm or raise feature_dim");
}

std::vector<double> detector_distribution(std::span<const double> feature,
                                          const std::vector<std::vector<double>>& prototypes,
                                          double scale) {
  std::vector<double> logits(prototypes.size());
  for (std::size_t c = 0; c < prototypes.size(); ++c) {
    if (prototypes[c].size() != feature.size())
      throw DimensionError("detector_distribution: prototype width mismatch");
    logits[c] = -scale * distance(feature, prototypes[c]);
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (auto& l : logits) {
    l = std::exp(l - mx);
    z += l;
  }
  for (auto& l : logits) l /= z;
  return logits;
}

std::vector<std::size_t> caption_tokens(const LatentScene& scene) {
  std::vector<std::size_t> t{tokens::kCls};
  const auto& s = scene.slots;
  for (std::size_t k = 0; k < s.size(); ++k) {
    if (k > 0) {
      const double cx0 = 0.5 * (s[k - 1].box[0] + s[k - 1].box[2]);
      const double cy0 = 0.5 * (s[k - 1].box[1] + s[k - 1].box[3]);
      const double cx1 = 0.5 * (s[k].box[0] + s[k].box[2]);
      const double cy1 = 0.5 * (s[k].box[1] + s[k].box[3]);
      const double dx = cx1 - cx0, dy = cy1 - cy0;
      // Relation of the previous object to this one; y grows downward.
      if (std::abs(dx) >= std::abs(dy)) t.push_back(dx > 0 ? words::kLeft : words::kRight);
      else t.push_back(dy > 0 ? words::kAbove : words::kBelow);
    }
    t.push_back(words::kA);
    t.push_back(class_word(s[k].cls));
  }
  t.push_back(tokens::kSep);
  return t;
}

Corpus gen_corpus(std::size_t n, const SynthConfig& config, std::uint64_t seed) {
  if (n < 1) throw ContractError("gen_corpus: n must be >= 1");
  config.validate();
  Corpus corpus;
  corpus.config = config;
  corpus.prototypes = make_prototypes(config, config.world_seed);
  corpus.samples.reserve(n);
  const std::size_t C = config.num_classes, D = config.feature_dim;

  for (std::size_t block = 0; block * kBlock < n; ++block) {
    Rng rng(derive_seed(seed, 1, block));
    std::vector<std::size_t> deck;
    std::size_t next = 0;
    auto refill = [&] {
      deck.resize(C);
      std::iota(deck.begin(), deck.end(), 0);
      shuffle(deck, rng);
      next = 0;
    };
    refill();
    const std::size_t end = std::min(n, (block + 1) * kBlock);
    for (std::size_t i = block * kBlock; i < end; ++i) {
      PairedSample sample;
      const std::size_t K =
          config.min_objects + rng.below(config.max_objects - config.min_objects + 1);
      std::vector<std::size_t> used;
      for (std::size_t k = 0; k < K; ++k) {
        std::size_t cls = C;
        while (cls == C) {
          if (next == deck.size()) refill();
          for (std::size_t j = next; j < deck.size(); ++j)
            if (std::find(used.begin(), used.end(), deck[j]) == used.end()) {
              std::swap(deck[next], deck[j]);
              cls = deck[next++];
              break;
            }
          if (cls == C) refill();
        }
        used.push_back(cls);

        LatentSlot slot;
        slot.cls = cls;
        const double cx = rng.uniform(0.15, 0.85), cy = rng.uniform(0.15, 0.85);
        const double w = rng.uniform(0.1, 0.3), h = rng.uniform(0.1, 0.3);
        slot.box = {std::max(0.0, cx - w / 2), std::max(0.0, cy - h / 2),
                    std::min(1.0, cx + w / 2), std::min(1.0, cy + h / 2)};
        slot.attr.resize(D);
        double norm = 0.0;
        for (auto& a : slot.attr) {
          a = config.attr_std * rng.normal();
          norm += a * a;
        }
        norm = std::sqrt(norm);
        if (norm > config.attr_max_norm)
          for (auto& a : slot.attr) a *= config.attr_max_norm / norm;

        std::vector<double> feat(D);
        for (std::size_t j = 0; j < D; ++j) feat[j] = corpus.prototypes[cls][j] + slot.attr[j];
        for (double f : feat) sample.features.push_back(static_cast<float>(f));
        for (double p : detector_distribution(feat, corpus.prototypes, config.detector_scale))
          sample.class_dists.push_back(static_cast<float>(p));
        sample.scene.slots.push_back(std::move(slot));
      }
      sample.tokens = caption_tokens(sample.scene);
      corpus.samples.push_back(std::move(sample));
    }
  }
  corpus.index_classes();
  return corpus;
}

const char* to_string(CandidateKind kind) noexcept {
  switch (kind) {
    case CandidateKind::Positive: return "positive";
    case CandidateKind::RandomCaption: return "random-caption";
    case CandidateKind::RandomImage: return "random-image";
    case CandidateKind::HardImage: return "hard-image";
  }
  return "?";
}

FourwayGroup make_fourway_group(const Corpus& corpus, std::size_t anchor, Rng& rng) {
  const std::size_t n = corpus.samples.size();
  if (n < 4) throw ContractError("fourway groups need a corpus of at least 4 samples");
  if (anchor >= n) throw ContractError("fourway anchor out of range");
  if (corpus.by_class.size() != corpus.config.num_classes)
    throw ContractError("corpus class index not built");
  const auto& pos = corpus.samples[anchor];
  auto other = [&]() {
    for (int attempt = 0; attempt < 64; ++attempt) {
      const std::size_t j = rng.below(n);
      if (j != anchor && corpus.samples[j].tokens != pos.tokens) return j;
    }
    std::size_t j = rng.below(n - 1);
    return j >= anchor ? j + 1 : j;
  };

  FourwayGroup g;
  const std::size_t rand_caption = other();
  const std::size_t rand_image = other();
  std::size_t hard = n;
  const auto pos_set = sorted_classes(pos);
  for (int attempt = 0; attempt < 64 && hard == n; ++attempt) {
    const std::size_t cls = pos_set[rng.below(pos_set.size())];
    const auto& pool = corpus.by_class[cls];
    const std::size_t j = pool[rng.below(pool.size())];
    if (j != anchor && sorted_classes(corpus.samples[j]) != pos_set) hard = j;
  }
  if (hard == n) {
    hard = other();
    g.hard_fallback = true;
  }

  std::array<std::size_t, 4> order{0, 1, 2, 3};
  for (std::size_t i = 4; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const std::array<std::pair<std::size_t, std::size_t>, 4> pairs = {
      std::pair{anchor, anchor}, std::pair{anchor, rand_caption}, std::pair{rand_image, anchor},
      std::pair{hard, anchor}};
  const std::array<CandidateKind, 4> kinds = {CandidateKind::Positive,
                                              CandidateKind::RandomCaption,
                                              CandidateKind::RandomImage, CandidateKind::HardImage};
  for (std::size_t slot = 0; slot < 4; ++slot) {
    const std::size_t src = order[slot];
    g.image[slot] = pairs[src].first;
    g.caption[slot] = pairs[src].second;
    g.kind[slot] = kinds[src];
    if (src == 0) g.positive = slot;
  }
  return g;
}

std::vector<FourwayGroup> gen_fourway_batch(const Corpus& corpus, std::size_t groups, Rng& rng) {
  std::vector<FourwayGroup> out;
  out.reserve(groups);
  for (std::size_t i = 0; i < groups; ++i)
    out.push_back(make_fourway_group(corpus, rng.below(corpus.samples.size()), rng));
  return out;
}

MultimodalSample compose_pair(const Corpus& corpus, std::size_t image, std::size_t caption) {
  MultimodalSample m = corpus.samples.at(image).to_input();
  m.tokens = corpus.samples.at(caption).tokens;
  return m;
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string floats_b64(const std::vector<float>& v) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(v.size() * 4);
  for (float f : v) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    for (int k = 0; k < 4; ++k) bytes.push_back(static_cast<std::uint8_t>(u >> (8 * k)));
  }
  return base64_encode(bytes);
}

std::vector<float> b64_floats(const std::string& s) {
  const auto bytes = base64_decode(s);
  if (bytes.size() % 4 != 0) throw FormatError("corpus: float payload not a multiple of 4 bytes");
  std::vector<float> v(bytes.size() / 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t u = 0;
    for (int k = 0; k < 4; ++k) u |= static_cast<std::uint32_t>(bytes[4 * i + k]) << (8 * k);
    std::memcpy(&v[i], &u, 4);
  }
  return v;
}

}  // namespace

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  for (std::size_t i = 0; i < bytes.size(); i += 3) {
    const std::uint32_t b0 = bytes[i];
    const std::uint32_t b1 = i + 1 < bytes.size() ? bytes[i + 1] : 0;
    const std::uint32_t b2 = i + 2 < bytes.size() ? bytes[i + 2] : 0;
    const std::uint32_t w = (b0 << 16) | (b1 << 8) | b2;
    out += kAlphabet[(w >> 18) & 63];
    out += kAlphabet[(w >> 12) & 63];
    out += i + 1 < bytes.size() ? kAlphabet[(w >> 6) & 63] : '=';
    out += i + 2 < bytes.size() ? kAlphabet[w & 63] : '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw FormatError("base64: length not a multiple of 4");
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + k];
      if (c == '=' && i + 4 == text.size() && k >= 2) {
        v[k] = 0;
        ++pad;
      } else {
        if (pad) throw FormatError("base64: data after padding");
        v[k] = value(c);
        if (v[k] < 0) throw FormatError("base64: invalid character");
      }
    }
    const std::uint32_t w = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out.push_back(static_cast<std::uint8_t>(w >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>(w >> 8));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(w));
  }
  return out;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write corpus file '" + path + "'");
  for (const auto& s : corpus.samples) {
    nlohmann::json rec;
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& slot : s.scene.slots)
      boxes.push_back({static_cast<float>(slot.box[0]), static_cast<float>(slot.box[1]),
                       static_cast<float>(slot.box[2]), static_cast<float>(slot.box[3])});
    rec["classes"] = s.classes();
    rec["boxes"] = boxes;
    rec["features"] = floats_b64(s.features);
    rec["class_dists"] = floats_b64(s.class_dists);
    rec["tokens"] = s.tokens;
    out << rec.dump() << '\n';
  }
  if (!out) throw IoError("write to corpus file '" + path + "' failed");
}

Corpus load_corpus(const std::string& path, const SynthConfig& config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read corpus file '" + path + "'");
  Corpus corpus;
  corpus.config = config;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    try {
      const auto rec = nlohmann::json::parse(line);
      PairedSample s;
      const auto classes = rec.at("classes").get<std::vector<std::size_t>>();
      const auto boxes = rec.at("boxes").get<std::vector<std::array<float, 4>>>();
      if (classes.empty() || boxes.size() != classes.size())
        throw FormatError(where + ": classes and boxes disagree");
      for (std::size_t k = 0; k < classes.size(); ++k) {
        LatentSlot slot;
        slot.cls = classes[k];
        for (int j = 0; j < 4; ++j) slot.box[j] = boxes[k][j];
        s.scene.slots.push_back(std::move(slot));
      }
      s.features = b64_floats(rec.at("features").get<std::string>());
      s.class_dists = b64_floats(rec.at("class_dists").get<std::string>());
      s.tokens = rec.at("tokens").get<std::vector<std::size_t>>();
      if (s.features.size() != classes.size() * config.feature_dim)
        throw FormatError(where + ": feature payload does not match feature_dim " +
                          std::to_string(config.feature_dim));
      if (s.class_dists.size() != classes.size() * config.num_classes)
        throw FormatError(where + ": class distributions do not match num_classes");
      for (auto t : s.tokens)
        if (t >= config.vocab) throw FormatError(where + ": token id outside vocab");
      corpus.samples.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
  }
  if (corpus.samples.empty()) throw FormatError("corpus file '" + path + "' holds no records");
  corpus.index_classes();
  return corpus;
}

}  // namespace switchbert
