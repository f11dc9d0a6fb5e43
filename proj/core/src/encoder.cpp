#include "switchbert/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "switchbert/ops.hpp"

namespace switchbert {

namespace {

Tensor normal_tensor(Shape shape, DType dtype, Rng& rng, double std) {
  Tensor t = Tensor::zeros(std::move(shape), dtype);
  for (std::size_t i = 0; i < t.numel(); ++i) t.set(i, std * rng.normal());
  return t;
}

Tensor row_of(const Tensor& x, std::size_t row) {
  return reshape(slice_rows(x, row, row + 1), {x.dim(1)});
}

}  // namespace

SwitchBertModel::SwitchBertModel(EncoderConfig config, std::uint64_t seed)
    : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  const DType dt = c.dtype;
  Rng rng(derive_seed(seed, 0x5eed'1417ULL));
  auto& s = params_;

  emb_.feat_w = s.add("embed.feat_w", normal_tensor({c.feature_dim, c.dim}, dt, rng, c.init_std));
  emb_.feat_b = s.add("embed.feat_b", Tensor::zeros({c.dim}, dt));
  emb_.box_w = s.add("embed.box_w", normal_tensor({4, c.dim}, dt, rng, c.init_std));
  emb_.box_b = s.add("embed.box_b", Tensor::zeros({c.dim}, dt));
  emb_.img_embed = s.add("embed.img", normal_tensor({c.dim}, dt, rng, c.init_std));
  emb_.visual_type = s.add("embed.visual_type", normal_tensor({c.dim}, dt, rng, c.init_std));
  emb_.token_table = s.add("embed.tokens", normal_tensor({c.vocab, c.dim}, dt, rng, c.init_std));
  emb_.position_table =
      s.add("embed.positions", normal_tensor({c.max_text, c.dim}, dt, rng, c.init_std));
  emb_.text_type = s.add("embed.text_type", normal_tensor({c.dim}, dt, rng, c.init_std));
  emb_.vis_ln_gain = s.add("embed.vis_ln.gain", Tensor::full({c.dim}, 1.0, dt));
  emb_.vis_ln_bias = s.add("embed.vis_ln.bias", Tensor::zeros({c.dim}, dt));
  emb_.txt_ln_gain = s.add("embed.txt_ln.gain", Tensor::full({c.dim}, 1.0, dt));
  emb_.txt_ln_bias = s.add("embed.txt_ln.bias", Tensor::zeros({c.dim}, dt));

  for (std::size_t l = 1; l <= c.layers; ++l) {
    const std::string tag = std::to_string(l);
    if (l >= 2)
      sib_routers_.push_back(
          make_router_params(s, "sib." + tag, c.dim, 4, dt, rng, c.init_std));
    layers_.push_back(make_layer_params(s, "layer." + tag, c.dim, c.heads, c.ffn_dim, dt, rng,
                                        c.init_std, c.ln_eps));
    sab_routers_.push_back(
        make_router_params(s, "sab." + tag, c.dim, kNumModes, dt, rng, c.init_std));
  }

  heads_.mlm_w = s.add("head.mlm.w", Tensor::zeros({c.dim, c.vocab}, dt));
  heads_.mlm_b = s.add("head.mlm.b", Tensor::zeros({c.vocab}, dt));
  heads_.mrc_w = s.add("head.mrc.w", Tensor::zeros({c.dim, c.num_classes}, dt));
  heads_.mrc_b = s.add("head.mrc.b", Tensor::zeros({c.num_classes}, dt));
  heads_.itm_w = s.add("head.itm.w", Tensor::zeros({c.dim, 1}, dt));
  heads_.itm_b = s.add("head.itm.b", Tensor::zeros({1}, dt));
}

Tensor embed_text(std::span<const std::size_t> token_ids, std::span<const std::size_t> positions,
                  const EmbeddingParams& params, double ln_eps) {
  if (token_ids.empty()) throw ContractError("embed_text: empty token sequence");
  if (positions.size() != token_ids.size())
    throw DimensionError("embed_text: " + std::to_string(positions.size()) + " positions for " +
                         std::to_string(token_ids.size()) + " tokens");
  const std::size_t vocab = params.token_table.dim(0);
  for (auto id : token_ids)
    if (id >= vocab)
      throw ContractError("embed_text: token id " + std::to_string(id) + " >= vocab " +
                          std::to_string(vocab));
  const std::size_t max_pos = params.position_table.dim(0);
  for (auto p : positions)
    if (p >= max_pos)
      throw ContractError("embed_text: position " + std::to_string(p) + " >= table size " +
                          std::to_string(max_pos));
  Tensor x = add(gather_rows(params.token_table, token_ids),
                 gather_rows(params.position_table, positions));
  x = add_rowvec(x, params.text_type);
  return layer_norm(x, params.txt_ln_gain, params.txt_ln_bias, ln_eps);
}

Tensor embed_visual(const Tensor& features, const Tensor& boxes, const EmbeddingParams& params,
                    double ln_eps) {
  if (features.rank() != 2 || boxes.rank() != 2 || boxes.dim(1) != 4 ||
      boxes.dim(0) != features.dim(0))
    throw DimensionError("embed_visual: features " + shape_str(features.shape()) + ", boxes " +
                         shape_str(boxes.shape()));
  for (double b : boxes.values())
    if (!(b >= 0.0 && b <= 1.0))
      throw ContractError("embed_visual: box coordinate " + std::to_string(b) +
                          " outside [0, 1]");
  const std::size_t d = params.img_embed.numel();
  const Tensor regions =
      add(linear(features, params.feat_w, params.feat_b), linear(boxes, params.box_w, params.box_b));
  const Tensor img = reshape(params.img_embed, {1, d});
  const Tensor parts[] = {img, regions};
  const Tensor x = add_rowvec(concat_rows(parts), params.visual_type);
  return layer_norm(x, params.vis_ln_gain, params.vis_ln_bias, ln_eps);
}

SequenceLayout SequenceLayout::build(std::size_t n_img, std::size_t n_txt,
                                     std::span<const std::uint8_t> img_pad,
                                     std::span<const std::uint8_t> txt_pad) {
  SequenceLayout out;
  out.n_img = n_img;
  out.n_txt = n_txt;
  if (!img_pad.empty() && img_pad.size() != n_img)
    throw DimensionError("visual pad mask has wrong length");
  if (!txt_pad.empty() && txt_pad.size() != n_txt)
    throw DimensionError("text pad mask has wrong length");
  auto any = [](std::span<const std::uint8_t> v) {
    return std::any_of(v.begin(), v.end(), [](auto f) { return f != 0; });
  };
  out.padded = any(img_pad) || any(txt_pad);
  std::vector<std::uint8_t> pad;
  if (out.padded) {
    out.img_pad.assign(n_img, 0);
    out.txt_pad.assign(n_txt, 0);
    if (!img_pad.empty()) std::copy(img_pad.begin(), img_pad.end(), out.img_pad.begin());
    if (!txt_pad.empty()) std::copy(txt_pad.begin(), txt_pad.end(), out.txt_pad.begin());
    pad = out.img_pad;
    pad.insert(pad.end(), out.txt_pad.begin(), out.txt_pad.end());
    out.keep.resize(pad.size());
    for (std::size_t i = 0; i < pad.size(); ++i) out.keep[i] = pad[i] ? 0 : 1;
  }
  for (std::size_t m = 0; m < kNumModes; ++m)
    out.masks[m] = build_mode_mask(mode_from_index(m), n_img, n_txt, pad);
  return out;
}

RouteResult route_switch(const Tensor& pi, std::span<const std::uint8_t> allowed,
                         std::optional<std::size_t> forced, std::size_t topk, int layer,
                         BlockKind block, const ForwardOptions& opts) {
  const std::size_t routes = pi.numel();
  RouteResult r;
  r.decision.layer = layer;
  r.decision.block = block;
  r.decision.pi = pi.values();
  r.decision.tau = opts.tau;
  r.decision.mode = opts.mode;
  r.decision.forced = forced.has_value();
  if (forced) {
    if (*forced >= routes)
      throw ContractError("forced route " + std::to_string(*forced) + " out of range");
    std::vector<double> onehot(routes, 0.0);
    onehot[*forced] = 1.0;
    r.p = Tensor::from_values({routes}, onehot, pi.dtype());
  } else {
    if (opts.mode == RouteMode::Train && opts.noise) {
      const auto g = sample_gumbel(*opts.noise, routes);
      r.p = gumbel_softmax(pi, opts.tau, g);
    } else {
      r.p = gumbel_softmax(pi, opts.tau);
    }
    std::size_t allowed_count = routes;
    if (!allowed.empty()) {
      r.p = restrict_routes(r.p, allowed);
      allowed_count = static_cast<std::size_t>(
          std::count_if(allowed.begin(), allowed.end(), [](auto a) { return a != 0; }));
    }
    if (opts.mode == RouteMode::Train && topk < allowed_count) r.p = apply_topk(r.p, topk);
  }
  r.decision.p = r.p.values();
  r.decision.choice = argmax_lowest(r.decision.p);
  return r;
}

SabResult sab_forward(const Tensor& x_i, const Tensor& x_t, const SequenceLayout& layout,
                      const LayerParams& layer, const RouterParams& router,
                      std::span<const std::uint8_t> mode_space, int layer_index,
                      const ForwardOptions& opts, std::size_t topk) {
  if (x_i.rank() != 2 || x_t.rank() != 2 || x_i.dim(1) != x_t.dim(1))
    throw DimensionError("sab_forward: modality widths differ, " + shape_str(x_i.shape()) +
                         " vs " + shape_str(x_t.shape()));
  const Tensor z_i = pool_modality(x_i, layout.img_pad);
  const Tensor z_t = pool_modality(x_t, layout.txt_pad);
  const Tensor pi = mode_distribution(alignment_degree(z_i, z_t), router, mode_space);
  const auto forced = opts.overrides ? opts.overrides->sab_route(layer_index) : std::nullopt;
  RouteResult route = route_switch(pi, mode_space, forced, topk, layer_index, BlockKind::SAB, opts);

  const Tensor both[] = {x_i, x_t};
  const Tensor x = concat_rows(both);
  const SharedAttention shared(x, layer, layer_index);
  Tensor heads;
  if (opts.mode == RouteMode::Train) {
    heads = combine_soft(route.p, kNumModes,
                         [&](std::size_t n) { return shared.attend(layout.masks[n]); });
  } else {
    heads = shared.attend(layout.masks[route.decision.choice]);
  }
  const Tensor xbar =
      residual_norm(shared.project_output(heads), x, layer.ln1_gain, layer.ln1_bias, layer.ln_eps);
  Tensor y = ffn_block(xbar, layer);
  if (layout.padded) y = mask_rows(y, layout.keep);
  const std::size_t ni = x_i.dim(0);
  return {slice_rows(y, 0, ni), slice_rows(y, ni, y.dim(0)), std::move(route.decision)};
}

std::array<InputPair, 4> sib_candidates(const EncoderState& state, int l) {
  if (l < 2) throw ContractError("sib_candidates: layer " + std::to_string(l) + " has no SIB");
  const auto a = static_cast<std::size_t>(l - 1);
  const auto b = static_cast<std::size_t>(l - 2);
  if (state.img.size() <= a || state.txt.size() <= a || !state.img[a].defined() ||
      !state.txt[a].defined())
    throw ContractError("sib_candidates: depth " + std::to_string(a) + " not populated");
  return {InputPair{state.img[a], state.txt[a]}, InputPair{state.img[a], state.txt[b]},
          InputPair{state.img[b], state.txt[a]}, InputPair{state.img[b], state.txt[b]}};
}

SibResult sib_forward(const EncoderState& state, int l, const SequenceLayout& layout,
                      const RouterParams& router, const ForwardOptions& opts, std::size_t topk) {
  const auto cands = sib_candidates(state, l);
  const auto a = static_cast<std::size_t>(l - 1);
  const Tensor z_i = pool_modality(state.img[a], layout.img_pad);
  const Tensor z_t = pool_modality(state.txt[a], layout.txt_pad);
  const Tensor pi = mode_distribution(alignment_degree(z_i, z_t), router);
  const auto forced = opts.overrides ? opts.overrides->sib_route(l) : std::nullopt;
  RouteResult route = route_switch(pi, {}, forced, topk, l, BlockKind::SIB, opts);
  SibResult out;
  if (opts.mode == RouteMode::Train) {
    out.x_i = combine_soft(route.p, 4, [&](std::size_t n) { return cands[n].x_i; });
    out.x_t = combine_soft(route.p, 4, [&](std::size_t n) { return cands[n].x_t; });
  } else {
    out.x_i = cands[route.decision.choice].x_i;
    out.x_t = cands[route.decision.choice].x_t;
  }
  out.decision = std::move(route.decision);
  return out;
}

EncoderOutput encoder_forward(const SwitchBertModel& model, const MultimodalSample& sample,
                              const ForwardOptions& opts) {
  const auto& cfg = model.config();
  const std::size_t R = sample.regions;
  if (R == 0) throw ContractError("encoder_forward: sample has no regions");
  if (sample.features.size() != R * cfg.feature_dim)
    throw DimensionError("encoder_forward: " + std::to_string(sample.features.size()) +
                         " feature values for " + std::to_string(R) + " regions of width " +
                         std::to_string(cfg.feature_dim));
  if (sample.boxes.size() != R * 4) throw DimensionError("encoder_forward: bad box array");
  if (sample.n_img() > cfg.max_visual || sample.n_txt() > cfg.max_text)
    throw ContractError("encoder_forward: sequence longer than configured maximum");

  const SequenceLayout layout =
      SequenceLayout::build(sample.n_img(), sample.n_txt(), sample.img_pad, sample.txt_pad);
  const std::vector<double> feats(sample.features.begin(), sample.features.end());
  const std::vector<double> boxes(sample.boxes.begin(), sample.boxes.end());
  std::vector<std::size_t> positions(sample.n_txt());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;

  const auto& emb = model.embeddings();
  EncoderState state;
  state.img.resize(cfg.layers + 1);
  state.txt.resize(cfg.layers + 1);
  state.img[0] = embed_visual(Tensor::from_values({R, cfg.feature_dim}, feats, cfg.dtype),
                              Tensor::from_values({R, 4}, boxes, cfg.dtype), emb, cfg.ln_eps);
  state.txt[0] = embed_text(sample.tokens, positions, emb, cfg.ln_eps);

  const std::size_t sab_k = opts.sab_topk ? opts.sab_topk : cfg.sab_topk;
  const std::size_t sib_k = opts.sib_topk ? opts.sib_topk : cfg.sib_topk;
  EncoderOutput out;
  out.decisions.reserve(2 * cfg.layers - 1);
  for (int l = 1; l <= static_cast<int>(cfg.layers); ++l) {
    Tensor in_i = state.img[l - 1], in_t = state.txt[l - 1];
    if (l >= 2) {
      SibResult s = sib_forward(state, l, layout, model.sib_router(l), opts, sib_k);
      in_i = std::move(s.x_i);
      in_t = std::move(s.x_t);
      out.decisions.push_back(std::move(s.decision));
    }
    SabResult r = sab_forward(in_i, in_t, layout, model.layer(l), model.sab_router(l),
                              cfg.mode_space, l, opts, sab_k);
    state.img[l] = std::move(r.y_i);
    state.txt[l] = std::move(r.y_t);
    out.decisions.push_back(std::move(r.decision));
  }
  out.x_i = state.img[cfg.layers];
  out.x_t = state.txt[cfg.layers];
  out.img = row_of(out.x_i, 0);
  out.cls = row_of(out.x_t, 0);
  out.fused = mul(out.img, out.cls);
  return out;
}

Tensor itm_score(const SwitchBertModel& model, const EncoderOutput& out) {
  const auto& h = model.heads();
  const Tensor& v = model.config().itm_readout == ItmReadout::Cls ? out.cls : out.fused;
  return reshape(linear(reshape(v, {1, v.numel()}), h.itm_w, h.itm_b), {1});
}

namespace {

FlopBreakdown base_flops(const EncoderConfig& c, std::size_t n_img, std::size_t n_txt) {
  const std::uint64_t n = n_img + n_txt, d = c.dim, f = c.ffn_dim, L = c.layers;
  const std::uint64_t R = n_img - 1;
  FlopBreakdown b;
  b.embedding = 2 * R * c.feature_dim * d + 2 * R * 4 * d;
  b.qkv = L * 3 * 2 * n * d * d;
  b.scores = L * 2 * n * n * d;
  b.output = L * 2 * n * d * d;
  b.ffn = L * 2 * (2 * n * d * f);
  b.router = L * (2 * d * d + 2 * d * kNumModes) + (L - 1) * (2 * d * d + 2 * d * 4);
  return b;
}

}  // namespace

FlopBreakdown count_flops(const EncoderConfig& config, std::size_t n_img, std::size_t n_txt,
                          std::size_t active_modes) {
  if (active_modes < 1 || active_modes > kNumModes)
    throw ContractError("count_flops: active modes must be in [1, 4]");
  if (n_img < 1 || n_txt < 1) throw ContractError("count_flops: empty modality");
  FlopBreakdown b = base_flops(config, n_img, n_txt);
  const std::uint64_t n = n_img + n_txt;
  b.values = config.layers * active_modes * 2 * n * n * config.dim;
  return b;
}

FlopBreakdown count_flops(const EncoderConfig& config, std::size_t n_img, std::size_t n_txt,
                          std::span<const RouteDecision> trace) {
  if (n_img < 1 || n_txt < 1) throw ContractError("count_flops: empty modality");
  FlopBreakdown b = base_flops(config, n_img, n_txt);
  const std::uint64_t n = n_img + n_txt;
  std::size_t sab = 0;
  for (const auto& dec : trace) {
    if (dec.block != BlockKind::SAB) continue;
    ++sab;
    std::uint64_t active = 1;
    if (dec.mode == RouteMode::Train)
      active = static_cast<std::uint64_t>(
          std::count_if(dec.p.begin(), dec.p.end(), [](double v) { return v != 0.0; }));
    b.values += active * 2 * n * n * config.dim;
  }
  if (sab != config.layers)
    throw ContractError("count_flops: trace holds " + std::to_string(sab) + " SAB decisions for " +
                        std::to_string(config.layers) + " layers");
  return b;
}

}  // namespace switchbert
