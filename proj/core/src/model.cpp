#include "egformer/model.hpp"

#include <cmath>
#include <algorithm>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>

namespace egf {

namespace {

Tensor init_weight(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
  std::vector<double> w(fan_in * fan_out);
  for (double& v : w) v = normal(rng);
  return Tensor::parameter({fan_in, fan_out}, std::move(w));
}

Tensor zero_bias(std::size_t n) { return Tensor::parameter({n}, std::vector<double>(n, 0.0)); }

}  // namespace

// ---- architecture strings ---------------------------------------------------

std::string ArchSpec::str() const {
  std::string s;
  for (BlockKind k : encoder) s += to_letter(k);
  s += '-';
  for (BlockKind k : bottleneck) s += to_letter(k);
  s += '-';
  for (BlockKind k : decoder) s += to_letter(k);
  return s;
}

ArchSpec parse_arch(std::string_view s) {
  ArchSpec spec;
  std::vector<BlockKind>* segments[] = {&spec.encoder, &spec.bottleneck, &spec.decoder};
  std::size_t segment = 0;
  std::size_t segment_start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == '-') {
      if (i == segment_start) {
        throw ArchParseError("architecture '" + std::string(s) + "': empty segment at position " +
                                 std::to_string(i),
                             i);
      }
      if (i == s.size()) break;
      if (++segment > 2) {
        throw ArchParseError("architecture '" + std::string(s) +
                                 "': expected three dash-separated segments, extra '-' at position " +
                                 std::to_string(i),
                             i);
      }
      segment_start = i + 1;
      continue;
    }
    const char c = s[i];
    switch (c) {
      case 'E': segments[segment]->push_back(BlockKind::kE); break;
      case 'H': segments[segment]->push_back(BlockKind::kH); break;
      case 'V': segments[segment]->push_back(BlockKind::kV); break;
      case 'M':
      case 'P':
        throw ArchParseError(std::string("letter ") + c + " out of scope (Panoformer PST) at position " +
                                 std::to_string(i),
                             i);
      default:
        throw ArchParseError(std::string("unknown block letter '") + c + "' at position " +
                                 std::to_string(i),
                             i);
    }
  }
  if (segment != 2) {
    throw ArchParseError("architecture '" + std::string(s) +
                             "': expected encoder-bottleneck-decoder, got " +
                             std::to_string(segment + 1) + " segment(s)",
                         s.size());
  }
  if (spec.encoder.size() != spec.decoder.size()) {
    throw ArchParseError("architecture '" + std::string(s) + "': encoder has " +
                             std::to_string(spec.encoder.size()) + " stages but decoder has " +
                             std::to_string(spec.decoder.size()),
                         s.size() - spec.decoder.size());
  }
  return spec;
}

// ---- configuration ----------------------------------------------------------

std::size_t ModelConfig::heads_at(std::size_t level) const {
  if (heads.empty()) throw ConfigError("model: heads list is empty");
  return heads.size() == 1 ? heads[0] : heads.at(level);
}

AttentionConfig ModelConfig::attention_at(std::size_t level) const {
  AttentionConfig cfg = attention;
  cfg.heads = heads_at(level);
  cfg.head_dim = channels_at(level) / cfg.heads;
  return cfg;
}

void ModelConfig::validate() const {
  const std::size_t l = levels();
  if (height == 0 || width == 0 || base_channels == 0) {
    throw ConfigError("model: height, width and base_channels must be positive");
  }
  if (patch_kernel == 0 || patch_kernel % 2 == 0) {
    throw ConfigError("model: patch_kernel must be odd, got " + std::to_string(patch_kernel));
  }
  if (height % (std::size_t{1} << l) != 0 || width % (std::size_t{1} << l) != 0) {
    throw ConfigError("model: " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by 2^" + std::to_string(l));
  }
  if (heads.size() != 1 && heads.size() != l + 1) {
    throw ConfigError("model: heads needs 1 or " + std::to_string(l + 1) + " entries");
  }
  for (std::size_t level = 0; level <= l; ++level) {
    const std::size_t j = heads_at(level);
    if (j == 0 || channels_at(level) % j != 0) {
      throw ConfigError("model: " + std::to_string(channels_at(level)) +
                        " channels at level " + std::to_string(level) +
                        " not divisible by " + std::to_string(j) + " heads");
    }
    attention_at(level).validate(channels_at(level));
  }
}

// ---- CNN-style plumbing layers ---------------------------------------------

Tensor patch_embed(const Tensor& image, const Tensor& weight, const Tensor& bias,
                   std::size_t kernel) {
  if (image.rank() != 3) throw ConfigError("patch_embed: expected [H, W, C] image");
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  if (weight.rank() != 2 || weight.dim(0) != kernel * kernel * c) {
    throw ConfigError("patch_embed: weight " + shape_str(weight.shape()) + " does not fit a " +
                      std::to_string(kernel) + "x" + std::to_string(kernel) + "x" +
                      std::to_string(c) + " neighborhood");
  }
  const long r = static_cast<long>(kernel / 2);
  const long hl = static_cast<long>(h), wl = static_cast<long>(w);
  std::vector<std::size_t> index;
  index.reserve(h * w * kernel * kernel * c);
  for (long v = 0; v < hl; ++v) {
    for (long u = 0; u < wl; ++u) {
      for (long dy = -r; dy <= r; ++dy) {
        const long sv = std::clamp(v + dy, 0L, hl - 1);
        for (long dx = -r; dx <= r; ++dx) {
          const long su = ((u + dx) % wl + wl) % wl;
          for (std::size_t ch = 0; ch < c; ++ch) {
            index.push_back((static_cast<std::size_t>(sv) * w + static_cast<std::size_t>(su)) * c + ch);
          }
        }
      }
    }
  }
  const Tensor cols = gather(image, std::move(index), {h, w, kernel * kernel * c});
  return linear(cols, weight, bias);
}

Tensor downsample(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 3) throw ConfigError("downsample: expected [H, W, C]");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ConfigError("downsample: odd extents " + shape_str(x.shape()));
  }
  std::vector<std::size_t> index;
  index.reserve(x.numel());
  for (std::size_t v = 0; v < h / 2; ++v) {
    for (std::size_t u = 0; u < w / 2; ++u) {
      for (std::size_t dy = 0; dy < 2; ++dy) {
        for (std::size_t dx = 0; dx < 2; ++dx) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            index.push_back(((2 * v + dy) * w + (2 * u + dx)) * c + ch);
          }
        }
      }
    }
  }
  return linear(gather(x, std::move(index), {h / 2, w / 2, 4 * c}), weight, bias);
}

Tensor upsample_fuse(const Tensor& x, const Tensor& skip, const Tensor& weight,
                     const Tensor& bias) {
  if (x.rank() != 3 || skip.rank() != 3) throw ConfigError("upsample_fuse: expected rank-3 inputs");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (skip.dim(0) != 2 * h || skip.dim(1) != 2 * w) {
    throw ConfigError("upsample_fuse: skip " + shape_str(skip.shape()) +
                      " is not twice the extent of " + shape_str(x.shape()));
  }
  std::vector<std::size_t> index;
  index.reserve(4 * x.numel());
  for (std::size_t v = 0; v < 2 * h; ++v) {
    for (std::size_t u = 0; u < 2 * w; ++u) {
      for (std::size_t ch = 0; ch < c; ++ch) index.push_back(((v / 2) * w + u / 2) * c + ch);
    }
  }
  const Tensor up = gather(x, std::move(index), {2 * h, 2 * w, c});
  const Tensor parts[] = {up, skip};
  return linear(concat_last(parts), weight, bias);
}

// ---- model ------------------------------------------------------------------

DepthModel::DepthModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const std::size_t l = config_.levels();
  const std::size_t c0 = config_.base_channels;
  const std::size_t k = config_.patch_kernel;

  for (std::size_t level = 0; level <= l; ++level) {
    AngularGrid grid(config_.height >> level, config_.width >> level);
    AttentionConfig att = config_.attention_at(level);
    ErpeBias eh = build_erpe(grid, Axis::kHorizontal, att);
    ErpeBias ev = build_erpe(grid, Axis::kVertical, att);
    levels_.push_back({std::move(grid), std::move(att), std::move(eh), std::move(ev)});
  }

  embed_w_ = init_weight(k * k * 3, c0, rng);
  embed_b_ = zero_bias(c0);
  for (std::size_t i = 0; i < l; ++i) {
    const std::size_t c = config_.channels_at(i);
    encoder_.push_back(TransformerBlock::init(config_.arch.encoder[i], c, rng));
    down_w_.push_back(init_weight(4 * c, 2 * c, rng));
    down_b_.push_back(zero_bias(2 * c));
  }
  for (BlockKind kind : config_.arch.bottleneck) {
    bottleneck_.push_back(TransformerBlock::init(kind, config_.channels_at(l), rng));
  }
  for (std::size_t j = 0; j < l; ++j) {
    const std::size_t c = config_.channels_at(l - 1 - j);
    up_w_.push_back(init_weight(3 * c, c, rng));
    up_b_.push_back(zero_bias(c));
    decoder_.push_back(TransformerBlock::init(config_.arch.decoder[j], c, rng));
  }
  head_w_ = init_weight(c0, 1, rng);
  head_b_ = zero_bias(1);
}

Tensor DepthModel::run_block(const Tensor& x, const TransformerBlock& block, const Level& level,
                             MacCounter* attention_macs, std::uint64_t* formula_macs) const {
  const std::uint64_t h = level.grid.height(), w = level.grid.width(), c = x.dim(2);
  auto pass = [&](const Tensor& in, Axis axis, const BlockParams& p) {
    if (formula_macs) *formula_macs += flop_formula(h, w, c, axis);
    const ErpeBias& erpe = axis == Axis::kHorizontal ? level.erpe_h : level.erpe_v;
    return block_forward_axis(in, axis, erpe, p, level.attention, attention_macs);
  };
  switch (block.kind) {
    case BlockKind::kH: return pass(x, Axis::kHorizontal, block.subs[0]);
    case BlockKind::kV: return pass(x, Axis::kVertical, block.subs[0]);
    case BlockKind::kE: return pass(pass(x, Axis::kVertical, block.subs[0]), Axis::kHorizontal, block.subs[1]);
  }
  throw ConfigError("model: unknown block kind");
}

Tensor DepthModel::forward(const Tensor& image, ForwardStats* stats) const {
  if (image.rank() != 3 || image.dim(0) != config_.height || image.dim(1) != config_.width ||
      image.dim(2) != 3) {
    throw ConfigError("model: image " + shape_str(image.shape()) + " does not match configured [" +
                      std::to_string(config_.height) + ", " + std::to_string(config_.width) + ", 3]");
  }
  MacCounter total;
  MacCounter attention;
  std::uint64_t formula = 0;
  std::optional<MacCounter::Scope> total_scope;
  if (stats) total_scope.emplace(total);
  MacCounter* att = stats ? &attention : nullptr;
  std::uint64_t* fm = stats ? &formula : nullptr;

  const std::size_t l = config_.levels();
  Tensor x = patch_embed(image, embed_w_, embed_b_, config_.patch_kernel);
  std::vector<Tensor> skips;
  for (std::size_t i = 0; i < l; ++i) {
    x = run_block(x, encoder_[i], levels_[i], att, fm);
    skips.push_back(x);
    x = downsample(x, down_w_[i], down_b_[i]);
  }
  for (const TransformerBlock& b : bottleneck_) x = run_block(x, b, levels_[l], att, fm);
  for (std::size_t j = 0; j < l; ++j) {
    const std::size_t level = l - 1 - j;
    x = upsample_fuse(x, skips[level], up_w_[j], up_b_[j]);
    x = run_block(x, decoder_[j], levels_[level], att, fm);
  }
  Tensor depth = softplus(linear(x, head_w_, head_b_));
  if (stats) {
    total_scope.reset();
    stats->attention_macs = attention.macs();
    stats->formula_macs = formula;
    stats->total_macs = total.macs();
  }
  return depth;
}

std::vector<NamedTensor> DepthModel::named_parameters() const {
  std::vector<NamedTensor> out;
  auto append = [&out](std::vector<NamedTensor> part) {
    out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  };
  out.push_back({"embed.weight", embed_w_});
  out.push_back({"embed.bias", embed_b_});
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    append(encoder_[i].named("enc" + std::to_string(i) + "."));
    out.push_back({"down" + std::to_string(i) + ".weight", down_w_[i]});
    out.push_back({"down" + std::to_string(i) + ".bias", down_b_[i]});
  }
  for (std::size_t i = 0; i < bottleneck_.size(); ++i) {
    append(bottleneck_[i].named("mid" + std::to_string(i) + "."));
  }
  for (std::size_t j = 0; j < decoder_.size(); ++j) {
    out.push_back({"up" + std::to_string(j) + ".weight", up_w_[j]});
    out.push_back({"up" + std::to_string(j) + ".bias", up_b_[j]});
    append(decoder_[j].named("dec" + std::to_string(j) + "."));
  }
  out.push_back({"head.weight", head_w_});
  out.push_back({"head.bias", head_b_});
  return out;
}

std::vector<Tensor> DepthModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& nt : named_parameters()) out.push_back(nt.tensor);
  return out;
}

std::size_t DepthModel::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& t : parameters()) n += t.numel();
  return n;
}

void DepthModel::load(const std::vector<NamedTensor>& tensors) {
  std::map<std::string, const Tensor*> by_name;
  for (const NamedTensor& nt : tensors) by_name[nt.name] = &nt.tensor;
  for (NamedTensor& nt : named_parameters()) {
    auto it = by_name.find(nt.name);
    if (it == by_name.end()) throw ConfigError("model: checkpoint lacks tensor '" + nt.name + "'");
    if (it->second->shape() != nt.tensor.shape()) {
      throw ConfigError("model: tensor '" + nt.name + "' has shape " +
                        shape_str(it->second->shape()) + ", expected " + shape_str(nt.tensor.shape()));
    }
    auto dst = nt.tensor.mutable_data();
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  if (by_name.size() != named_parameters().size()) {
    throw ConfigError("model: checkpoint has " + std::to_string(by_name.size()) +
                      " tensors, model expects " + std::to_string(named_parameters().size()));
  }
}

// ---- training -----------------------------------------------------------------

Tensor image_tensor(const Raster& image) {
  return Tensor::from({image.height, image.width, image.channels}, image.data);
}

namespace {

struct MaskedL1 {
  Tensor abs_sum;
  std::size_t count = 0;
};

MaskedL1 masked_l1(const Tensor& predicted, const Raster& gt) {
  if (predicted.numel() != gt.data.size()) {
    throw ConfigError("loss: prediction " + shape_str(predicted.shape()) +
                      " does not match ground truth " + std::to_string(gt.height) + "x" +
                      std::to_string(gt.width));
  }
  std::vector<double> mask(gt.data.size());
  std::size_t count = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const bool valid = gt.data[i] > 0.0 && gt.data[i] < 100.0;
    mask[i] = valid ? 1.0 : 0.0;
    count += valid;
  }
  const Tensor target = Tensor::from(predicted.shape(), gt.data);
  const Tensor weights = Tensor::from(predicted.shape(), std::move(mask));
  return {sum_all(mul(abs(sub(predicted, target)), weights)), count};
}

}  // namespace

Tensor depth_l1_loss(const Tensor& predicted, const Raster& ground_truth) {
  MaskedL1 l = masked_l1(predicted, ground_truth);
  if (l.count == 0) throw std::invalid_argument("loss: no valid ground-truth pixels");
  return mul_scalar(l.abs_sum, 1.0 / static_cast<double>(l.count));
}

StepResult train_step(DepthModel& model, std::span<const Sample* const> batch, double lr,
                      double clip_norm) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const std::vector<Tensor> params = model.parameters();
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    Tensor total;
    std::size_t count = 0;
    for (const Sample* s : batch) {
      MaskedL1 part = masked_l1(model.forward(image_tensor(s->image)), s->depth);
      total = total.defined() ? add(total, part.abs_sum) : part.abs_sum;
      count += part.count;
    }
    if (count == 0) throw std::invalid_argument("train_step: no valid ground-truth pixels");
    loss = mul_scalar(total, 1.0 / static_cast<double>(count));
  }
  StepResult result;
  result.loss = loss.item();
  if (!std::isfinite(result.loss)) {
    tape.validate_finite();
    throw std::runtime_error("train_step: non-finite loss " + std::to_string(result.loss));
  }
  tape.backward(loss, params);

  double sq = 0.0;
  for (const Tensor& p : params) {
    for (double g : p.grad()) sq += g * g;
  }
  result.grad_norm = std::sqrt(sq);
  if (!std::isfinite(result.grad_norm)) {
    throw std::runtime_error("train_step: non-finite gradient norm");
  }
  if (lr == 0.0) return result;
  double scale = lr;
  if (clip_norm > 0.0 && result.grad_norm > clip_norm) scale *= clip_norm / result.grad_norm;
  for (Tensor p : params) {
    auto values = p.mutable_data();
    const auto grad = p.grad();
    for (std::size_t i = 0; i < values.size(); ++i) values[i] -= scale * grad[i];
  }
  return result;
}

}  // namespace egf
