// SPDX-License-Identifier: Apache-2.0
#include "prbfpn/blocks.hpp"

#include <algorithm>
#include <string>

#include "prbfpn/ops.hpp"

namespace prbfpn {

namespace {

std::string level_msg(const char* what, int got, int want) {
  return std::string(what) + " map at level " + std::to_string(got) + ", expected level " +
         std::to_string(want);
}

template <typename T>
void expect_level(const FeatureMap<T>& m, int want, const char* what) {
  if (m.level != want) throw ShapeError(level_msg(what, m.level, want));
}

template <typename T>
Tensor<T> act(const Tensor<T>& x) {
  return leaky_relu(x, T(0.1));
}

}  // namespace

void PrbFpnConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (N < 1) fail("N must be >= 1");
  if (L < 2) fail("L must be >= 2");
  if (L < 2 * N - 1) {
    fail("L must be >= 2N-1 so every path span stays above level 1 (L=" + std::to_string(L) +
         ", N=" + std::to_string(N) + ")");
  }
  if (L > 16) fail("L must be <= 16");
  if (c_fuse < 1) fail("c_fuse must be >= 1");
  if (c_head < 1) fail("c_head must be >= 1");
  if (in_channels < 1) fail("in_channels must be >= 1");
}

std::vector<int> layer_span(int n, int L, int N) {
  if (N < 1 || n < 1 || n > N) {
    throw ConfigError("layer_span: need 1 <= n <= N, got n=" + std::to_string(n) + ", N=" + std::to_string(N));
  }
  const int deepest = L - n + 1;
  const int finest = L - n - N + 2;
  if (finest < 1) {
    throw ConfigError("layer_span: path " + std::to_string(n) + " would reach level " +
                      std::to_string(finest) + " (L=" + std::to_string(L) + ", N=" + std::to_string(N) + ")");
  }
  std::vector<int> span;
  for (int level = deepest; level >= finest; --level) span.push_back(level);
  return span;
}

template <typename T>
Tensor<T> Conv<T>::operator()(const Tensor<T>& x) const {
  return conv2d(x, weight, bias, stride, pad);
}

template <typename T>
std::size_t BiFusionPath<T>::skip_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.skip_proj.has_value() ? 1 : 0;
  return n;
}

template <typename T>
Conv<T> make_conv(std::vector<Parameter<T>>& params, const std::string& name, int c_out, int c_in,
                  int k, int stride, int pad, std::uint64_t seed) {
  auto w = make_filter<T>(name + ".weight", c_out, c_in, k, seed);
  auto b = make_vector<T>(name + ".bias", c_out, T(0));
  Conv<T> conv{w.tensor, b.tensor, stride, pad};
  params.push_back(std::move(w));
  params.push_back(std::move(b));
  return conv;
}

template <typename T>
CoreBlock<T> make_core_block(std::vector<Parameter<T>>& params, const std::string& prefix, int level,
                             bool has_shallow, bool has_current, bool has_deep, int c_fuse,
                             std::uint64_t seed) {
  CoreBlock<T> block;
  block.level = level;
  block.has_shallow = has_shallow;
  block.has_current = has_current;
  block.has_deep = has_deep;
  if (block.input_count() == 0) throw ContractError(prefix + ": CORE block needs at least one input");
  if (has_shallow) block.reorg = make_conv<T>(params, prefix + ".reorg", c_fuse, 4 * c_fuse, 1, 1, 0, seed);
  const int width = block.input_count() * c_fuse;
  auto sw = make_vector<T>(prefix + ".scale.weight", width, T(1));
  auto sb = make_vector<T>(prefix + ".scale.bias", width, T(0));
  block.pre_scale = ChannelScale<T>{sw.tensor, sb.tensor};
  params.push_back(std::move(sw));
  params.push_back(std::move(sb));
  block.fuse = make_conv<T>(params, prefix + ".fuse", c_fuse, width, 1, 1, 0, seed);
  return block;
}

template <typename T>
ReCoreBlock<T> make_recore_block(std::vector<Parameter<T>>& params, const std::string& prefix,
                                 int level, bool has_shallow, bool has_current, bool has_deep,
                                 bool with_skip, int c_fuse, std::uint64_t seed) {
  ReCoreBlock<T> block;
  block.core = make_core_block<T>(params, prefix, level, has_shallow, has_current, has_deep, c_fuse, seed);
  if (with_skip) {
    // Zero start: the block begins as its non-residual twin and learns how
    // much of the coarser output to pass on.
    block.skip_proj = make_conv<T>(params, prefix + ".skip", c_fuse, c_fuse, 1, 1, 0, seed);
    for (T& v : block.skip_proj->weight.mutable_data()) v = T(0);
  }
  block.conv_module = make_conv<T>(params, prefix + ".conv", c_fuse, c_fuse, 3, 1, 1, seed);
  return block;
}

template <typename T>
Tensor<T> reorg_forward(const FeatureMap<T>& shallow, const CoreBlock<T>& block) {
  expect_level(shallow, block.level - 1, "shallow");
  if (!block.reorg) throw ContractError("reorg_forward: block has no Re-Org branch");
  return (*block.reorg)(space_to_depth(shallow.tensor, 2));
}

template <typename T>
FeatureMap<T> core_forward(const FeatureMap<T>* shallow, const FeatureMap<T>* current,
                           const FeatureMap<T>* deep, const CoreBlock<T>& block) {
  if (!shallow && !current && !deep) throw ContractError("core_forward: no inputs present");
  if (bool(shallow) != block.has_shallow || bool(current) != block.has_current ||
      bool(deep) != block.has_deep) {
    throw ContractError("core_forward: present inputs do not match the block at level " +
                        std::to_string(block.level));
  }
  std::vector<Tensor<T>> parts;
  parts.reserve(3);
  if (shallow) parts.push_back(reorg_forward(*shallow, block));
  if (current) {
    expect_level(*current, block.level, "current");
    parts.push_back(current->tensor);
  }
  if (deep) {
    expect_level(*deep, block.level + 1, "deep");
    parts.push_back(upsample2x(deep->tensor));
  }
  Tensor<T> x = parts.size() == 1 ? parts[0] : concat_channels<T>(parts);
  x = depthwise_scale(x, block.pre_scale.weight, block.pre_scale.bias);
  return FeatureMap<T>{act(block.fuse(x)), block.level};
}

template <typename T>
FeatureMap<T> recore_forward(const FeatureMap<T>* shallow, const FeatureMap<T>* current,
                             const FeatureMap<T>* deep, const FeatureMap<T>* skip,
                             const ReCoreBlock<T>& block) {
  FeatureMap<T> fused = core_forward(shallow, current, deep, block.core);
  Tensor<T> x = fused.tensor;
  if (skip) {
    expect_level(*skip, block.core.level + 1, "skip");
    if (!block.skip_proj) throw ContractError("recore_forward: skip given to a block without skip projection");
    x = add(x, (*block.skip_proj)(upsample2x(skip->tensor)));
  }
  return FeatureMap<T>{act(block.conv_module(x)), block.core.level};
}

template <typename T>
std::vector<FeatureMap<T>> bifusion_forward(const BiFusionPath<T>& path,
                                            std::span<const FeatureMap<T>> backbone_maps,
                                            bool use_residual) {
  const int L = static_cast<int>(backbone_maps.size());
  for (int i = 0; i < L; ++i) {
    if (backbone_maps[i].level != i + 1) {
      throw ConfigError("bifusion_forward: backbone map " + std::to_string(i) + " is at level " +
                        std::to_string(backbone_maps[i].level));
    }
  }
  std::vector<FeatureMap<T>> outputs;
  outputs.reserve(path.blocks.size());
  for (std::size_t s = 0; s < path.blocks.size(); ++s) {
    const auto& block = path.blocks[s];
    const int level = block.core.level;
    if (level > L || (block.core.has_deep && level + 1 > L)) {
      throw ConfigError("bifusion_forward: path " + std::to_string(path.index) + " needs backbone level " +
                        std::to_string(block.core.has_deep ? level + 1 : level) + ", have " +
                        std::to_string(L));
    }
    const FeatureMap<T>* shallow = block.core.has_shallow ? &backbone_maps[level - 2] : nullptr;
    const FeatureMap<T>* deep = block.core.has_deep ? &backbone_maps[level] : nullptr;
    const FeatureMap<T>* skip = (use_residual && s > 0) ? &outputs[s - 1] : nullptr;
    outputs.push_back(recore_forward(shallow, &backbone_maps[level - 1], deep, skip, block));
  }
  return outputs;
}

template <typename T>
FeatureMap<T> resample_to_level(const FeatureMap<T>& map, int level) {
  FeatureMap<T> out = map;
  while (out.level < level) {
    out.tensor = downsample2x(out.tensor);
    ++out.level;
  }
  while (out.level > level) {
    out.tensor = upsample2x(out.tensor);
    --out.level;
  }
  return out;
}

template <typename T>
std::vector<FeatureMap<T>> integrate_prediction_maps(
    std::span<const std::vector<FeatureMap<T>>> path_outputs, std::span<const Conv<T>> fusers, int L) {
  if (path_outputs.empty()) throw ContractError("integrate_prediction_maps: no paths");
  const std::size_t N = fusers.size();
  for (const auto& outs : path_outputs) {
    if (outs.size() != N) throw ContractError("integrate_prediction_maps: every path must produce N outputs");
  }
  std::vector<FeatureMap<T>> maps;
  maps.reserve(N);
  for (std::size_t s = 0; s < N; ++s) {
    const int target = prediction_level(static_cast<int>(s) + 1, L);
    std::vector<Tensor<T>> parts;
    for (const auto& outs : path_outputs) parts.push_back(resample_to_level(outs[s], target).tensor);
    Tensor<T> x = parts.size() == 1 ? parts[0] : concat_channels<T>(parts);
    maps.push_back(FeatureMap<T>{act(fusers[s](x)), target});
  }
  return maps;
}

template <typename T>
std::vector<FeatureMap<T>> bfm_forward(std::span<const FeatureMap<T>> prediction_maps,
                                       const BottomUpFusion<T>& bfm) {
  const std::size_t N = prediction_maps.size();
  if (N == 0) return {};
  if (bfm.down.size() + 1 != N || bfm.fuse.size() + 1 != N) {
    throw ContractError("bfm_forward: module built for " + std::to_string(bfm.down.size() + 1) +
                        " maps, got " + std::to_string(N));
  }
  for (std::size_t i = 1; i < N; ++i) {
    if (prediction_maps[i].level != prediction_maps[i - 1].level - 1) {
      throw ShapeError("bfm_forward: prediction maps must be ordered coarse to fine with unit level steps");
    }
  }
  std::vector<FeatureMap<T>> out(prediction_maps.begin(), prediction_maps.end());
  Tensor<T> running = out[N - 1].tensor;
  for (std::size_t i = 0; i + 1 < N; ++i) {
    const std::size_t idx = N - 2 - i;
    Tensor<T> down = act(bfm.down[i](running));
    const std::vector<Tensor<T>> parts{down, out[idx].tensor};
    running = act(bfm.fuse[i](concat_channels<T>(parts)));
    out[idx].tensor = running;
  }
  return out;
}

template <typename T>
PrbFpnModel<T>::PrbFpnModel(const PrbFpnConfig& config) : config_(config) {
  config_.validate();
  const int L = config_.L;
  const int N = config_.N;
  const int c = config_.c_fuse;
  const std::uint64_t seed = config_.seed;

  for (int level = 1; level <= L; ++level) {
    const int c_in = level == 1 ? config_.in_channels : c;
    backbone_.push_back(make_conv<T>(params_, "backbone.level" + std::to_string(level), c, c_in, 3, 1, 1, seed));
  }
  for (int n = 1; n <= config_.path_count(); ++n) {
    BiFusionPath<T> path;
    path.index = n;
    path.span = layer_span(n, L, N);
    for (int s = 1; s <= N; ++s) {
      const int level = path.span[s - 1];
      const std::string prefix = "path" + std::to_string(n) + ".core" + std::to_string(s);
      path.blocks.push_back(make_recore_block<T>(params_, prefix, level, level > 1, true, level < L,
                                                 config_.use_residual && s > 1, c, seed));
    }
    paths_.push_back(std::move(path));
  }
  for (int s = 1; s <= N; ++s) {
    integrators_.push_back(make_conv<T>(params_, "integrate.s" + std::to_string(s), config_.c_head,
                                        config_.path_count() * c, 1, 1, 0, seed));
  }
  if (config_.use_bfm && N > 1) {
    BottomUpFusion<T> bfm;
    const int ch = config_.c_head;
    for (int i = 0; i + 1 < N; ++i) {
      const std::string prefix = "bfm.s" + std::to_string(N - 1 - i);
      bfm.down.push_back(make_conv<T>(params_, prefix + ".down", ch, ch, 3, 2, 1, seed));
      // Starts as [0 | I]: the map passes through (up to one more leaky) and
      // the downsampled finer map is mixed in as training finds it useful.
      Conv<T> fuse = make_conv<T>(params_, prefix + ".fuse", ch, 2 * ch, 1, 1, 0, seed);
      auto w = fuse.weight.mutable_data();
      std::fill(w.begin(), w.end(), T(0));
      for (int o = 0; o < ch; ++o) w[fuse.weight.offset(o, ch + o, 0, 0)] = T(1);
      bfm.fuse.push_back(fuse);
    }
    bfm_ = std::move(bfm);
  }
  check_unique_names<T>(params_);
}

template <typename T>
void PrbFpnModel<T>::check_image(const Tensor<T>& image) const {
  const Shape s = image.shape();
  const int unit = 1 << (config_.L - 1);
  if (s.c != config_.in_channels) {
    throw ConfigError("image has " + std::to_string(s.c) + " channels, model expects " +
                      std::to_string(config_.in_channels));
  }
  if (s.h != s.w || s.h % unit != 0) {
    throw ConfigError("image " + s.str() + " must be square with side divisible by " + std::to_string(unit));
  }
}

template <typename T>
std::vector<FeatureMap<T>> PrbFpnModel<T>::backbone_forward(const Tensor<T>& image) const {
  check_image(image);
  std::vector<FeatureMap<T>> maps;
  maps.reserve(backbone_.size());
  Tensor<T> x = image;
  for (int level = 1; level <= config_.L; ++level) {
    if (level > 1) x = downsample2x(x);
    x = act(backbone_[level - 1](x));
    maps.push_back(FeatureMap<T>{x, level});
  }
  return maps;
}

template <typename T>
std::vector<std::vector<FeatureMap<T>>> PrbFpnModel<T>::paths_forward(
    std::span<const FeatureMap<T>> backbone) const {
  std::vector<std::vector<FeatureMap<T>>> outs;
  outs.reserve(paths_.size());
  for (const auto& path : paths_) outs.push_back(bifusion_forward<T>(path, backbone, config_.use_residual));
  return outs;
}

template <typename T>
std::vector<FeatureMap<T>> PrbFpnModel<T>::forward(const Tensor<T>& image) const {
  const auto backbone = backbone_forward(image);
  const auto outs = paths_forward(backbone);
  auto maps = integrate_prediction_maps<T>(outs, integrators_, config_.L);
  if (bfm_) maps = bfm_forward<T>(maps, *bfm_);
  return maps;
}

template <typename T>
std::size_t PrbFpnModel<T>::block_count() const {
  std::size_t n = backbone_.size() + integrators_.size();
  for (const auto& p : paths_) n += p.blocks.size();
  if (bfm_) n += bfm_->down.size();
  return n;
}

#define PRBFPN_INSTANTIATE_BLOCKS(T)                                                                   \
  template struct Conv<T>;                                                                            \
  template struct BiFusionPath<T>;                                                                    \
  template class PrbFpnModel<T>;                                                                      \
  template Conv<T> make_conv<T>(std::vector<Parameter<T>>&, const std::string&, int, int, int, int, int, \
                                std::uint64_t);                                                       \
  template CoreBlock<T> make_core_block<T>(std::vector<Parameter<T>>&, const std::string&, int, bool,  \
                                           bool, bool, int, std::uint64_t);                           \
  template ReCoreBlock<T> make_recore_block<T>(std::vector<Parameter<T>>&, const std::string&, int,    \
                                               bool, bool, bool, bool, int, std::uint64_t);           \
  template Tensor<T> reorg_forward<T>(const FeatureMap<T>&, const CoreBlock<T>&);                     \
  template FeatureMap<T> core_forward<T>(const FeatureMap<T>*, const FeatureMap<T>*,                   \
                                         const FeatureMap<T>*, const CoreBlock<T>&);                  \
  template FeatureMap<T> recore_forward<T>(const FeatureMap<T>*, const FeatureMap<T>*,                 \
                                           const FeatureMap<T>*, const FeatureMap<T>*,                \
                                           const ReCoreBlock<T>&);                                    \
  template std::vector<FeatureMap<T>> bifusion_forward<T>(const BiFusionPath<T>&,                      \
                                                          std::span<const FeatureMap<T>>, bool);      \
  template FeatureMap<T> resample_to_level<T>(const FeatureMap<T>&, int);                             \
  template std::vector<FeatureMap<T>> integrate_prediction_maps<T>(                                    \
      std::span<const std::vector<FeatureMap<T>>>, std::span<const Conv<T>>, int);                    \
  template std::vector<FeatureMap<T>> bfm_forward<T>(std::span<const FeatureMap<T>>,                   \
                                                     const BottomUpFusion<T>&);

PRBFPN_INSTANTIATE_BLOCKS(float)
PRBFPN_INSTANTIATE_BLOCKS(double)

}  // namespace prbfpn
