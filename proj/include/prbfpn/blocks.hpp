// SPDX-License-Identifier: Apache-2.0
//
// Parallel residual bi-fusion feature pyramid.
//
// Levels are numbered 1 (finest, stride 1) to L (coarsest, stride 2^(L-1)).
// Path n of N bi-fuses the backbone levels L-n+1 down to L-n-N+2. Each level
// of a path runs one CORE block (re-organised shallow neighbour, the level
// itself, upsampled deep neighbour, concatenated and fused by 1x1 filters to
// c_fuse channels) followed by a 3x3 convolution module. With residual wiring
// the block also adds the upsampled output of the previous, one level coarser
// block of the same path (Re-CORE). The s-th outputs of all paths are resampled
// to level L-s+1 and fused into the s-th prediction map; an optional bottom-up
// fusion module then pushes fine detail back into the coarser maps.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prbfpn/optim.hpp"
#include "prbfpn/tensor.hpp"

namespace prbfpn {

struct PrbFpnConfig {
  int L = 5;
  int N = 3;
  int c_fuse = 16;
  int c_head = 32;
  bool use_residual = true;
  bool use_parallel = true;
  bool use_bfm = true;
  int in_channels = 3;
  std::uint64_t seed = 1;

  /// Throws ConfigError.
  void validate() const;
  int path_count() const { return use_parallel ? N : 1; }
};

template <typename T>
struct FeatureMap {
  Tensor<T> tensor;
  int level = 1;

  int stride() const { return 1 << (level - 1); }
};

/// Backbone levels bi-fused by path n, deepest first: L-n+1, ..., L-n-N+2.
std::vector<int> layer_span(int n, int L, int N);

/// Target level of the s-th prediction map.
inline int prediction_level(int s, int L) { return L - s + 1; }

/// A convolution with its parameters; pointwise when the weight is 1x1.
template <typename T>
struct Conv {
  Tensor<T> weight;
  Tensor<T> bias;
  int stride = 1;
  int pad = 0;

  Tensor<T> operator()(const Tensor<T>& x) const;
  int c_out() const { return weight.shape().n; }
  int c_in() const { return weight.shape().c; }
};

template <typename T>
struct ChannelScale {
  Tensor<T> weight;
  Tensor<T> bias;
};

/// CORE block at one pyramid level. Which neighbours exist is fixed at
/// construction by the pyramid boundaries.
template <typename T>
struct CoreBlock {
  int level = 1;
  bool has_shallow = false;
  bool has_current = true;
  bool has_deep = false;
  std::optional<Conv<T>> reorg;  // 1x1, 4*c_fuse -> c_fuse, after space_to_depth
  ChannelScale<T> pre_scale;     // over the concatenated width
  Conv<T> fuse;                  // 1x1, concat width -> c_fuse

  int input_count() const { return int(has_shallow) + int(has_current) + int(has_deep); }
};

/// CORE block plus the optional skip projection and the convolution module.
template <typename T>
struct ReCoreBlock {
  CoreBlock<T> core;
  std::optional<Conv<T>> skip_proj;  // 1x1, c_fuse -> c_fuse
  Conv<T> conv_module;               // 3x3, c_fuse -> c_fuse
};

template <typename T>
struct BiFusionPath {
  int index = 1;
  std::vector<int> span;
  std::vector<ReCoreBlock<T>> blocks;  // blocks[s-1] runs at span[s-1]

  std::size_t skip_count() const;
};

template <typename T>
struct BottomUpFusion {
  // Entry i serves prediction map s = N-1-i, i.e. finest-but-one first.
  std::vector<Conv<T>> down;  // 3x3 stride 2, c_head -> c_head
  std::vector<Conv<T>> fuse;  // 1x1, 2*c_head -> c_head
};

// Factories append the parameters they create to `params`. Names are
// prefix-qualified (e.g. "path1.core2.fuse.weight") and also key the
// initialisation stream, so equally named parameters of different models
// start from identical values.

template <typename T>
Conv<T> make_conv(std::vector<Parameter<T>>& params, const std::string& name, int c_out, int c_in,
                  int k, int stride, int pad, std::uint64_t seed);

/// Throws ContractError when no input is present.
template <typename T>
CoreBlock<T> make_core_block(std::vector<Parameter<T>>& params, const std::string& prefix, int level,
                             bool has_shallow, bool has_current, bool has_deep, int c_fuse,
                             std::uint64_t seed);

template <typename T>
ReCoreBlock<T> make_recore_block(std::vector<Parameter<T>>& params, const std::string& prefix,
                                 int level, bool has_shallow, bool has_current, bool has_deep,
                                 bool with_skip, int c_fuse, std::uint64_t seed);

// Building blocks. Inputs passed as null pointers are absent; the present
// set must match the block's construction. Level arithmetic violations throw
// ShapeError, presence mismatches throw ContractError.

template <typename T>
Tensor<T> reorg_forward(const FeatureMap<T>& shallow, const CoreBlock<T>& block);

template <typename T>
FeatureMap<T> core_forward(const FeatureMap<T>* shallow, const FeatureMap<T>* current,
                           const FeatureMap<T>* deep, const CoreBlock<T>& block);

template <typename T>
FeatureMap<T> recore_forward(const FeatureMap<T>* shallow, const FeatureMap<T>* current,
                             const FeatureMap<T>* deep, const FeatureMap<T>* skip,
                             const ReCoreBlock<T>& block);

/// `backbone_maps[l-1]` holds level l. Outputs are ordered s = 1..N.
template <typename T>
std::vector<FeatureMap<T>> bifusion_forward(const BiFusionPath<T>& path,
                                            std::span<const FeatureMap<T>> backbone_maps,
                                            bool use_residual);

/// `path_outputs[n-1]` are the N outputs of path n; `fusers[s-1]` fuses the
/// concatenation of all paths' s-th outputs after resampling to level L-s+1.
template <typename T>
std::vector<FeatureMap<T>> integrate_prediction_maps(
    std::span<const std::vector<FeatureMap<T>>> path_outputs, std::span<const Conv<T>> fusers, int L);

/// Maps ordered coarse to fine. Shapes are preserved.
template <typename T>
std::vector<FeatureMap<T>> bfm_forward(std::span<const FeatureMap<T>> prediction_maps,
                                       const BottomUpFusion<T>& bfm);

/// Repeated 2x max-pool or nearest upsample until `map` sits at `level`.
template <typename T>
FeatureMap<T> resample_to_level(const FeatureMap<T>& map, int level);

template <typename T>
class PrbFpnModel {
 public:
  explicit PrbFpnModel(const PrbFpnConfig& config);

  const PrbFpnConfig& config() const { return config_; }
  std::span<Parameter<T>> parameters() { return params_; }
  std::span<const Parameter<T>> parameters() const { return params_; }

  /// Square image of side divisible by 2^(L-1); throws ConfigError otherwise.
  std::vector<FeatureMap<T>> backbone_forward(const Tensor<T>& image) const;
  std::vector<std::vector<FeatureMap<T>>> paths_forward(std::span<const FeatureMap<T>> backbone) const;
  /// N prediction maps with c_head channels, levels L, L-1, ..., L-N+1.
  std::vector<FeatureMap<T>> forward(const Tensor<T>& image) const;

  void check_image(const Tensor<T>& image) const;

  const std::vector<Conv<T>>& backbone() const { return backbone_; }
  const std::vector<BiFusionPath<T>>& paths() const { return paths_; }
  const std::vector<Conv<T>>& integrators() const { return integrators_; }
  const std::optional<BottomUpFusion<T>>& bfm() const { return bfm_; }

  /// Backbone levels + path blocks + integrators + bottom-up fusion units.
  std::size_t block_count() const;

 private:
  PrbFpnConfig config_;
  std::vector<Parameter<T>> params_;
  std::vector<Conv<T>> backbone_;
  std::vector<BiFusionPath<T>> paths_;
  std::vector<Conv<T>> integrators_;
  std::optional<BottomUpFusion<T>> bfm_;
};

/// Graphviz DOT description of the model: one node or edge per line, nodes in
/// construction order. Edge attribute `kind` is one of down, shallow, current,
/// deep, skip, integrate, bottom_up, lateral.
template <typename T>
std::string export_topology(const PrbFpnModel<T>& model);

}  // namespace prbfpn
