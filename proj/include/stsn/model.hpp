#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "stsn/conv.hpp"
#include "stsn/tensor.hpp"

namespace stsn {

struct ModelConfig {
  int feature_channels = 32;
  int backbone_depth = 4;
  int head_stride = 4;   // total downsampling of the backbone
  int K = 1;             // supporting frames each side
  int temporal_stride = 1;
  int num_classes = 3;
  int image_h = 64;
  int image_w = 64;

  int feature_h() const { return image_h / head_stride; }
  int feature_w() const { return image_w / head_stride; }
  void validate() const;
};

struct ConvLayer {
  ConvSpec spec;
  ConvParams params;
};

// Four deformable conv layers plus their four offset-predicting convs.
// Layer 0 consumes the [2c] concatenation, layers 1..3 consume c channels;
// the last deformable layer resamples the original supporting features.
struct SamplingBlockParams {
  std::array<ConvLayer, 4> offset_layers;
  std::array<ConvLayer, 4> deform_layers;
};

// 1x1 -> 3x3 -> 1x1 embedding used by the aggregation weights.
struct AggregationSubnetParams {
  std::array<ConvLayer, 3> layers;
};

struct HeadParams {
  ConvLayer trunk;  // 3x3 + relu
  ConvLayer cls;    // 1x1, num_classes logits
  ConvLayer box;    // 1x1, (dx, dy, log_w, log_h)
};

struct ModelParams {
  std::vector<ConvLayer> backbone;
  SamplingBlockParams sampling;
  AggregationSubnetParams subnet;
  HeadParams head;

  // Fixed traversal order; checkpointing and the optimizer both rely on it.
  void for_each_layer(const std::function<void(const std::string&, ConvLayer&)>& fn);
  void bind(Tape& tape);  // watch every parameter tensor
};

// Parameter structure with zeroed tensors (specs filled in).
ModelParams make_model(const ModelConfig& config);
// He-normal weights, zeroed offset convs, seeded and machine-independent.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

struct Detection {
  int class_id = 0;
  real score = 0;
  real x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

struct HeadOutput {
  Tensor cls_logits;  // [num_classes, h, w]
  Tensor objectness;  // sigmoid(cls_logits)
  Tensor box_reg;     // [4, h, w]
};

Tensor backbone_forward(const Tensor& frame, const std::vector<ConvLayer>& layers);

// The spatiotemporal sampling chain; optionally reports the final offsets.
Tensor sampling_block(const Tensor& f_ref, const Tensor& f_supp, const SamplingBlockParams& params,
                      Tensor* final_offsets = nullptr);

Tensor subnet_forward(const Tensor& g, const AggregationSubnetParams& params);

// Per-pixel cosine similarity of two [c,h,w] embeddings -> [1,h,w];
// epsilon 1e-8 guards the zero-norm corner.
Tensor embedding_cosine(const Tensor& a, const Tensor& b);

// exp(cosine) normalized to sum to one per pixel over the 2K+1 entries.
// g_list must include the reference's own entry.
Tensor aggregation_weights(const Tensor& g_ref, std::span<const Tensor> g_list,
                           const AggregationSubnetParams& subnet);

// Per-pixel convex combination, the scalar weight broadcast across channels.
Tensor aggregate(std::span<const Tensor> g_list, const Tensor& weights);

HeadOutput detection_head(const Tensor& g_agg, const HeadParams& params);

std::vector<Detection> decode_detections(const HeadOutput& head, real score_threshold,
                                         const ModelConfig& config);

// Indices t + j*stride for j in -K..K, clamped to the clip (clamping realizes
// boundary padding with frame copies); the reference sits at position K.
std::vector<int> supporting_frame_indices(int t, int K, int temporal_stride, int video_len);

struct ForwardResult {
  std::vector<Detection> detections;
  Tensor weights;                    // [2K+1, h, w]
  std::vector<Tensor> final_offsets; // o4 per supporting frame, [18, h, w]
  std::vector<int> frame_indices;    // length 2K+1
  HeadOutput head;
};

ForwardResult stsn_forward(std::span<const Tensor> frames, int t, const ModelConfig& config,
                           const ModelParams& params, real score_threshold);

}  // namespace stsn
