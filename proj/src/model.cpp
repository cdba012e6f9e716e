#include "stsn/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "stsn/rng.hpp"

namespace stsn {

namespace {

constexpr real kCosineEps = 1e-8;

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

int log2_int(int v) {
  int n = 0;
  while ((1 << n) < v) ++n;
  return n;
}

ConvLayer make_layer(int kernel, int stride, int in_ch, int out_ch) {
  ConvSpec spec;
  spec.kernel_h = spec.kernel_w = kernel;
  spec.stride = stride;
  spec.pad = kernel / 2;
  spec.dilation = 1;
  spec.in_channels = in_ch;
  spec.out_channels = out_ch;
  return {spec, {zeros({out_ch, in_ch, kernel, kernel}), zeros({out_ch})}};
}

Tensor gain_normal(Rng& rng, std::vector<int> dims, int fan_in, real gain) {
  const real std_dev = std::sqrt(gain / fan_in);
  std::vector<real> v(element_count(dims));
  for (real& x : v) x = std_dev * rng.normal();
  return Tensor(std::move(dims), std::move(v));
}

}  // namespace

void ModelConfig::validate() const {
  require(feature_channels >= 2 && feature_channels % 2 == 0,
          "feature_channels must be even and at least 2");
  require(K >= 0, "K must be non-negative");
  require(temporal_stride >= 1, "temporal_stride must be positive");
  require(num_classes >= 1, "num_classes must be positive");
  require(is_power_of_two(head_stride), "head_stride must be a power of two");
  require(backbone_depth >= std::max(2, log2_int(head_stride)),
          "backbone too shallow for the requested stride");
  require(image_h % head_stride == 0 && image_w % head_stride == 0,
          "image dims must be divisible by head_stride");
}

void ModelParams::for_each_layer(const std::function<void(const std::string&, ConvLayer&)>& fn) {
  for (std::size_t i = 0; i < backbone.size(); ++i) fn("backbone." + std::to_string(i), backbone[i]);
  for (int i = 0; i < 4; ++i) fn("sampling.offset." + std::to_string(i), sampling.offset_layers[i]);
  for (int i = 0; i < 4; ++i) fn("sampling.deform." + std::to_string(i), sampling.deform_layers[i]);
  for (int i = 0; i < 3; ++i) fn("subnet." + std::to_string(i), subnet.layers[i]);
  fn("head.trunk", head.trunk);
  fn("head.cls", head.cls);
  fn("head.box", head.box);
}

void ModelParams::bind(Tape& tape) {
  for_each_layer([&](const std::string&, ConvLayer& layer) {
    tape.watch(layer.params.weight);
    tape.watch(layer.params.bias);
  });
}

ModelParams make_model(const ModelConfig& config) {
  config.validate();
  const int c = config.feature_channels;

  ModelParams p;
  const int stride_stages = log2_int(config.head_stride);
  int in_ch = 1;
  for (int i = 0; i < config.backbone_depth; ++i) {
    const int out_ch = (i == 0) ? c / 2 : c;
    const int stride = (i < stride_stages) ? 2 : 1;
    p.backbone.push_back(make_layer(3, stride, in_ch, out_ch));
    in_ch = out_ch;
  }

  // layer 0 consumes the [2c] concatenation; layers 1..3 consume c channels
  // (the last one resamples the original supporting map, which also has c)
  for (int l = 0; l < 4; ++l) {
    const int in = (l == 0) ? 2 * c : c;
    p.sampling.offset_layers[l] = make_layer(3, 1, in, 18);
    p.sampling.deform_layers[l] = make_layer(3, 1, in, c);
  }

  p.subnet.layers[0] = make_layer(1, 1, c, c / 2);
  p.subnet.layers[1] = make_layer(3, 1, c / 2, c / 2);
  p.subnet.layers[2] = make_layer(1, 1, c / 2, 2 * c);

  p.head.trunk = make_layer(3, 1, c, c);
  p.head.cls = make_layer(1, 1, c, config.num_classes);
  p.head.box = make_layer(1, 1, c, 4);
  return p;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams p = make_model(config);
  Rng rng(seed ^ 0x696e6974ULL);
  p.for_each_layer([&](const std::string& name, ConvLayer& layer) {
    if (name.rfind("sampling.offset.", 0) == 0) return;  // offsets start at zero
    const ConvSpec& s = layer.spec;
    // He gain for relu layers; unit gain for the linear sampling sandwich and
    // the 1x1 predictor heads, which otherwise amplify variance layer on layer
    const bool linear = name.rfind("sampling.deform.", 0) == 0 || name == "head.cls" ||
                        name == "head.box" || name == "subnet.2";
    layer.params.weight =
        gain_normal(rng, layer.params.weight.dims(), s.in_channels * s.taps(), linear ? 1.0 : 2.0);
    if (name == "subnet.2") {
      // small nonzero bias keeps embedding norms away from zero
      std::vector<real> b(static_cast<std::size_t>(s.out_channels));
      for (real& v : b) v = 0.01 * rng.normal();
      layer.params.bias = Tensor(layer.params.bias.dims(), std::move(b));
    } else if (name == "head.cls") {
      layer.params.bias = full(layer.params.bias.dims(), -2.0);
    }
  });
  return p;
}

Tensor backbone_forward(const Tensor& frame, const std::vector<ConvLayer>& layers) {
  require(!layers.empty(), "backbone has no layers");
  Tensor x = frame;
  for (const ConvLayer& layer : layers) {
    x = relu(conv2d(x, layer.spec, layer.params));
  }
  return x;
}

Tensor sampling_block(const Tensor& f_ref, const Tensor& f_supp, const SamplingBlockParams& params,
                      Tensor* final_offsets) {
  require(f_ref.dims() == f_supp.dims(), "sampling_block: feature dims mismatch");
  Tensor cat = concat_channels(f_ref, f_supp);

  OffsetField o1 = offset_conv(cat, params.deform_layers[0].spec, params.offset_layers[0].params);
  Tensor g = deform_conv2d(cat, o1, params.deform_layers[0].spec, params.deform_layers[0].params);
  for (int l = 1; l <= 2; ++l) {
    OffsetField ol = offset_conv(g, params.deform_layers[l].spec, params.offset_layers[l].params);
    g = deform_conv2d(g, ol, params.deform_layers[l].spec, params.deform_layers[l].params);
  }
  OffsetField o4 = offset_conv(g, params.deform_layers[3].spec, params.offset_layers[3].params);
  if (final_offsets) *final_offsets = o4.field;
  return deform_conv2d(f_supp, o4, params.deform_layers[3].spec, params.deform_layers[3].params);
}

Tensor subnet_forward(const Tensor& g, const AggregationSubnetParams& params) {
  Tensor x = relu(conv2d(g, params.layers[0].spec, params.layers[0].params));
  x = relu(conv2d(x, params.layers[1].spec, params.layers[1].params));
  return conv2d(x, params.layers[2].spec, params.layers[2].params);
}

Tensor embedding_cosine(const Tensor& a, const Tensor& b) {
  require(a.dims() == b.dims(), "embedding_cosine: dims mismatch");
  Tensor dot = sum_channels(mul(a, b));
  Tensor na = sqrt(sum_channels(mul(a, a)));
  Tensor nb = sqrt(sum_channels(mul(b, b)));
  Tensor denom = add(mul(na, nb), full(dot.dims(), kCosineEps));
  return div(dot, denom);
}

Tensor aggregation_weights(const Tensor& g_ref, std::span<const Tensor> g_list,
                           const AggregationSubnetParams& subnet) {
  require(!g_list.empty(), "aggregation_weights: empty supporting list");
  Tensor s_ref = subnet_forward(g_ref, subnet);
  Tensor stacked;
  for (const Tensor& g : g_list) {
    Tensor cosm = embedding_cosine(s_ref, subnet_forward(g, subnet));
    stacked = stacked.defined() ? concat_channels(stacked, cosm) : cosm;
  }
  return softmax_over_leading_axis(stacked);
}

Tensor aggregate(std::span<const Tensor> g_list, const Tensor& weights) {
  require(!g_list.empty(), "aggregate: empty list");
  require(weights.dims().size() == 3 && weights.dims()[0] == static_cast<int>(g_list.size()),
          "aggregate: weights leading dim must match list length");
  Tensor acc;
  for (std::size_t k = 0; k < g_list.size(); ++k) {
    Tensor term = mul(g_list[k], slice_leading(weights, static_cast<int>(k)));
    acc = acc.defined() ? add(acc, term) : term;
  }
  return acc;
}

HeadOutput detection_head(const Tensor& g_agg, const HeadParams& params) {
  Tensor trunk = relu(conv2d(g_agg, params.trunk.spec, params.trunk.params));
  HeadOutput out;
  out.cls_logits = conv2d(trunk, params.cls.spec, params.cls.params);
  out.objectness = sigmoid(out.cls_logits);
  out.box_reg = conv2d(trunk, params.box.spec, params.box.params);
  return out;
}

std::vector<Detection> decode_detections(const HeadOutput& head, real score_threshold,
                                         const ModelConfig& config) {
  const int classes = head.objectness.dims()[0];
  const int h = head.objectness.dims()[1], w = head.objectness.dims()[2];
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const real s = static_cast<real>(config.head_stride);
  const real img_w = static_cast<real>(config.image_w);
  const real img_h = static_cast<real>(config.image_h);
  const real* score = head.objectness.data();
  const real* reg = head.box_reg.data();

  std::vector<Detection> out;
  for (int c = 0; c < classes; ++c) {
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        const std::size_t p = static_cast<std::size_t>(i) * w + j;
        const real sc = score[c * plane + p];
        if (sc < score_threshold) continue;
        const real cx = (j + 0.5 + reg[0 * plane + p]) * s;
        const real cy = (i + 0.5 + reg[1 * plane + p]) * s;
        const real bw = std::max(std::exp(std::min(reg[2 * plane + p], real(50))), real(1e-3));
        const real bh = std::max(std::exp(std::min(reg[3 * plane + p], real(50))), real(1e-3));
        Detection d;
        d.class_id = c;
        d.score = sc;
        d.x1 = std::clamp(cx - bw / 2, real(0), img_w);
        d.x2 = std::clamp(cx + bw / 2, real(0), img_w);
        d.y1 = std::clamp(cy - bh / 2, real(0), img_h);
        d.y2 = std::clamp(cy + bh / 2, real(0), img_h);
        if (d.x2 <= d.x1) {
          d.x1 = std::clamp(cx, real(0), img_w - real(1e-3));
          d.x2 = d.x1 + real(1e-3);
        }
        if (d.y2 <= d.y1) {
          d.y1 = std::clamp(cy, real(0), img_h - real(1e-3));
          d.y2 = d.y1 + real(1e-3);
        }
        out.push_back(d);
      }
    }
  }
  return out;
}

std::vector<int> supporting_frame_indices(int t, int K, int temporal_stride, int video_len) {
  require(video_len >= 1, "empty video");
  require(t >= 0 && t < video_len, "reference index out of range");
  require(K >= 0 && temporal_stride >= 1, "bad K or temporal stride");
  std::vector<int> idx;
  idx.reserve(2 * K + 1);
  for (int j = -K; j <= K; ++j) {
    idx.push_back(std::clamp(t + j * temporal_stride, 0, video_len - 1));
  }
  return idx;
}

ForwardResult stsn_forward(std::span<const Tensor> frames, int t, const ModelConfig& config,
                           const ModelParams& params, real score_threshold) {
  config.validate();
  require(!frames.empty(), "stsn_forward: empty clip");
  const int len = static_cast<int>(frames.size());
  ForwardResult result;
  result.frame_indices = supporting_frame_indices(t, config.K, config.temporal_stride, len);

  // backbone and sampling results are cached per distinct frame index
  std::map<int, Tensor> features;
  for (int idx : result.frame_indices) {
    if (!features.count(idx)) features.emplace(idx, backbone_forward(frames[idx], params.backbone));
  }
  const Tensor& f_ref = features.at(t);

  std::map<int, std::pair<Tensor, Tensor>> sampled;  // idx -> (g4, o4)
  std::vector<Tensor> g_list;
  for (int idx : result.frame_indices) {
    if (!sampled.count(idx)) {
      Tensor o4;
      Tensor g4 = sampling_block(f_ref, features.at(idx), params.sampling, &o4);
      sampled.emplace(idx, std::make_pair(std::move(g4), std::move(o4)));
    }
    g_list.push_back(sampled.at(idx).first);
    result.final_offsets.push_back(sampled.at(idx).second);
  }

  const Tensor& g_self = g_list[static_cast<std::size_t>(config.K)];
  result.weights = aggregation_weights(g_self, g_list, params.subnet);
  Tensor g_agg = aggregate(g_list, result.weights);
  result.head = detection_head(g_agg, params.head);
  result.detections = decode_detections(result.head, score_threshold, config);
  return result;
}

}  // namespace stsn
