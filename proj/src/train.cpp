#include "stsn/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "stsn/rng.hpp"

namespace stsn {

namespace {

struct CellTargets {
  std::vector<real> cls;   // [num_classes * h * w], 0/1
  std::vector<real> box;   // [4 * h * w]
  std::vector<real> mask;  // [h * w], 1 at positive cells
  int positives = 0;
};

CellTargets build_targets(const std::vector<GtBox>& gt, const ModelConfig& cfg, int h, int w) {
  CellTargets t;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  t.cls.assign(static_cast<std::size_t>(cfg.num_classes) * plane, 0.0);
  t.box.assign(4 * plane, 0.0);
  t.mask.assign(plane, 0.0);
  const real s = static_cast<real>(cfg.head_stride);
  for (const GtBox& b : gt) {
    require(b.class_id >= 0 && b.class_id < cfg.num_classes, "gt class id out of range");
    const real cx = (b.x1 + b.x2) / 2, cy = (b.y1 + b.y2) / 2;
    const int j = std::clamp(static_cast<int>(std::floor(cx / s)), 0, w - 1);
    const int i = std::clamp(static_cast<int>(std::floor(cy / s)), 0, h - 1);
    const std::size_t p = static_cast<std::size_t>(i) * w + j;
    t.cls[b.class_id * plane + p] = 1.0;
    if (t.mask[p] == 0.0) ++t.positives;
    t.mask[p] = 1.0;
    t.box[0 * plane + p] = cx / s - (j + 0.5);
    t.box[1 * plane + p] = cy / s - (i + 0.5);
    t.box[2 * plane + p] = std::log(std::max(b.x2 - b.x1, real(1e-3)));
    t.box[3 * plane + p] = std::log(std::max(b.y2 - b.y1, real(1e-3)));
  }
  return t;
}

// entries at cells holding a gt center carry this much extra weight
constexpr real kHotCellWeight = 64.0;


// Numerically stable BCE on logits, mean-reduced with up-weighted entries at
// object cells. The weight applies to every class entry of such a cell, the
// true class and the wrong ones alike, so the sparse objects keep both their
// detection and their discrimination gradient. With no objects this is
// exactly the plain per-cell mean.
Tensor bce_with_logits_balanced(const Tensor& logits, std::vector<real> targets,
                                std::vector<real> hot_cells) {
  require(static_cast<std::size_t>(logits.size()) == targets.size(), "bce: target size mismatch");
  const std::size_t n = targets.size();
  const std::size_t plane = hot_cells.size();
  require(plane > 0 && n % plane == 0, "bce: cell mask size mismatch");
  const real* z = logits.data();

  real acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const real bce = std::max(z[i], real(0)) - z[i] * targets[i] + std::log1p(std::exp(-std::abs(z[i])));
    acc += (hot_cells[i % plane] > 0 ? kHotCellWeight : 1.0) / static_cast<real>(n) * bce;
  }
  auto out = std::make_shared<std::vector<real>>(1, acc);

  Tape* tape = Tape::active();
  if (!tape || logits.node() < 0) return Tensor({}, std::move(out));
  auto saved = logits.storage();
  auto tgt = std::make_shared<std::vector<real>>(std::move(targets));
  auto hot = std::make_shared<std::vector<real>>(std::move(hot_cells));
  return tape->emit({}, out, {&logits},
                    [saved, tgt, hot, plane, n](const std::vector<real>& g, Tape::ParentGrads pg) {
                      if (!pg[0]) return;
                      const std::vector<real>& z = *saved;
                      for (std::size_t i = 0; i < n; ++i) {
                        const real sig = z[i] >= 0 ? 1.0 / (1.0 + std::exp(-z[i]))
                                                   : std::exp(z[i]) / (1.0 + std::exp(z[i]));
                        const real w =
                            ((*hot)[i % plane] > 0 ? kHotCellWeight : 1.0) / static_cast<real>(n);
                        (*pg[0])[i] += g[0] * w * (sig - (*tgt)[i]);
                      }
                    });
}

// sum over positive cells of the 4-component L1, divided by max(1, positives)
Tensor masked_l1_mean(const Tensor& box_reg, std::vector<real> targets, std::vector<real> mask,
                      int positives) {
  const std::size_t plane = mask.size();
  const real denom = static_cast<real>(std::max(1, positives));
  const real* p = box_reg.data();
  real acc = 0;
  for (std::size_t i = 0; i < plane; ++i) {
    if (mask[i] == 0.0) continue;
    for (int k = 0; k < 4; ++k) acc += std::abs(p[k * plane + i] - targets[k * plane + i]);
  }
  auto out = std::make_shared<std::vector<real>>(1, acc / denom);

  Tape* tape = Tape::active();
  if (!tape || box_reg.node() < 0) return Tensor({}, std::move(out));
  auto saved = box_reg.storage();
  auto tgt = std::make_shared<std::vector<real>>(std::move(targets));
  auto msk = std::make_shared<std::vector<real>>(std::move(mask));
  return tape->emit({}, out, {&box_reg},
                    [saved, tgt, msk, plane, denom](const std::vector<real>& g, Tape::ParentGrads pg) {
                      if (!pg[0]) return;
                      const real scale = g[0] / denom;
                      const std::vector<real>& p = *saved;
                      for (std::size_t i = 0; i < plane; ++i) {
                        if ((*msk)[i] == 0.0) continue;
                        for (int k = 0; k < 4; ++k) {
                          const real d = p[k * plane + i] - (*tgt)[k * plane + i];
                          const real sgn = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
                          (*pg[0])[k * plane + i] += scale * sgn;
                        }
                      }
                    });
}

}  // namespace

void TrainConfig::validate() const {
  require(iterations > 0, "iterations must be positive");
  require(lr >= 0 && lr_decay_factor > 0, "learning rate must be non-negative");
  require(lr_decay_at >= 0, "lr_decay_at must be non-negative");
  require(k_train >= 0, "k_train must be non-negative");
  require(support_radius >= 1, "support_radius must be positive");
  require(lambda_cls >= 0 && lambda_box >= 0, "loss weights must be non-negative");
  require(momentum >= 0 && momentum < 1, "momentum must be in [0,1)");
  require(log_every > 0, "log_every must be positive");
}

Tensor detection_loss(const HeadOutput& head, const std::vector<GtBox>& gt,
                      const ModelConfig& config, real lambda_cls, real lambda_box) {
  const int h = head.cls_logits.dims()[1], w = head.cls_logits.dims()[2];
  require(head.cls_logits.dims()[0] == config.num_classes, "head class count mismatch");
  CellTargets t = build_targets(gt, config, h, w);
  Tensor cls_term = bce_with_logits_balanced(head.cls_logits, std::move(t.cls), t.mask);
  Tensor box_term = masked_l1_mean(head.box_reg, std::move(t.box), std::move(t.mask), t.positives);
  return add(mul(cls_term, full({}, lambda_cls)), mul(box_term, full({}, lambda_box)));
}

TrainResult train(ModelParams& params, const std::vector<Clip>& clips, const ModelConfig& config,
                  const TrainConfig& tc) {
  tc.validate();
  config.validate();
  require(!clips.empty(), "train: empty dataset");
  require(clips[0].height() == config.image_h && clips[0].width() == config.image_w,
          "train: clip dims disagree with the model config");

  // velocity buffers in for_each_layer order, weight then bias per layer
  std::vector<std::vector<real>> velocity;
  params.for_each_layer([&](const std::string&, ConvLayer& layer) {
    velocity.emplace_back(layer.params.weight.size(), 0.0);
    velocity.emplace_back(layer.params.bias.size(), 0.0);
  });

  Rng rng(tc.seed ^ 0x747261696eULL);
  TrainResult result;
  result.losses.reserve(static_cast<std::size_t>(tc.iterations));

  for (int iter = 0; iter < tc.iterations; ++iter) {
    const Clip& clip = clips[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(clips.size()) - 1))];
    const int T = clip.length();
    // the designated center frame is the reference: that is the frame the
    // generator degrades, so supervision lands where supports must carry it
    const int t_ref = designated_reference(T);

    // one supporting frame drawn before and one after the reference, within
    // a neighborhood whose motion stays inside the bilinear gradient's reach;
    // the static baseline uses the reference frame as its own supports,
    // keeping per-iteration compute and gradient averaging identical to STSN
    std::vector<Tensor> window;
    Tensor ref_frame = clip.frame(t_ref);
    ModelConfig fwd_cfg = config;
    for (int j = 0; j < tc.k_train; ++j) {
      const int lo_min = std::max(0, t_ref - tc.support_radius);
      const int lo = (!tc.static_baseline && t_ref > 0) ? rng.uniform_int(lo_min, t_ref - 1) : t_ref;
      window.push_back(lo == t_ref ? ref_frame : clip.frame(lo));
    }
    window.push_back(ref_frame);
    for (int j = 0; j < tc.k_train; ++j) {
      const int hi_max = std::min(T - 1, t_ref + tc.support_radius);
      const int hi = (!tc.static_baseline && t_ref < T - 1) ? rng.uniform_int(t_ref + 1, hi_max) : t_ref;
      window.push_back(hi == t_ref ? ref_frame : clip.frame(hi));
    }
    fwd_cfg.K = tc.k_train;
    const int ref_pos = tc.k_train;
    fwd_cfg.temporal_stride = 1;

    Tape tape;
    params.bind(tape);
    Tensor loss;
    try {
      ForwardResult fwd = stsn_forward(window, ref_pos, fwd_cfg, params, 2.0 /* skip decode */);
      loss = detection_loss(fwd.head, clip.boxes[t_ref], fwd_cfg, tc.lambda_cls, tc.lambda_box);
    } catch (const std::invalid_argument& e) {
      // at iteration 0 this is a configuration problem; later it means the
      // parameters diverged and intermediate activations went non-finite
      if (iter == 0) throw;
      throw NumericError("numeric failure at iteration " + std::to_string(iter) + ": " + e.what());
    }

    const real loss_value = loss.item();
    if (!std::isfinite(loss_value)) {
      throw NumericError("non-finite loss at iteration " + std::to_string(iter));
    }
    result.losses.push_back(loss_value);
    if (iter % tc.log_every == 0 || iter == tc.iterations - 1) {
      result.logged.emplace_back(iter, loss_value);
    }

    GradientMap grads = tape.run_backward(loss);
    const real lr = iter < tc.lr_decay_at ? tc.lr : tc.lr * tc.lr_decay_factor;

    std::size_t slot = 0;
    bool finite = true;
    params.for_each_layer([&](const std::string&, ConvLayer& layer) {
      for (Tensor* t : {&layer.params.weight, &layer.params.bias}) {
        std::vector<real>& vel = velocity[slot++];
        const Tensor& g = grads.grad(*t);
        std::vector<real> next(t->values());
        for (std::size_t i = 0; i < next.size(); ++i) {
          vel[i] = tc.momentum * vel[i] + g.data()[i];
          next[i] -= lr * vel[i];
          finite = finite && std::isfinite(next[i]);
        }
        *t = Tensor(t->dims(), std::move(next));
      }
    });
    if (!finite) {
      throw NumericError("non-finite parameters after update at iteration " + std::to_string(iter));
    }
  }
  return result;
}

void write_loss_csv(const std::filesystem::path& path, const TrainResult& result) {
  std::ofstream os(path);
  require(os.good(), "cannot write loss csv: " + path.string());
  os << "iteration,loss\n";
  char buf[64];
  for (const auto& [iter, loss] : result.logged) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g\n", iter, loss);
    os << buf;
  }
  require(os.good(), "loss csv write failed");
}

}  // namespace stsn
