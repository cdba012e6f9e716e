#include "stsn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <thread>

namespace stsn {

real iou(const Box& a, const Box& b) {
  const real aw = a.x2 - a.x1, ah = a.y2 - a.y1;
  const real bw = b.x2 - b.x1, bh = b.y2 - b.y1;
  if (aw <= 0 || ah <= 0 || bw <= 0 || bh <= 0) return 0;
  const real ix = std::max(real(0), std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const real iy = std::max(real(0), std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const real inter = ix * iy;
  const real uni = aw * ah + bw * bh - inter;
  return uni > 0 ? inter / uni : 0;
}

std::vector<Detection> nms(std::vector<Detection> detections, real threshold) {
  for (const Detection& d : detections) require(std::isfinite(d.score), "nms: non-finite score");
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detections[a].score > detections[b].score;
  });

  std::vector<Detection> kept;
  for (std::size_t i : order) {
    const Detection& d = detections[i];
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (k.class_id == d.class_id && iou(box_of(k), box_of(d)) > threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

ApResult map_at_05(const std::vector<std::vector<Detection>>& detections_per_image,
                   const std::vector<std::vector<GtBox>>& gt_per_image, real iou_threshold) {
  require(detections_per_image.size() == gt_per_image.size(),
          "map_at_05: detections and gt must align per image");

  std::set<int> classes;
  std::size_t total_gt = 0;
  for (const auto& gts : gt_per_image) {
    for (const GtBox& g : gts) {
      classes.insert(g.class_id);
      ++total_gt;
    }
  }
  require(total_gt > 0, "map_at_05: no ground truth at all, metric undefined");

  ApResult result;
  for (int cls : classes) {
    // flatten detections of this class, keeping their image index
    struct Entry {
      real score;
      std::size_t image;
      Box box;
    };
    std::vector<Entry> entries;
    for (std::size_t img = 0; img < detections_per_image.size(); ++img) {
      for (const Detection& d : detections_per_image[img]) {
        if (d.class_id == cls) entries.push_back({d.score, img, box_of(d)});
      }
    }
    std::stable_sort(entries.begin(), entries.end(),
                     [](const Entry& a, const Entry& b) { return a.score > b.score; });

    int class_gt = 0;
    std::vector<std::vector<bool>> used(gt_per_image.size());
    for (std::size_t img = 0; img < gt_per_image.size(); ++img) {
      used[img].assign(gt_per_image[img].size(), false);
      for (const GtBox& g : gt_per_image[img]) {
        if (g.class_id == cls) ++class_gt;
      }
    }

    std::vector<bool> is_tp(entries.size(), false);
    for (std::size_t e = 0; e < entries.size(); ++e) {
      const auto& gts = gt_per_image[entries[e].image];
      real best = 0;
      int best_idx = -1;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (gts[g].class_id != cls || used[entries[e].image][g]) continue;
        const real v = iou(entries[e].box, box_of(gts[g]));
        // ties break toward the lower gt index
        if (v > best) {
          best = v;
          best_idx = static_cast<int>(g);
        }
      }
      if (best_idx >= 0 && best >= iou_threshold) {
        is_tp[e] = true;
        used[entries[e].image][best_idx] = true;
      }
    }

    // all-points interpolated AP (precision envelope)
    real ap = 0;
    if (class_gt > 0) {
      std::vector<real> precision, recall;
      int tp = 0, fp = 0;
      for (std::size_t e = 0; e < entries.size(); ++e) {
        is_tp[e] ? ++tp : ++fp;
        precision.push_back(static_cast<real>(tp) / (tp + fp));
        recall.push_back(static_cast<real>(tp) / class_gt);
      }
      for (int e = static_cast<int>(precision.size()) - 2; e >= 0; --e) {
        precision[e] = std::max(precision[e], precision[e + 1]);
      }
      real prev_recall = 0;
      for (std::size_t e = 0; e < precision.size(); ++e) {
        ap += (recall[e] - prev_recall) * precision[e];
        prev_recall = recall[e];
      }
    }
    result.per_class[cls] = ap;
  }

  real acc = 0;
  for (const auto& [cls, ap] : result.per_class) acc += ap;
  result.map = acc / static_cast<real>(result.per_class.size());
  return result;
}

void EvalConfig::validate() const {
  require(k_eval >= 0 && temporal_stride >= 1, "bad eval K/stride");
  require(score_threshold >= 0 && score_threshold <= 1, "score_threshold must be in [0,1]");
  require(nms_threshold >= 0 && nms_threshold <= 1, "nms_threshold must be in [0,1]");
  require(iou_threshold >= 0 && iou_threshold <= 1, "iou_threshold must be in [0,1]");
}

namespace {

struct ClipDiagnostics {
  std::vector<Detection> detections;
  std::vector<real> weight_sums;      // per k slot, summed over gt centers
  std::vector<Vec2> offset_sums;      // per k slot
  int center_count = 0;
  std::vector<OffsetSample> samples;
};

ClipDiagnostics evaluate_clip(const ModelParams& params, const ModelConfig& cfg, const Clip& clip,
                              const EvalConfig& ec) {
  const int T = clip.length();
  const int t_ref = designated_reference(T);
  std::vector<Tensor> frames;
  frames.reserve(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) frames.push_back(clip.frame(t));

  ModelConfig fwd_cfg = cfg;
  fwd_cfg.K = ec.k_eval;
  fwd_cfg.temporal_stride = ec.temporal_stride;
  ForwardResult fwd = stsn_forward(frames, t_ref, fwd_cfg, params, ec.score_threshold);

  ClipDiagnostics diag;
  diag.detections = nms(std::move(fwd.detections), ec.nms_threshold);

  const int slots = 2 * ec.k_eval + 1;
  diag.weight_sums.assign(static_cast<std::size_t>(slots), 0.0);
  diag.offset_sums.assign(static_cast<std::size_t>(slots), Vec2{});

  const int fh = fwd.weights.dims()[1], fw = fwd.weights.dims()[2];
  const std::size_t plane = static_cast<std::size_t>(fh) * fw;
  const real s = static_cast<real>(cfg.head_stride);

  for (std::size_t obj = 0; obj < clip.boxes[t_ref].size(); ++obj) {
    const GtBox& b = clip.boxes[t_ref][obj];
    const real cx = (b.x1 + b.x2) / 2, cy = (b.y1 + b.y2) / 2;
    const int j = std::clamp(static_cast<int>(std::floor(cx / s)), 0, fw - 1);
    const int i = std::clamp(static_cast<int>(std::floor(cy / s)), 0, fh - 1);
    const std::size_t p = static_cast<std::size_t>(i) * fw + j;
    ++diag.center_count;

    for (int k = 0; k < slots; ++k) {
      diag.weight_sums[k] += fwd.weights.data()[k * plane + p];

      const Tensor& o4 = fwd.final_offsets[static_cast<std::size_t>(k)];
      const int taps = o4.dims()[0] / 2;
      real mean_dy = 0, mean_dx = 0;
      for (int t = 0; t < taps; ++t) {
        mean_dy += o4.data()[(2 * t) * plane + p];
        mean_dx += o4.data()[(2 * t + 1) * plane + p];
      }
      mean_dy /= taps;
      mean_dx /= taps;
      diag.offset_sums[k].dy += mean_dy;
      diag.offset_sums[k].dx += mean_dx;

      const int idx = fwd.frame_indices[static_cast<std::size_t>(k)];
      if (idx == t_ref) continue;
      // true motion between reference and supporting frame, summed per frame;
      // object order is stable across frames
      real m_dy = 0, m_dx = 0;
      const int lo = std::min(t_ref, idx), hi = std::max(t_ref, idx);
      bool ok = true;
      for (int t = lo; t < hi; ++t) {
        if (t >= static_cast<int>(clip.motion.size()) ||
            obj >= clip.motion[static_cast<std::size_t>(t)].size()) {
          ok = false;
          break;
        }
        m_dy += clip.motion[static_cast<std::size_t>(t)][obj].dy;
        m_dx += clip.motion[static_cast<std::size_t>(t)][obj].dx;
      }
      if (!ok) continue;
      if (idx < t_ref) {
        m_dy = -m_dy;
        m_dx = -m_dx;
      }
      const real m_norm = std::sqrt(m_dy * m_dy + m_dx * m_dx);
      const real o_norm = std::sqrt(mean_dy * mean_dy + mean_dx * mean_dx);
      OffsetSample sample;
      sample.motion_px = m_norm;
      sample.cosine = (m_norm > 0 && o_norm > 0)
                          ? (mean_dy * m_dy + mean_dx * m_dx) / (m_norm * o_norm)
                          : 0;
      diag.samples.push_back(sample);
    }
  }
  return diag;
}

}  // namespace

EvalReport evaluate(const ModelParams& params, const ModelConfig& config,
                    const std::vector<Clip>& clips, const EvalConfig& ec) {
  ec.validate();
  config.validate();
  require(!clips.empty(), "evaluate: empty dataset");

  std::vector<ClipDiagnostics> diags(clips.size());
  const unsigned workers = std::min<unsigned>(std::max(1u, std::thread::hardware_concurrency()),
                                              static_cast<unsigned>(clips.size()));
  std::vector<std::thread> pool;
  for (unsigned wi = 0; wi < workers; ++wi) {
    pool.emplace_back([&, wi]() {
      for (std::size_t i = wi; i < clips.size(); i += workers) {
        diags[i] = evaluate_clip(params, config, clips[i], ec);
      }
    });
  }
  for (std::thread& th : pool) th.join();

  EvalReport report;
  const int slots = 2 * ec.k_eval + 1;
  report.weight_profile.assign(static_cast<std::size_t>(slots), 0.0);
  report.mean_offsets.assign(static_cast<std::size_t>(slots), Vec2{});

  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<GtBox>> gts;
  int centers = 0;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    dets.push_back(diags[i].detections);
    gts.push_back(clips[i].boxes[designated_reference(clips[i].length())]);
    report.detections_per_clip.push_back(diags[i].detections);
    centers += diags[i].center_count;
    for (int k = 0; k < slots; ++k) {
      report.weight_profile[k] += diags[i].weight_sums[k];
      report.mean_offsets[k].dy += diags[i].offset_sums[k].dy;
      report.mean_offsets[k].dx += diags[i].offset_sums[k].dx;
    }
    for (const OffsetSample& s : diags[i].samples) report.offset_samples.push_back(s);
  }
  if (centers > 0) {
    for (int k = 0; k < slots; ++k) {
      report.weight_profile[k] /= centers;
      report.mean_offsets[k].dy /= centers;
      report.mean_offsets[k].dx /= centers;
    }
  }

  ApResult ap = map_at_05(dets, gts, ec.iou_threshold);
  report.map = ap.map;
  report.per_class = ap.per_class;
  return report;
}

std::vector<std::pair<int, real>> ablation_frame_count(const ModelParams& params,
                                                       const ModelConfig& config,
                                                       const std::vector<Clip>& clips,
                                                       const std::vector<int>& k_values,
                                                       const EvalConfig& ec) {
  std::vector<std::pair<int, real>> curve;
  for (int k : k_values) {
    EvalConfig cfg = ec;
    cfg.k_eval = k;
    curve.emplace_back(k, evaluate(params, config, clips, cfg).map);
  }
  return curve;
}

void write_eval_csv(const std::filesystem::path& path,
                    const std::vector<std::tuple<int, int, real>>& map_rows,
                    const std::vector<std::pair<int, real>>& weight_rows) {
  std::ofstream os(path);
  require(os.good(), "cannot write eval csv: " + path.string());
  char buf[96];
  os << "K,stride,mAP\n";
  for (const auto& [k, stride, map] : map_rows) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.17g\n", k, stride, map);
    os << buf;
  }
  os << "k,mean_weight\n";
  for (const auto& [k, wmean] : weight_rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g\n", k, wmean);
    os << buf;
  }
  require(os.good(), "eval csv write failed");
}

}  // namespace stsn
