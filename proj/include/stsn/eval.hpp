#pragma once

#include <filesystem>
#include <map>
#include <utility>
#include <vector>

#include "stsn/model.hpp"
#include "stsn/synthvid.hpp"

namespace stsn {

struct Box {
  real x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

inline Box box_of(const Detection& d) { return {d.x1, d.y1, d.x2, d.y2}; }
inline Box box_of(const GtBox& b) { return {b.x1, b.y1, b.x2, b.y2}; }

// |a n b| / |a u b|; 0 for disjoint or degenerate boxes.
real iou(const Box& a, const Box& b);

// Greedy per-class suppression at the given overlap threshold; ties broken by
// earlier input index; result sorted by descending score.
std::vector<Detection> nms(std::vector<Detection> detections, real threshold = 0.3);

struct ApResult {
  real map = 0;
  std::map<int, real> per_class;
};

// All-points interpolated AP per class present in the ground truth, matched
// greedily at the IoU threshold within each image. Errors when gt is empty.
ApResult map_at_05(const std::vector<std::vector<Detection>>& detections_per_image,
                   const std::vector<std::vector<GtBox>>& gt_per_image, real iou_threshold = 0.5);

struct EvalConfig {
  int k_eval = 2;
  int temporal_stride = 1;
  real score_threshold = 0.05;
  real nms_threshold = 0.3;
  real iou_threshold = 0.5;
  void validate() const;
};

// One supporting-frame slot of the diagnostics below.
struct OffsetSample {
  real motion_px = 0;   // |true motion| between reference and supporting frame
  real cosine = 0;      // cos(mean o4 offset at the object-center cell, true motion)
};

struct EvalReport {
  real map = 0;
  std::map<int, real> per_class;
  std::vector<std::vector<Detection>> detections_per_clip;  // reference frame of each clip
  std::vector<real> weight_profile;       // mean w at gt centers, per k slot (2K+1)
  std::vector<Vec2> mean_offsets;         // mean o4 at gt centers, per k slot (feature cells)
  std::vector<OffsetSample> offset_samples;  // per (clip, object, non-self slot)
};

// Detections are produced on each clip's designated reference frame, NMS'd at
// ec.nms_threshold, and scored against that frame's ground truth. Clips are
// evaluated in parallel; the report does not depend on the thread count.
EvalReport evaluate(const ModelParams& params, const ModelConfig& config,
                    const std::vector<Clip>& clips, const EvalConfig& ec);

// mAP of the same parameters at several supporting-frame counts.
std::vector<std::pair<int, real>> ablation_frame_count(const ModelParams& params,
                                                       const ModelConfig& config,
                                                       const std::vector<Clip>& clips,
                                                       const std::vector<int>& k_values,
                                                       const EvalConfig& ec);

void write_eval_csv(const std::filesystem::path& path,
                    const std::vector<std::tuple<int, int, real>>& map_rows,
                    const std::vector<std::pair<int, real>>& weight_rows);

}  // namespace stsn
