#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include "stsn/eval.hpp"
#include "stsn/rng.hpp"
#include "stsn/synthvid.hpp"
#include "stsn/train.hpp"

using namespace stsn;

namespace {

// ---- independent oracles ----

real oracle_iou(const Box& a, const Box& b) {
  const real x1 = std::max(a.x1, b.x1), y1 = std::max(a.y1, b.y1);
  const real x2 = std::min(a.x2, b.x2), y2 = std::min(a.y2, b.y2);
  real inter = 0;
  if (x2 > x1 && y2 > y1) inter = (x2 - x1) * (y2 - y1);
  const real area_a = std::max(real(0), a.x2 - a.x1) * std::max(real(0), a.y2 - a.y1);
  const real area_b = std::max(real(0), b.x2 - b.x1) * std::max(real(0), b.y2 - b.y1);
  const real uni = area_a + area_b - inter;
  return uni > 0 ? inter / uni : 0;
}

// quadratic re-scan NMS: repeatedly take the best remaining candidate
std::vector<Detection> oracle_nms(const std::vector<Detection>& input, real threshold) {
  std::vector<bool> alive(input.size(), true);
  std::vector<Detection> kept;
  while (true) {
    int best = -1;
    for (std::size_t i = 0; i < input.size(); ++i) {
      if (!alive[i]) continue;
      if (best < 0 || input[i].score > input[static_cast<std::size_t>(best)].score) {
        best = static_cast<int>(i);
      }
    }
    if (best < 0) break;
    alive[static_cast<std::size_t>(best)] = false;
    kept.push_back(input[static_cast<std::size_t>(best)]);
    for (std::size_t i = 0; i < input.size(); ++i) {
      if (!alive[i] || input[i].class_id != kept.back().class_id) continue;
      if (oracle_iou(box_of(input[i]), box_of(kept.back())) > threshold) alive[i] = false;
    }
  }
  return kept;
}

// prefix-by-prefix PR enumeration, matched greedily from scratch per prefix
real oracle_ap_for_class(const std::vector<std::vector<Detection>>& dets,
                         const std::vector<std::vector<GtBox>>& gts, int cls, real thr) {
  struct Entry {
    real score;
    std::size_t image;
    Box box;
  };
  std::vector<Entry> entries;
  for (std::size_t img = 0; img < dets.size(); ++img) {
    for (const Detection& d : dets[img]) {
      if (d.class_id == cls) entries.push_back({d.score, img, box_of(d)});
    }
  }
  std::stable_sort(entries.begin(), entries.end(),
                   [](const Entry& a, const Entry& b) { return a.score > b.score; });
  int total_gt = 0;
  for (const auto& g : gts) {
    for (const GtBox& b : g) {
      if (b.class_id == cls) ++total_gt;
    }
  }
  if (total_gt == 0) return 0;

  auto tp_of_prefix = [&](std::size_t len) {
    std::vector<std::vector<bool>> used(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);
    int tp = 0;
    for (std::size_t e = 0; e < len; ++e) {
      real best = 0;
      int best_g = -1;
      for (std::size_t g = 0; g < gts[entries[e].image].size(); ++g) {
        const GtBox& gt = gts[entries[e].image][g];
        if (gt.class_id != cls || used[entries[e].image][g]) continue;
        const real v = oracle_iou(entries[e].box, box_of(gt));
        if (v > best) {
          best = v;
          best_g = static_cast<int>(g);
        }
      }
      if (best_g >= 0 && best >= thr) {
        used[entries[e].image][static_cast<std::size_t>(best_g)] = true;
        ++tp;
      }
    }
    return tp;
  };

  std::vector<real> precision, recall;
  for (std::size_t len = 1; len <= entries.size(); ++len) {
    const int tp = tp_of_prefix(len);
    precision.push_back(static_cast<real>(tp) / static_cast<real>(len));
    recall.push_back(static_cast<real>(tp) / total_gt);
  }
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i) {
    precision[static_cast<std::size_t>(i)] =
        std::max(precision[static_cast<std::size_t>(i)], precision[static_cast<std::size_t>(i) + 1]);
  }
  real ap = 0, prev = 0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev) * precision[i];
    prev = recall[i];
  }
  return ap;
}

Detection make_det(int cls, real score, real x1, real y1, real x2, real y2) {
  Detection d;
  d.class_id = cls;
  d.score = score;
  d.x1 = x1;
  d.y1 = y1;
  d.x2 = x2;
  d.y2 = y2;
  return d;
}

std::vector<Clip> tiny_dataset(int n, int frames, int size, std::uint64_t seed,
                               real occ = 0.7, real blur = 0.5) {
  std::vector<Clip> clips;
  for (int i = 0; i < n; ++i) {
    ClipConfig c;
    c.frames = frames;
    c.image_h = c.image_w = size;
    c.num_objects = 1 + i % 2;
    c.occlusion_prob = occ;
    c.blur_prob = blur;
    c.seed = seed + static_cast<std::uint64_t>(i);
    clips.push_back(generate_clip(c));
  }
  return clips;
}

ModelConfig tiny_model_config(int size) {
  ModelConfig m;
  m.feature_channels = 8;
  m.backbone_depth = 2;
  m.head_stride = 4;
  m.image_h = m.image_w = size;
  return m;
}

}  // namespace

TEST_SUITE("train_eval") {

TEST_CASE("iou hand cases are exact") {
  Box a{0, 0, 10, 10};
  CHECK(iou(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(iou(a, Box{20, 20, 30, 30}) == 0.0);
  CHECK(iou(a, Box{5, 0, 15, 10}) == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(iou(a, Box{3, 3, 3, 8}) == 0.0);  // degenerate
}

TEST_CASE("iou properties") {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    auto rand_box = [&]() {
      const real x1 = rng.uniform(0, 50), y1 = rng.uniform(0, 50);
      return Box{x1, y1, x1 + rng.uniform(1, 30), y1 + rng.uniform(1, 30)};
    };
    Box a = rand_box(), b = rand_box();
    const real v = iou(a, b);
    CHECK(v == iou(b, a));
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    const real ty = rng.uniform(-20, 20), tx = rng.uniform(-20, 20);
    Box at{a.x1 + tx, a.y1 + ty, a.x2 + tx, a.y2 + ty};
    Box bt{b.x1 + tx, b.y1 + ty, b.x2 + tx, b.y2 + ty};
    CHECK(iou(at, bt) == doctest::Approx(v).epsilon(1e-12));
    CHECK((iou(a, b) == 1.0) == (a.x1 == b.x1 && a.y1 == b.y1 && a.x2 == b.x2 && a.y2 == b.y2));
  }
}

TEST_CASE("nms hand cases") {
  // IoU exactly 0.5: suppressed at threshold 0.3
  const real d5 = 10.0 / 3;
  std::vector<Detection> close{make_det(0, 0.9, 0, 0, 10, 10), make_det(0, 0.8, 0, d5, 10, 10 + d5)};
  REQUIRE(iou(box_of(close[0]), box_of(close[1])) == doctest::Approx(0.5).epsilon(1e-12));
  auto kept_close = nms(close, 0.3);
  REQUIRE(kept_close.size() == 1);
  CHECK(kept_close[0].score == 0.9);

  // IoU exactly 0.2: both kept
  const real d2 = 20.0 / 3;
  std::vector<Detection> far{make_det(0, 0.9, 0, 0, 10, 10), make_det(0, 0.8, 0, d2, 10, 10 + d2)};
  REQUIRE(iou(box_of(far[0]), box_of(far[1])) == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(nms(far, 0.3).size() == 2);

  // different classes never suppress each other
  std::vector<Detection> classes{make_det(0, 0.9, 0, 0, 10, 10), make_det(1, 0.8, 0, 0, 10, 10)};
  CHECK(nms(classes, 0.3).size() == 2);
}

TEST_CASE("nms matches the brute-force oracle on random instances") {
  Rng rng(18);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Detection> dets;
    const int n = rng.uniform_int(0, 10);
    for (int i = 0; i < n; ++i) {
      const real x1 = rng.uniform(0, 30), y1 = rng.uniform(0, 30);
      dets.push_back(make_det(rng.uniform_int(0, 2), rng.uniform(0.01, 1.0), x1, y1,
                              x1 + rng.uniform(2, 20), y1 + rng.uniform(2, 20)));
    }
    auto got = nms(dets, 0.3);
    auto want = oracle_nms(dets, 0.3);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].score == want[i].score);
      CHECK(got[i].class_id == want[i].class_id);
      CHECK(got[i].x1 == want[i].x1);
    }
    // invariants: subset, sorted, no kept same-class pair above threshold
    for (std::size_t i = 1; i < got.size(); ++i) CHECK(got[i - 1].score >= got[i].score);
    for (std::size_t i = 0; i < got.size(); ++i) {
      for (std::size_t j = i + 1; j < got.size(); ++j) {
        if (got[i].class_id == got[j].class_id) {
          CHECK(iou(box_of(got[i]), box_of(got[j])) <= 0.3);
        }
      }
    }
  }
}

TEST_CASE("map_at_05 hand cases") {
  std::vector<std::vector<GtBox>> gt{{{0, 0, 0, 10, 10}}};
  // IoU 0.6 detection: intersection 7.5x10 over union 125 -> 0.6
  std::vector<std::vector<Detection>> hit{{make_det(0, 0.9, 2.5, 0, 12.5, 10)}};
  REQUIRE(iou(box_of(hit[0][0]), box_of(gt[0][0])) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(map_at_05(hit, gt).map == doctest::Approx(1.0).epsilon(1e-12));

  // IoU 0.4 detection scores zero
  std::vector<std::vector<Detection>> miss{{make_det(0, 0.9, 4.4, 0, 14.4, 10)}};
  REQUIRE(iou(box_of(miss[0][0]), box_of(gt[0][0])) < 0.5);
  CHECK(map_at_05(miss, gt).map == doctest::Approx(0.0).epsilon(1e-12));

  // 2 gt, 3 detections, hits at ranks 1 and 3: AP = 0.5*1 + 0.5*(2/3) = 5/6
  std::vector<std::vector<GtBox>> gt2{{{0, 0, 0, 10, 10}, {0, 40, 40, 50, 50}}};
  std::vector<std::vector<Detection>> three{{make_det(0, 0.9, 0, 0, 10, 10),
                                             make_det(0, 0.8, 70, 70, 80, 80),
                                             make_det(0, 0.7, 40, 40, 50, 50)}};
  CHECK(map_at_05(three, gt2).map == doctest::Approx(5.0 / 6).epsilon(1e-12));
  CHECK(map_at_05(three, gt2).map ==
        doctest::Approx(oracle_ap_for_class(three, gt2, 0, 0.5)).epsilon(1e-12));

  CHECK_THROWS_AS(map_at_05({{}}, {{}}), std::invalid_argument);  // no gt at all
}

TEST_CASE("map_at_05 matches the PR-enumeration oracle on random instances") {
  Rng rng(19);
  for (int trial = 0; trial < 200; ++trial) {
    const int images = rng.uniform_int(1, 3);
    std::vector<std::vector<GtBox>> gts(static_cast<std::size_t>(images));
    std::vector<std::vector<Detection>> dets(static_cast<std::size_t>(images));
    int total_gt = 0;
    for (int img = 0; img < images; ++img) {
      const int ng = rng.uniform_int(img == 0 ? 1 : 0, 4);
      for (int g = 0; g < ng; ++g) {
        const real x1 = rng.uniform(0, 40), y1 = rng.uniform(0, 40);
        gts[img].push_back({rng.uniform_int(0, 1), x1, y1, x1 + rng.uniform(4, 16),
                            y1 + rng.uniform(4, 16)});
        ++total_gt;
      }
      const int nd = rng.uniform_int(0, 10);
      for (int d = 0; d < nd; ++d) {
        if (!gts[img].empty() && rng.uniform() < 0.6) {
          // near-duplicate of some gt so matches occur
          const GtBox& g = gts[img][static_cast<std::size_t>(
              rng.uniform_int(0, static_cast<int>(gts[img].size()) - 1))];
          const real jx = rng.uniform(-3, 3), jy = rng.uniform(-3, 3);
          dets[img].push_back(
              make_det(g.class_id, rng.uniform(0.05, 1.0), g.x1 + jx, g.y1 + jy, g.x2 + jx, g.y2 + jy));
        } else {
          const real x1 = rng.uniform(0, 40), y1 = rng.uniform(0, 40);
          dets[img].push_back(make_det(rng.uniform_int(0, 1), rng.uniform(0.05, 1.0), x1, y1,
                                       x1 + rng.uniform(4, 16), y1 + rng.uniform(4, 16)));
        }
      }
    }
    if (total_gt == 0) continue;

    ApResult got = map_at_05(dets, gts);
    std::set<int> classes;
    for (const auto& g : gts) {
      for (const GtBox& b : g) classes.insert(b.class_id);
    }
    real acc = 0;
    for (int cls : classes) {
      const real want = oracle_ap_for_class(dets, gts, cls, 0.5);
      CHECK(got.per_class.at(cls) == doctest::Approx(want).epsilon(1e-12));
      acc += want;
    }
    CHECK(got.map == doctest::Approx(acc / classes.size()).epsilon(1e-12));
  }
}

TEST_CASE("detection_loss values") {
  ModelConfig cfg = tiny_model_config(16);
  const int h = 4, w = 4;

  // no gt, all logits zero: loss = lambda_cls * ln 2
  HeadOutput head;
  head.cls_logits = zeros({3, h, w});
  head.objectness = sigmoid(head.cls_logits);
  head.box_reg = zeros({4, h, w});
  Tensor l = detection_loss(head, {}, cfg, 1.0, 0.5);
  CHECK(l.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  Tensor l2 = detection_loss(head, {}, cfg, 2.0, 0.5);
  CHECK(l2.item() == doctest::Approx(2 * std::log(2.0)).epsilon(1e-12));

  // saturated perfect predictions drive the loss toward zero
  GtBox gt{1, 4, 4, 12, 12};  // center (8,8) -> cell (2,2), log size log(8)
  std::vector<real> logits(3 * h * w, -40.0);
  logits[1 * h * w + 2 * w + 2] = 40.0;
  std::vector<real> reg(4 * h * w, 0.0);
  reg[0 * h * w + 2 * w + 2] = 8.0 / 4 - 2.5;  // dx
  reg[1 * h * w + 2 * w + 2] = 8.0 / 4 - 2.5;  // dy
  reg[2 * h * w + 2 * w + 2] = std::log(8.0);
  reg[3 * h * w + 2 * w + 2] = std::log(8.0);
  HeadOutput perfect;
  perfect.cls_logits = Tensor({3, h, w}, logits);
  perfect.objectness = sigmoid(perfect.cls_logits);
  perfect.box_reg = Tensor({4, h, w}, reg);
  CHECK(detection_loss(perfect, {gt}, cfg, 1.0, 0.5).item() < 1e-6);

  // box term is exactly linear in lambda_box
  HeadOutput off = perfect;
  std::vector<real> reg_off(reg);
  reg_off[2 * h * w + 2 * w + 2] += 0.7;
  off.box_reg = Tensor({4, h, w}, reg_off);
  const real base = detection_loss(off, {gt}, cfg, 0.0, 1.0).item();
  const real doubled = detection_loss(off, {gt}, cfg, 0.0, 2.0).item();
  CHECK(doubled == 2 * base);
  CHECK(base == doctest::Approx(0.7).epsilon(1e-12));

  // non-negative everywhere
  CHECK(base >= 0);
  CHECK(l.item() >= 0);
}

TEST_CASE("detection_loss gradients match finite differences") {
  ModelConfig cfg = tiny_model_config(16);
  Rng rng(23);
  const int h = 4, w = 4;
  std::vector<real> logits(3 * h * w), reg(4 * h * w);
  for (real& v : logits) v = rng.uniform(-2, 2);
  for (real& v : reg) v = rng.uniform(-2, 2);
  std::vector<GtBox> gt{{0, 2, 2, 9, 9}, {2, 8, 9, 15, 14}};

  Tape tape;
  Tensor tl = tensor_from({3, h, w}, logits, true);
  Tensor tr = tensor_from({4, h, w}, reg, true);
  HeadOutput head;
  head.cls_logits = tl;
  head.objectness = sigmoid(tl);
  head.box_reg = tr;
  Tensor loss = detection_loss(head, gt, cfg, 1.0, 0.5);
  GradientMap grads = tape.run_backward(loss);

  auto eval_loss = [&](const Tensor& lgt, const Tensor& bx) {
    HeadOutput hh;
    hh.cls_logits = lgt;
    hh.objectness = sigmoid(lgt);
    hh.box_reg = bx;
    return detection_loss(hh, gt, cfg, 1.0, 0.5).item();
  };
  Tensor fd_l = finite_difference_grad(
      [&](const Tensor& t) { return eval_loss(t, Tensor({4, h, w}, reg)); },
      Tensor({3, h, w}, logits), 1e-4);
  Tensor fd_r = finite_difference_grad(
      [&](const Tensor& t) { return eval_loss(Tensor({3, h, w}, logits), t); },
      Tensor({4, h, w}, reg), 1e-4);

  for (std::int64_t i = 0; i < fd_l.size(); ++i) {
    CHECK(std::abs(grads.grad(tl).data()[i] - fd_l.data()[i]) < 1e-7);
  }
  for (std::int64_t i = 0; i < fd_r.size(); ++i) {
    CHECK(std::abs(grads.grad(tr).data()[i] - fd_r.data()[i]) < 1e-7);
  }
}

TEST_CASE("training is deterministic and lr=0 freezes parameters") {
  std::vector<Clip> clips = tiny_dataset(4, 5, 16, 500);
  ModelConfig cfg = tiny_model_config(16);

  TrainConfig tc;
  tc.iterations = 12;
  tc.lr = 0.0;
  tc.lr_decay_at = 6;
  ModelParams frozen = init_params(cfg, 9);
  ModelParams reference = init_params(cfg, 9);
  train(frozen, clips, cfg, tc);
  bool all_equal = true;
  frozen.for_each_layer([&](const std::string& name, ConvLayer& layer) {
    reference.for_each_layer([&](const std::string& name2, ConvLayer& layer2) {
      if (name != name2) return;
      if (layer.params.weight.values() != layer2.params.weight.values()) all_equal = false;
      if (layer.params.bias.values() != layer2.params.bias.values()) all_equal = false;
    });
  });
  CHECK(all_equal);

  tc.lr = 1e-2;
  tc.iterations = 25;
  ModelParams a = init_params(cfg, 9);
  ModelParams b = init_params(cfg, 9);
  TrainResult ra = train(a, clips, cfg, tc);
  TrainResult rb = train(b, clips, cfg, tc);
  REQUIRE(ra.losses.size() == rb.losses.size());
  CHECK(std::memcmp(ra.losses.data(), rb.losses.data(), sizeof(real) * ra.losses.size()) == 0);
}

TEST_CASE("loss falls within the first few hundred iterations") {
  std::vector<Clip> clips = tiny_dataset(8, 5, 32, 900);
  ModelConfig cfg = tiny_model_config(32);
  cfg.feature_channels = 16;

  TrainConfig tc;
  tc.iterations = 520;
  tc.lr_decay_at = 400;
  tc.seed = 7;
  ModelParams p = init_params(cfg, 7);
  TrainResult r = train(p, clips, cfg, tc);

  auto window_mean = [&](int start) {
    real acc = 0;
    for (int i = start; i < start + 50; ++i) acc += r.losses[static_cast<std::size_t>(i)];
    return acc / 50;
  };
  CHECK(window_mean(470) < window_mean(0));
}

TEST_CASE("exploding training aborts with a numeric diagnostic") {
  std::vector<Clip> clips = tiny_dataset(2, 3, 16, 1300);
  ModelConfig cfg = tiny_model_config(16);
  TrainConfig tc;
  tc.iterations = 80;
  tc.lr = 1e13;
  tc.lr_decay_at = 80;
  ModelParams p = init_params(cfg, 3);
  CHECK_THROWS_AS(train(p, clips, cfg, tc), NumericError);
}

TEST_CASE("ablation curve and weight profile behave on identical-frame clips") {
  // static objects, no noise, no degradation: every frame is identical
  std::vector<Clip> clips;
  for (int i = 0; i < 3; ++i) {
    ClipConfig c;
    c.frames = 5;
    c.image_h = c.image_w = 32;
    c.num_objects = 1;
    c.velocity_min = c.velocity_max = 0;
    c.occlusion_prob = c.blur_prob = 0;
    c.noise_std = 0;
    c.seed = 2000 + static_cast<std::uint64_t>(i);
    clips.push_back(generate_clip(c));
  }
  ModelConfig cfg = tiny_model_config(32);
  ModelParams p = init_params(cfg, 17);

  EvalConfig ec;
  ec.k_eval = 0;
  EvalReport base = evaluate(p, cfg, clips, ec);

  auto curve = ablation_frame_count(p, cfg, clips, {0, 1, 2}, ec);
  REQUIRE(curve.size() == 3);
  CHECK(curve[0].first == 0);
  CHECK(curve[0].second == doctest::Approx(base.map).epsilon(1e-12));
  CHECK(curve[1].second == doctest::Approx(base.map).epsilon(1e-9));
  CHECK(curve[2].second == doctest::Approx(base.map).epsilon(1e-9));

  EvalConfig ec2;
  ec2.k_eval = 2;
  EvalReport rep = evaluate(p, cfg, clips, ec2);
  REQUIRE(rep.weight_profile.size() == 5);
  real total = 0;
  for (real wv : rep.weight_profile) {
    CHECK(wv == doctest::Approx(0.2).epsilon(1e-6));
    total += wv;
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
}

}  // TEST_SUITE
