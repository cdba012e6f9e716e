#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <tuple>

#include "stsn/checkpoint.hpp"
#include "stsn/eval.hpp"
#include "stsn/model.hpp"
#include "stsn/rng.hpp"
#include "stsn/runconfig.hpp"
#include "stsn/synthvid.hpp"
#include "stsn/train.hpp"

namespace fs = std::filesystem;
using namespace stsn;

namespace {

struct RangeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GenOptions {
  std::string out;
  int clips = 8;
  int frames = 9;
  std::string size = "64x64";
  std::uint64_t seed = 1;
  double occlusion_prob = 0.7;
  double blur_prob = 0.5;
  double velocity_min = 1.0;
  double velocity_max = 4.0;
  double noise_std = 0.02;
  int num_objects = 0;  // 0: uniform 1..3 per clip
};

std::pair<int, int> parse_size(const std::string& s) {
  int h = 0, w = 0;
  require(std::sscanf(s.c_str(), "%dx%d", &h, &w) == 2 && h > 0 && w > 0,
          "--size must look like 64x64");
  return {h, w};
}

int run_gen_data(const GenOptions& opt) {
  const auto [h, w] = parse_size(opt.size);
  require(opt.clips > 0, "--clips must be positive");
  std::vector<Clip> clips;
  int degraded = 0;
  for (int i = 0; i < opt.clips; ++i) {
    ClipConfig cc;
    cc.frames = opt.frames;
    cc.image_h = h;
    cc.image_w = w;
    cc.occlusion_prob = opt.occlusion_prob;
    cc.blur_prob = opt.blur_prob;
    cc.velocity_min = opt.velocity_min;
    cc.velocity_max = opt.velocity_max;
    cc.noise_std = opt.noise_std;
    cc.seed = opt.seed + static_cast<std::uint64_t>(i);
    if (opt.num_objects > 0) {
      cc.num_objects = opt.num_objects;
    } else {
      Rng pick(cc.seed ^ 0x6f626a73ULL);
      cc.num_objects = pick.uniform_int(1, 3);
    }
    clips.push_back(generate_clip(cc));
    for (bool d : clips.back().degraded) degraded += d ? 1 : 0;
  }
  write_dataset(clips, opt.out);
  std::printf("wrote %d clips of %d frames (%dx%d) to %s, %d degraded reference frames\n",
              opt.clips, opt.frames, h, w, opt.out.c_str(), degraded);
  return 0;
}

struct TrainOptions {
  std::string data;
  std::string config;
  std::string out;
  bool static_baseline = false;
};

int run_train(const TrainOptions& opt) {
  RunConfig rc = parse_runconfig(opt.config);
  std::vector<Clip> clips = read_dataset(opt.data);

  ModelConfig mc = rc.model;
  mc.image_h = clips[0].height();
  mc.image_w = clips[0].width();
  TrainConfig tc = rc.train;
  tc.static_baseline = opt.static_baseline;
  mc.K = tc.static_baseline ? 0 : tc.k_train;
  mc.temporal_stride = 1;
  mc.validate();

  ModelParams params = init_params(mc, tc.seed);
  TrainResult result = train(params, clips, mc, tc);
  save_checkpoint(opt.out, mc, params);
  write_loss_csv(opt.out + ".loss.csv", result);
  std::printf("trained %d iterations (%s), final loss %.6f; wrote %s and %s.loss.csv\n",
              tc.iterations, opt.static_baseline ? "SSN static baseline" : "STSN",
              result.losses.back(), opt.out.c_str(), opt.out.c_str());
  return 0;
}

struct EvalOptions {
  std::string data;
  std::string ckpt;
  std::vector<int> k_values;
  std::vector<int> strides;
  std::string report;
  double score_threshold = 0.05;
};

int run_eval(const EvalOptions& opt) {
  auto [cfg, params] = load_checkpoint(opt.ckpt);
  std::vector<Clip> clips = read_dataset(opt.data);
  if (clips[0].height() != cfg.image_h || clips[0].width() != cfg.image_w) {
    throw CheckpointError("checkpoint expects " + std::to_string(cfg.image_h) + "x" +
                          std::to_string(cfg.image_w) + " frames, dataset has " +
                          std::to_string(clips[0].height()) + "x" +
                          std::to_string(clips[0].width()));
  }

  std::vector<int> ks = opt.k_values.empty() ? std::vector<int>{cfg.K} : opt.k_values;
  std::vector<int> strides = opt.strides.empty() ? std::vector<int>{1} : opt.strides;

  std::vector<std::tuple<int, int, real>> map_rows;
  for (int k : ks) {
    for (int stride : strides) {
      EvalConfig ec;
      ec.k_eval = k;
      ec.temporal_stride = stride;
      ec.score_threshold = opt.score_threshold;
      EvalReport rep = evaluate(params, cfg, clips, ec);
      map_rows.emplace_back(k, stride, rep.map);
      std::printf("K=%d stride=%d mAP@0.5=%.4f\n", k, stride, rep.map);
    }
  }

  // weight profile at the largest requested K, first stride
  const int kmax = *std::max_element(ks.begin(), ks.end());
  EvalConfig ec;
  ec.k_eval = kmax;
  ec.temporal_stride = strides.front();
  ec.score_threshold = opt.score_threshold;
  EvalReport prof = evaluate(params, cfg, clips, ec);
  std::vector<std::pair<int, real>> weight_rows;
  for (int j = -kmax; j <= kmax; ++j) {
    weight_rows.emplace_back(j * ec.temporal_stride,
                             prof.weight_profile[static_cast<std::size_t>(j + kmax)]);
  }
  write_eval_csv(opt.report, map_rows, weight_rows);
  std::printf("wrote %s\n", opt.report.c_str());
  return 0;
}

struct VizOptions {
  std::string ckpt;
  std::string data;
  int clip = 0;
  int frame = -1;
  std::string out;
};

void write_ppm(const fs::path& path, const Tensor& frame,
               const std::vector<std::tuple<int, int, int>>& marks_rgb,
               const std::vector<std::pair<real, real>>& marks_yx) {
  const int h = frame.dims()[1], w = frame.dims()[2];
  std::vector<unsigned char> rgb(static_cast<std::size_t>(h) * w * 3);
  for (int i = 0; i < h * w; ++i) {
    const real v = std::min(real(1), std::max(real(0), frame.values()[static_cast<std::size_t>(i)]));
    const auto byte = static_cast<unsigned char>(std::lround(v * 255));
    rgb[3 * i] = rgb[3 * i + 1] = rgb[3 * i + 2] = byte;
  }
  for (std::size_t m = 0; m < marks_yx.size(); ++m) {
    const int cy = static_cast<int>(std::lround(marks_yx[m].first));
    const int cx = static_cast<int>(std::lround(marks_yx[m].second));
    const auto [r, g, b] = marks_rgb[m];
    for (int dy = -2; dy <= 2; ++dy) {
      for (int dx = -2; dx <= 2; ++dx) {
        if (std::abs(dy) != 2 && std::abs(dx) != 2) continue;  // hollow square
        const int y = cy + dy, x = cx + dx;
        if (y < 0 || y >= h || x < 0 || x >= w) continue;
        rgb[3 * (y * w + x)] = static_cast<unsigned char>(r);
        rgb[3 * (y * w + x) + 1] = static_cast<unsigned char>(g);
        rgb[3 * (y * w + x) + 2] = static_cast<unsigned char>(b);
      }
    }
  }
  std::ofstream os(path, std::ios::binary);
  require(os.good(), "cannot write image: " + path.string());
  os << "P6\n" << w << " " << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  require(os.good(), "image write failed: " + path.string());
}

int run_viz(const VizOptions& opt) {
  auto [cfg, params] = load_checkpoint(opt.ckpt);
  std::vector<Clip> clips = read_dataset(opt.data);
  if (opt.clip < 0 || opt.clip >= static_cast<int>(clips.size())) {
    throw RangeError("clip index out of range");
  }
  const Clip& clip = clips[static_cast<std::size_t>(opt.clip)];
  if (opt.frame < 0 || opt.frame >= clip.length()) {
    throw RangeError("frame index out of range");
  }

  std::vector<Tensor> frames;
  for (int t = 0; t < clip.length(); ++t) frames.push_back(clip.frame(t));
  ForwardResult fwd = stsn_forward(frames, opt.frame, cfg, params, 1.0);

  // reference point: center of the first gt object, else the image center
  real ref_y = cfg.image_h / 2.0, ref_x = cfg.image_w / 2.0;
  if (!clip.boxes[opt.frame].empty()) {
    const GtBox& b = clip.boxes[opt.frame][0];
    ref_y = (b.y1 + b.y2) / 2;
    ref_x = (b.x1 + b.x2) / 2;
  }
  const real s = static_cast<real>(cfg.head_stride);
  const int fh = cfg.feature_h(), fw = cfg.feature_w();
  const int ci = std::clamp(static_cast<int>(std::floor(ref_y / s)), 0, fh - 1);
  const int cj = std::clamp(static_cast<int>(std::floor(ref_x / s)), 0, fw - 1);
  const std::size_t p = static_cast<std::size_t>(ci) * fw + cj;

  fs::create_directories(opt.out);
  std::ofstream csv(fs::path(opt.out) / "offsets.csv");
  require(csv.good(), "cannot write offsets.csv");
  csv << "k,ref_y,ref_x,mean_dy,mean_dx\n";

  char buf[160];
  for (int slot = 0; slot < static_cast<int>(fwd.frame_indices.size()); ++slot) {
    const int j = slot - cfg.K;
    const Tensor& o4 = fwd.final_offsets[static_cast<std::size_t>(slot)];
    const int taps = o4.dims()[0] / 2;
    real mean_dy = 0, mean_dx = 0;
    for (int t = 0; t < taps; ++t) {
      mean_dy += o4.values()[(2 * t) * (fh * fw) + p];
      mean_dx += o4.values()[(2 * t + 1) * (fh * fw) + p];
    }
    mean_dy = mean_dy / taps * s;  // image pixels
    mean_dx = mean_dx / taps * s;

    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g\n", j * cfg.temporal_stride,
                  ref_y, ref_x, mean_dy, mean_dx);
    csv << buf;

    std::snprintf(buf, sizeof(buf), "support_k%+d.ppm", j * cfg.temporal_stride);
    const Tensor support = frames[static_cast<std::size_t>(fwd.frame_indices[slot])];
    write_ppm(fs::path(opt.out) / buf, support,
              {{0, 220, 0}, {230, 30, 30}},
              {{ref_y, ref_x}, {ref_y + mean_dy, ref_x + mean_dx}});
  }
  require(csv.good(), "offsets.csv write failed");
  std::printf("wrote %zu supporting-frame images and offsets.csv to %s\n",
              fwd.frame_indices.size(), opt.out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatiotemporal sampling network: synthetic-video training and evaluation"};
  app.require_subcommand(1);

  GenOptions gen;
  CLI::App* cmd_gen = app.add_subcommand("gen-data", "generate a synthetic video dataset");
  cmd_gen->add_option("--out", gen.out, "output dataset directory")->required();
  cmd_gen->add_option("--clips", gen.clips, "number of clips");
  cmd_gen->add_option("--frames", gen.frames, "frames per clip");
  cmd_gen->add_option("--size", gen.size, "frame size HxW");
  cmd_gen->add_option("--seed", gen.seed, "base seed");
  cmd_gen->add_option("--occlusion-prob", gen.occlusion_prob, "occluder probability");
  cmd_gen->add_option("--blur-prob", gen.blur_prob, "blur probability");
  cmd_gen->add_option("--velocity-min", gen.velocity_min, "min speed, px/frame");
  cmd_gen->add_option("--velocity-max", gen.velocity_max, "max speed, px/frame");
  cmd_gen->add_option("--noise-std", gen.noise_std, "background noise sigma");
  cmd_gen->add_option("--num-objects", gen.num_objects, "objects per clip (0: randomize 1..3)");

  TrainOptions tr;
  CLI::App* cmd_train = app.add_subcommand("train", "train STSN (or the SSN static baseline)");
  cmd_train->add_option("--data", tr.data, "dataset directory")->required();
  cmd_train->add_option("--config", tr.config, "run-config file")->required();
  cmd_train->add_option("--out", tr.out, "output checkpoint path")->required();
  cmd_train->add_flag("--static-baseline", tr.static_baseline,
                      "SSN: use the reference frame as its own support");

  EvalOptions ev;
  CLI::App* cmd_eval = app.add_subcommand("eval", "evaluate a checkpoint; ablation rows per (K, stride)");
  cmd_eval->add_option("--data", ev.data, "dataset directory")->required();
  cmd_eval->add_option("--ckpt", ev.ckpt, "checkpoint path")->required();
  cmd_eval->add_option("--K", ev.k_values, "supporting frames each side (repeatable)");
  cmd_eval->add_option("--stride", ev.strides, "temporal stride (repeatable)");
  cmd_eval->add_option("--report", ev.report, "output CSV path")->required();
  cmd_eval->add_option("--score-threshold", ev.score_threshold, "decode threshold");

  VizOptions viz;
  CLI::App* cmd_viz = app.add_subcommand("viz-offsets", "export sampling-location visualizations");
  cmd_viz->add_option("--ckpt", viz.ckpt, "checkpoint path")->required();
  cmd_viz->add_option("--data", viz.data, "dataset directory")->required();
  cmd_viz->add_option("--clip", viz.clip, "clip index")->required();
  cmd_viz->add_option("--frame", viz.frame, "reference frame index")->required();
  cmd_viz->add_option("--out", viz.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (cmd_gen->parsed()) return run_gen_data(gen);
    if (cmd_train->parsed()) return run_train(tr);
    if (cmd_eval->parsed()) return run_eval(ev);
    if (cmd_viz->parsed()) return run_viz(viz);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 4;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "incompatible checkpoint: %s\n", e.what());
    return 5;
  } catch (const RangeError& e) {
    std::fprintf(stderr, "out of range: %s\n", e.what());
    return 6;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "invalid arguments: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "io failure: %s\n", e.what());
    return 3;
  }
  return 0;
}
