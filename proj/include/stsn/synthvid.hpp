#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stsn/tensor.hpp"

namespace stsn {

struct GtBox {
  int class_id = 0;
  real x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  bool operator==(const GtBox&) const = default;
};

struct Vec2 {
  real dy = 0, dx = 0;
  bool operator==(const Vec2&) const = default;
};

// Shape classes: 0 disk, 1 square, 2 triangle.
struct ObjectState {
  int class_id = 0;
  real cy = 0, cx = 0;
  real half = 6;  // half extent in pixels
  real vy = 0, vx = 0;
  real intensity = 0.8;
};

struct ClipConfig {
  int frames = 9;
  int image_h = 64;
  int image_w = 64;
  int num_objects = 2;          // 1..3
  real velocity_min = 1.0;      // pixels/frame, magnitude
  real velocity_max = 4.0;
  real occlusion_prob = 0.7;
  real blur_prob = 0.5;
  real noise_std = 0.02;
  std::uint64_t seed = 1;
  void validate() const;
};

// A synthetic video. Only the designated reference frame (the clip center)
// is ever degraded; every other frame is the clean render.
struct Clip {
  Tensor frames;                            // [T, 1, H, W], grayscale in [0, 1]
  std::vector<std::vector<GtBox>> boxes;    // per frame, object order preserved
  std::vector<std::vector<Vec2>> motion;    // motion[t][o] = position(t+1) - position(t)
  std::vector<bool> degraded;               // per frame

  int length() const { return frames.dims().empty() ? 0 : frames.dims()[0]; }
  int height() const { return frames.dims()[2]; }
  int width() const { return frames.dims()[3]; }
  Tensor frame(int t) const;  // [1, H, W]
  bool operator==(const Clip&) const;
};

inline int designated_reference(int frames) { return frames / 2; }

constexpr real kBackground = 0.12;

enum class Degradation { Blur, Occlusion };

// Objects move with constant velocity, reflecting off the borders; the
// reference frame is degraded per the configured probabilities; everything is
// determined by config.seed.
Clip generate_clip(const ClipConfig& config);

// Rendering core with caller-chosen objects (frame-0 states).
Clip render_clip(const ClipConfig& config, std::vector<ObjectState> objects);

bool object_covers(const ObjectState& o, real py, real px);
GtBox object_box(const ObjectState& o, int h, int w);

// blur: 5x5 box filter applied twice with reflective padding.
// occlusion: background-colored rectangle grown over one seeded-chosen object
// until it covers a seeded target in [0.5, 0.7] of the object's pixels.
Tensor apply_degradation(const Tensor& frame, Degradation kind, std::uint64_t seed,
                         std::span<const ObjectState> objects);

// Deterministic occluder used by apply_degradation; exposed so coverage is
// testable at chosen levels. side: 0 left, 1 right, 2 top, 3 bottom.
Tensor apply_occlusion(const Tensor& frame, const ObjectState& object, real coverage, int side);

// Dataset directory format: a `manifest` text file plus one binary tensor
// file per clip (magic "STSN", version u16, rank u16, dims u32 LE, row-major
// f32 LE payload, payload CRC32). Round-trips are lossless.
void write_dataset(const std::vector<Clip>& clips, const std::filesystem::path& dir);
std::vector<Clip> read_dataset(const std::filesystem::path& dir);

void write_tensor_file(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor_file(const std::filesystem::path& path);

}  // namespace stsn
