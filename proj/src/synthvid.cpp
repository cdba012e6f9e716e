#include "stsn/synthvid.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "stsn/binio.hpp"
#include "stsn/rng.hpp"

namespace stsn {

namespace {

constexpr real kPi = 3.14159265358979323846;

real clamp01(real v) { return std::min(real(1), std::max(real(0), v)); }

// storing as f32 makes the on-disk round trip exact
real quantize(real v) { return static_cast<real>(static_cast<float>(v)); }

int reflect_index(int i, int n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
  }
  return i;
}

std::vector<real> box_blur_once(const std::vector<real>& in, int h, int w) {
  std::vector<real> tmp(in.size()), out(in.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      real acc = 0;
      for (int d = -2; d <= 2; ++d) acc += in[y * w + reflect_index(x + d, w)];
      tmp[y * w + x] = acc / 5.0;
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      real acc = 0;
      for (int d = -2; d <= 2; ++d) acc += tmp[reflect_index(y + d, h) * w + x];
      out[y * w + x] = acc / 5.0;
    }
  }
  return out;
}

std::string format_real(real v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

real parse_real(const std::string& s) {
  std::size_t pos = 0;
  real v = std::stod(s, &pos);
  require(pos == s.size(), "malformed number in manifest: " + s);
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) parts.push_back(item);
  return parts;
}

}  // namespace

void ClipConfig::validate() const {
  require(frames >= 1, "clip needs at least one frame");
  require(image_h >= 8 && image_w >= 8, "image too small");
  require(num_objects >= 1 && num_objects <= 3, "num_objects must be 1..3");
  require(velocity_min >= 0 && velocity_max >= velocity_min, "bad velocity range");
  require(occlusion_prob >= 0 && occlusion_prob <= 1, "occlusion_prob must be in [0,1]");
  require(blur_prob >= 0 && blur_prob <= 1, "blur_prob must be in [0,1]");
  require(noise_std >= 0, "noise_std must be non-negative");
}

Tensor Clip::frame(int t) const {
  require(t >= 0 && t < length(), "frame index out of range");
  const int h = height(), w = width();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<real> v(frames.values().begin() + static_cast<std::ptrdiff_t>(t * plane),
                      frames.values().begin() + static_cast<std::ptrdiff_t>((t + 1) * plane));
  return Tensor({1, h, w}, std::move(v));
}

bool Clip::operator==(const Clip& other) const {
  return frames.dims() == other.frames.dims() && frames.values() == other.frames.values() &&
         boxes == other.boxes && motion == other.motion && degraded == other.degraded;
}

bool object_covers(const ObjectState& o, real py, real px) {
  const real dy = py - o.cy, dx = px - o.cx;
  switch (o.class_id) {
    case 0: return dy * dy + dx * dx <= o.half * o.half;
    case 1: return std::abs(dy) <= o.half && std::abs(dx) <= o.half;
    case 2:  // upward triangle: apex (cy-half, cx), base at cy+half
      return dy >= -o.half && dy <= o.half && std::abs(dx) <= (dy + o.half) / 2.0;
    default: throw std::invalid_argument("unknown shape class");
  }
}

GtBox object_box(const ObjectState& o, int h, int w) {
  int ymin = h, ymax = -1, xmin = w, xmax = -1;
  const int y0 = std::max(0, static_cast<int>(std::floor(o.cy - o.half)) - 1);
  const int y1 = std::min(h - 1, static_cast<int>(std::ceil(o.cy + o.half)) + 1);
  const int x0 = std::max(0, static_cast<int>(std::floor(o.cx - o.half)) - 1);
  const int x1 = std::min(w - 1, static_cast<int>(std::ceil(o.cx + o.half)) + 1);
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      if (object_covers(o, static_cast<real>(y), static_cast<real>(x))) {
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
      }
    }
  }
  require(ymax >= ymin && xmax >= xmin, "object renders to an empty mask");
  return {o.class_id, static_cast<real>(xmin), static_cast<real>(ymin),
          static_cast<real>(xmax + 1), static_cast<real>(ymax + 1)};
}

Clip render_clip(const ClipConfig& config, std::vector<ObjectState> objects) {
  config.validate();
  const int T = config.frames, h = config.image_h, w = config.image_w;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const int ref = designated_reference(T);

  Rng noise_rng(config.seed ^ 0x6e6f697365ULL);
  Rng degrade_rng(config.seed ^ 0x646567ULL);

  std::vector<real> data(static_cast<std::size_t>(T) * plane);
  std::vector<std::vector<GtBox>> boxes(T);
  std::vector<std::vector<Vec2>> motion;
  std::vector<bool> degraded(T, false);

  std::vector<ObjectState> state = objects;
  for (int t = 0; t < T; ++t) {
    std::vector<real> frame(plane, kBackground);
    if (config.noise_std > 0) {
      for (real& v : frame) v = clamp01(v + config.noise_std * noise_rng.normal());
    }
    for (const ObjectState& o : state) {
      const GtBox b = object_box(o, h, w);
      boxes[t].push_back(b);
      for (int y = static_cast<int>(b.y1); y < static_cast<int>(b.y2); ++y) {
        for (int x = static_cast<int>(b.x1); x < static_cast<int>(b.x2); ++x) {
          if (object_covers(o, y, x)) frame[y * w + x] = o.intensity;
        }
      }
    }

    if (t == ref) {
      const bool occlude = degrade_rng.uniform() < config.occlusion_prob;
      const bool blur = degrade_rng.uniform() < config.blur_prob;
      Tensor ft({1, h, w}, frame);
      if (blur) ft = apply_degradation(ft, Degradation::Blur, config.seed, state);
      if (occlude) ft = apply_degradation(ft, Degradation::Occlusion, config.seed, state);
      degraded[t] = occlude || blur;
      frame = ft.values();
    }

    for (std::size_t i = 0; i < plane; ++i) data[t * plane + i] = quantize(frame[i]);

    // advance with border reflection, keeping objects fully inside
    if (t + 1 < T) {
      std::vector<Vec2> mv;
      for (ObjectState& o : state) {
        const real old_cy = o.cy, old_cx = o.cx;
        const real lo_y = o.half + 1, hi_y = h - 2 - o.half;
        const real lo_x = o.half + 1, hi_x = w - 2 - o.half;
        o.cy += o.vy;
        o.cx += o.vx;
        if (o.cy > hi_y) { o.cy = 2 * hi_y - o.cy; o.vy = -o.vy; }
        if (o.cy < lo_y) { o.cy = 2 * lo_y - o.cy; o.vy = -o.vy; }
        if (o.cx > hi_x) { o.cx = 2 * hi_x - o.cx; o.vx = -o.vx; }
        if (o.cx < lo_x) { o.cx = 2 * lo_x - o.cx; o.vx = -o.vx; }
        mv.push_back({o.cy - old_cy, o.cx - old_cx});
      }
      motion.push_back(std::move(mv));
    }
  }

  Clip clip;
  clip.frames = Tensor({T, 1, h, w}, std::move(data));
  clip.boxes = std::move(boxes);
  clip.motion = std::move(motion);
  clip.degraded = std::move(degraded);
  return clip;
}

Clip generate_clip(const ClipConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const int h = config.image_h, w = config.image_w;

  const real max_half = std::min(real(9), std::min(h, w) / real(7));
  const real min_half = std::min(real(5), real(0.6) * max_half);

  std::vector<ObjectState> objects;
  for (int i = 0; i < config.num_objects; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      ObjectState o;
      o.class_id = rng.uniform_int(0, 2);
      o.half = rng.uniform(min_half, max_half);
      const real lo_y = o.half + 1, hi_y = h - 2 - o.half;
      const real lo_x = o.half + 1, hi_x = w - 2 - o.half;
      if (hi_y <= lo_y || hi_x <= lo_x) continue;
      o.cy = rng.uniform(lo_y, hi_y);
      o.cx = rng.uniform(lo_x, hi_x);
      const real speed = rng.uniform(config.velocity_min, config.velocity_max);
      const real angle = rng.uniform(0.0, 2 * kPi);
      o.vy = speed * std::sin(angle);
      o.vx = speed * std::cos(angle);
      o.intensity = rng.uniform(0.65, 0.95);
      bool overlaps = false;
      for (const ObjectState& prev : objects) {
        const real dy = prev.cy - o.cy, dx = prev.cx - o.cx;
        if (std::sqrt(dy * dy + dx * dx) < prev.half + o.half + 2) overlaps = true;
      }
      if (!overlaps) {
        objects.push_back(o);
        placed = true;
      }
    }
    require(placed, "unsatisfiable spawn: objects do not fit the frame");
  }
  return render_clip(config, std::move(objects));
}

Tensor apply_occlusion(const Tensor& frame, const ObjectState& object, real coverage, int side) {
  require(frame.dims().size() == 3 && frame.dims()[0] == 1, "frame must be [1,h,w]");
  require(coverage >= 0 && coverage <= 1, "coverage must be in [0,1]");
  const int h = frame.dims()[1], w = frame.dims()[2];
  const GtBox b = object_box(object, h, w);
  const int bx1 = static_cast<int>(b.x1), by1 = static_cast<int>(b.y1);
  const int bx2 = static_cast<int>(b.x2), by2 = static_cast<int>(b.y2);

  std::vector<std::pair<int, int>> mask;
  for (int y = by1; y < by2; ++y) {
    for (int x = bx1; x < bx2; ++x) {
      if (object_covers(object, y, x)) mask.emplace_back(y, x);
    }
  }
  const std::size_t want = static_cast<std::size_t>(std::ceil(coverage * mask.size()));

  // grow a strip from the chosen side until enough object pixels are covered
  int x1 = bx1, x2 = bx2, y1 = by1, y2 = by2;
  const int steps = (side < 2) ? bx2 - bx1 : by2 - by1;
  for (int grow = 1; grow <= steps; ++grow) {
    switch (side) {
      case 0: x1 = bx1; x2 = bx1 + grow; y1 = by1; y2 = by2; break;
      case 1: x1 = bx2 - grow; x2 = bx2; y1 = by1; y2 = by2; break;
      case 2: x1 = bx1; x2 = bx2; y1 = by1; y2 = by1 + grow; break;
      default: x1 = bx1; x2 = bx2; y1 = by2 - grow; y2 = by2; break;
    }
    std::size_t covered = 0;
    for (const auto& [my, mx] : mask) {
      if (my >= y1 && my < y2 && mx >= x1 && mx < x2) ++covered;
    }
    if (covered >= want) break;
  }

  std::vector<real> out(frame.values());
  for (int y = y1; y < y2; ++y) {
    for (int x = x1; x < x2; ++x) out[y * w + x] = kBackground;
  }
  return Tensor(frame.dims(), std::move(out));
}

Tensor apply_degradation(const Tensor& frame, Degradation kind, std::uint64_t seed,
                         std::span<const ObjectState> objects) {
  require(frame.dims().size() == 3 && frame.dims()[0] == 1, "frame must be [1,h,w]");
  for (real v : frame.values()) require(v >= 0 && v <= 1, "frame values must be in [0,1]");
  const int h = frame.dims()[1], w = frame.dims()[2];

  if (kind == Degradation::Blur) {
    std::vector<real> v = box_blur_once(frame.values(), h, w);
    v = box_blur_once(v, h, w);
    for (real& x : v) x = clamp01(x);
    return Tensor(frame.dims(), std::move(v));
  }

  require(!objects.empty(), "occlusion needs at least one object");
  Rng rng(seed ^ 0x6f63636cULL);
  const ObjectState& target = objects[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(objects.size()) - 1))];
  const real coverage = rng.uniform(0.5, 0.7);
  const int side = rng.uniform_int(0, 3);
  return apply_occlusion(frame, target, coverage, side);
}

void write_tensor_file(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  require(os.good(), "cannot open tensor file for writing: " + path.string());
  os.write("STSN", 4);
  put_u16(os, 1);  // version
  put_u16(os, static_cast<std::uint16_t>(t.dims().size()));
  for (int d : t.dims()) put_u32(os, static_cast<std::uint32_t>(d));
  std::vector<unsigned char> payload;
  payload.reserve(t.values().size() * 4);
  for (real v : t.values()) append_f32(payload, static_cast<float>(v));
  os.write(reinterpret_cast<const char*>(payload.data()),
           static_cast<std::streamsize>(payload.size()));
  put_u32(os, crc32(payload));
  require(os.good(), "tensor file write failed: " + path.string());
}

Tensor read_tensor_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is.good()) throw std::runtime_error("cannot open tensor file: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::string(magic, 4) != "STSN") {
    throw std::runtime_error("bad tensor file magic: " + path.string());
  }
  const std::uint16_t version = get_u16(is);
  if (version != 1) throw std::runtime_error("unsupported tensor file version");
  const std::uint16_t rank = get_u16(is);
  if (rank == 0 || rank > 8) throw std::runtime_error("bad tensor rank");
  std::vector<int> dims(rank);
  std::int64_t count = 1;
  for (int i = 0; i < rank; ++i) {
    dims[i] = static_cast<int>(get_u32(is));
    if (dims[i] <= 0) throw std::runtime_error("bad tensor extent");
    count *= dims[i];
  }
  std::vector<unsigned char> payload(static_cast<std::size_t>(count) * 4);
  is.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (static_cast<std::size_t>(is.gcount()) != payload.size()) {
    throw std::runtime_error("truncated tensor file: " + path.string());
  }
  const std::uint32_t want_crc = get_u32(is);
  if (crc32(payload) != want_crc) {
    throw std::runtime_error("tensor payload checksum mismatch: " + path.string());
  }
  std::vector<real> values(static_cast<std::size_t>(count));
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = payload[4 * i] | (payload[4 * i + 1] << 8) | (payload[4 * i + 2] << 16) |
                         (static_cast<std::uint32_t>(payload[4 * i + 3]) << 24);
    float f;
    std::memcpy(&f, &bits, 4);
    values[i] = static_cast<real>(f);
  }
  return Tensor(std::move(dims), std::move(values));
}

void write_dataset(const std::vector<Clip>& clips, const std::filesystem::path& dir) {
  require(!clips.empty(), "write_dataset: no clips");
  std::filesystem::create_directories(dir);
  std::ofstream mf(dir / "manifest");
  require(mf.good(), "cannot write manifest in " + dir.string());

  mf << "stsn-dataset 1\n";
  mf << "clips " << clips.size() << "\n";
  mf << "frames " << clips[0].length() << "\n";
  mf << "height " << clips[0].height() << "\n";
  mf << "width " << clips[0].width() << "\n";
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const Clip& c = clips[i];
    char name[32];
    std::snprintf(name, sizeof(name), "clip_%04zu.stsn", i);
    write_tensor_file(dir / name, c.frames);
    mf << "clip " << i << "\n";
    mf << "file " << name << "\n";
    mf << "frames " << c.length() << "\n";
    mf << "degraded ";
    for (int t = 0; t < c.length(); ++t) mf << (t ? "," : "") << (c.degraded[t] ? 1 : 0);
    mf << "\n";
    for (int t = 0; t < c.length(); ++t) {
      for (const GtBox& b : c.boxes[t]) {
        mf << "box " << t << "," << b.class_id << "," << format_real(b.x1) << ","
           << format_real(b.y1) << "," << format_real(b.x2) << "," << format_real(b.y2) << "\n";
      }
    }
    for (std::size_t t = 0; t < c.motion.size(); ++t) {
      for (std::size_t o = 0; o < c.motion[t].size(); ++o) {
        mf << "motion " << t << "," << o << "," << format_real(c.motion[t][o].dy) << ","
           << format_real(c.motion[t][o].dx) << "\n";
      }
    }
    mf << "end\n";
  }
  require(mf.good(), "manifest write failed");
}

std::vector<Clip> read_dataset(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest");
  if (!mf.good()) throw std::runtime_error("missing manifest in " + dir.string());

  auto fail = [&](const std::string& why) -> void {
    throw std::runtime_error("malformed manifest: " + why);
  };

  std::string line;
  auto next_line = [&]() -> bool {
    while (std::getline(mf, line)) {
      if (!line.empty()) return true;
    }
    return false;
  };

  if (!next_line() || line != "stsn-dataset 1") fail("bad header");
  std::size_t clip_count = 0;
  int frames = 0, height = 0, width = 0;
  for (const char* key : {"clips", "frames", "height", "width"}) {
    if (!next_line()) fail("truncated header");
    std::istringstream ss(line);
    std::string k;
    long v = 0;
    ss >> k >> v;
    if (k != key || v <= 0) fail("bad header field " + std::string(key));
    if (std::string(key) == "clips") clip_count = static_cast<std::size_t>(v);
    if (std::string(key) == "frames") frames = static_cast<int>(v);
    if (std::string(key) == "height") height = static_cast<int>(v);
    if (std::string(key) == "width") width = static_cast<int>(v);
  }

  std::vector<Clip> clips;
  for (std::size_t i = 0; i < clip_count; ++i) {
    if (!next_line() || line != "clip " + std::to_string(i)) fail("expected clip " + std::to_string(i));
    if (!next_line() || line.rfind("file ", 0) != 0) fail("expected file line");
    const std::string file = line.substr(5);
    if (!next_line() || line.rfind("frames ", 0) != 0) fail("expected frames line");
    const int T = static_cast<int>(parse_real(line.substr(7)));
    if (T != frames) fail("clip frame count mismatch");
    if (!next_line() || line.rfind("degraded ", 0) != 0) fail("expected degraded line");

    Clip c;
    c.frames = read_tensor_file(dir / file);
    if (c.frames.dims() != std::vector<int>{T, 1, height, width}) {
      throw std::runtime_error("tensor dims disagree with manifest: " + file);
    }
    for (const std::string& f : split(line.substr(9), ',')) {
      if (f != "0" && f != "1") fail("bad degraded flag");
      c.degraded.push_back(f == "1");
    }
    if (static_cast<int>(c.degraded.size()) != T) fail("degraded flag count mismatch");

    c.boxes.assign(T, {});
    c.motion.assign(T > 1 ? T - 1 : 0, {});
    while (next_line() && line != "end") {
      if (line.rfind("box ", 0) == 0) {
        auto f = split(line.substr(4), ',');
        if (f.size() != 6) fail("bad box row");
        const int t = static_cast<int>(parse_real(f[0]));
        if (t < 0 || t >= T) fail("box frame index out of range");
        c.boxes[t].push_back({static_cast<int>(parse_real(f[1])), parse_real(f[2]),
                              parse_real(f[3]), parse_real(f[4]), parse_real(f[5])});
      } else if (line.rfind("motion ", 0) == 0) {
        auto f = split(line.substr(7), ',');
        if (f.size() != 4) fail("bad motion row");
        const int t = static_cast<int>(parse_real(f[0]));
        const std::size_t o = static_cast<std::size_t>(parse_real(f[1]));
        if (t < 0 || t >= T - 1) fail("motion frame index out of range");
        if (c.motion[t].size() != o) fail("motion rows out of order");
        c.motion[t].push_back({parse_real(f[2]), parse_real(f[3])});
      } else {
        fail("unknown record: " + line);
      }
    }
    if (line != "end") fail("missing end marker");
    clips.push_back(std::move(c));
  }
  return clips;
}

}  // namespace stsn
