#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "worldtrack/error.hpp"
#include "worldtrack/geometry.hpp"
#include "worldtrack/losses.hpp"
#include "worldtrack/oracle.hpp"

namespace worldtrack {

inline constexpr const char* kSequenceVersion = "worldtrack-seq/1";
inline constexpr const char* kManifestName = "manifest.json";

namespace io {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

/// Writes through a sibling temp file and renames it into place.
inline void write_atomic(const fs::path& path, const std::string& bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::Io, "write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::Io, "cannot rename " + tmp.string() + ": " + ec.message());
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline void append_f32(std::string& buf, double v) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  for (int b = 0; b < 4; ++b) buf.push_back(static_cast<char>((bits >> (8 * b)) & 0xFFu));
}

inline double f32_at(const std::string& buf, std::size_t index) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b)
    bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[4 * index + static_cast<std::size_t>(b)])) << (8 * b);
  return static_cast<double>(std::bit_cast<float>(bits));
}

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct Array {
  std::string role;
  std::vector<std::size_t> shape;
  std::string data;
};

inline std::size_t element_count(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline Array pointmaps_array(const char* role, const std::vector<Pointmap>& maps, int w, int h) {
  Array a{role, {maps.size(), static_cast<std::size_t>(h), static_cast<std::size_t>(w), 3}, {}};
  a.data.reserve(4 * element_count(a.shape));
  for (const auto& pm : maps)
    for (std::size_t i = 0; i < pm.size(); ++i)
      for (int c = 0; c < 3; ++c) append_f32(a.data, pm.valid(i) ? pm.point(i)(c) : kNaN);
  return a;
}

inline ordered_json corruption_json(const std::optional<CorruptionRecord>& rec) {
  if (!rec) return nullptr;
  ordered_json j;
  j["noise_std"] = rec->noise_std;
  j["drift_per_frame"] = rec->drift_per_frame;
  j["drift_direction"] = {rec->drift_direction.x(), rec->drift_direction.y(), rec->drift_direction.z()};
  j["seed"] = rec->seed;
  j["recon"] = rec->recon;
  return j;
}

inline std::optional<CorruptionRecord> corruption_from_json(const ordered_json& j) {
  if (j.is_null()) return std::nullopt;
  CorruptionRecord rec;
  rec.noise_std = j.at("noise_std").get<double>();
  rec.drift_per_frame = j.at("drift_per_frame").get<double>();
  const auto& d = j.at("drift_direction");
  rec.drift_direction = Vec3(d.at(0).get<double>(), d.at(1).get<double>(), d.at(2).get<double>());
  rec.seed = j.at("seed").get<std::uint64_t>();
  rec.recon = j.at("recon").get<bool>();
  return rec;
}

}  // namespace io

/// Writes `seq` into `dir` as a JSON manifest plus one raw little-endian f32
/// file per role. Invalid points and unset 3D track positions are stored as NaN.
inline std::filesystem::path write_sequence(const RenderedSequence& seq, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::Io, "cannot create " + dir.string() + ": " + ec.message());

  const std::size_t frames = seq.num_frames();
  const auto h = static_cast<std::size_t>(seq.height), w = static_cast<std::size_t>(seq.width);
  const std::size_t n_tracks = seq.tracks2d.num_points();
  if (seq.tracking_pointmaps.size() != frames || seq.recon_pointmaps.size() != frames || seq.depth.size() != frames)
    throw Error(ErrorCode::ShapeMismatch, "sequence arrays disagree on the number of frames");
  if (seq.tracks3d_world.num_points() != n_tracks)
    throw Error(ErrorCode::ShapeMismatch, "2D and 3D tracks disagree on the number of points");

  std::vector<io::Array> arrays;
  arrays.push_back(io::pointmaps_array("tracking_pointmaps", seq.tracking_pointmaps, seq.width, seq.height));
  arrays.push_back(io::pointmaps_array("recon_pointmaps", seq.recon_pointmaps, seq.width, seq.height));

  io::Array depth{"depth", {frames, h, w}, {}};
  for (const auto& d : seq.depth)
    for (std::size_t i = 0; i < d.size(); ++i) io::append_f32(depth.data, d.valid[i] ? d.depth[i] : 0.0);
  arrays.push_back(std::move(depth));

  io::Array t2{"tracks2d", {n_tracks, frames, 2}, {}};
  io::Array vis{"visibility", {n_tracks, frames}, {}};
  io::Array t3{"tracks3d", {n_tracks, frames, 3}, {}};
  for (std::size_t n = 0; n < n_tracks; ++n)
    for (std::size_t t = 0; t < frames; ++t) {
      io::append_f32(t2.data, seq.tracks2d.at(n, t).x());
      io::append_f32(t2.data, seq.tracks2d.at(n, t).y());
      io::append_f32(vis.data, seq.tracks2d.visible(n, t) ? 1.0 : 0.0);
      const bool valid3 = seq.tracks3d_world.visible(n, t);
      for (int c = 0; c < 3; ++c) io::append_f32(t3.data, valid3 ? seq.tracks3d_world.at(n, t)(c) : io::kNaN);
    }
  arrays.push_back(std::move(t2));
  arrays.push_back(std::move(t3));
  arrays.push_back(std::move(vis));

  io::Array dyn{"dynamic_mask", {n_tracks}, {}};
  for (std::size_t n = 0; n < n_tracks; ++n) io::append_f32(dyn.data, seq.tracks3d_world.dynamic(n) ? 1.0 : 0.0);
  arrays.push_back(std::move(dyn));

  io::Array intr{"intrinsics", {3}, {}};
  io::append_f32(intr.data, seq.intrinsics.focal);
  io::append_f32(intr.data, seq.intrinsics.cx);
  io::append_f32(intr.data, seq.intrinsics.cy);
  arrays.push_back(std::move(intr));

  io::Array cams{"cameras", {frames, 3, 4}, {}};
  for (const auto& pose : seq.cameras)
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) io::append_f32(cams.data, pose.rotation(r, c));
      io::append_f32(cams.data, pose.translation(r));
    }
  arrays.push_back(std::move(cams));

  io::ordered_json manifest;
  manifest["version"] = kSequenceVersion;
  manifest["width"] = seq.width;
  manifest["height"] = seq.height;
  manifest["num_frames"] = frames;
  io::ordered_json entries = io::ordered_json::object();
  for (const auto& a : arrays) {
    const std::string file = a.role + ".f32";
    io::write_atomic(dir / file, a.data);
    entries[a.role] = {{"path", file}, {"dtype", "f32"}, {"shape", a.shape}};
  }
  manifest["arrays"] = entries;
  manifest["meta"] = {{"preset", seq.preset}, {"seed", seq.seed}, {"corruption", io::corruption_json(seq.corruption)}};
  const fs::path path = dir / kManifestName;
  io::write_atomic(path, manifest.dump(2) + "\n");
  return path;
}

/// Accepts either a sequence directory or its manifest file.
inline RenderedSequence read_sequence(const std::filesystem::path& location) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = fs::is_directory(location) ? location / kManifestName : location;
  const fs::path dir = manifest_path.parent_path();
  io::ordered_json m;
  try {
    m = io::ordered_json::parse(io::read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Format, "malformed manifest " + manifest_path.string() + ": " + e.what());
  }

  RenderedSequence seq;
  std::size_t frames = 0, n_tracks = 0;
  auto load = [&](const std::string& role, std::vector<std::size_t> expected) {
    const auto& entry = m.at("arrays").at(role);
    if (entry.at("dtype").get<std::string>() != "f32") throw Error(ErrorCode::Format, role + " must be f32");
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    if (shape != expected) throw Error(ErrorCode::Format, role + " has an unexpected shape");
    const fs::path file = entry.at("path").get<std::string>();
    if (file.is_absolute() || file.filename() != file) throw Error(ErrorCode::Format, role + " path must be a bare file name");
    std::string bytes = io::read_file(dir / file);
    if (bytes.size() != 4 * io::element_count(shape))
      throw Error(ErrorCode::Format, role + " byte length does not match its shape");
    return bytes;
  };

  try {
    if (m.at("version").get<std::string>() != kSequenceVersion)
      throw Error(ErrorCode::Format, "unsupported sequence version");
    seq.width = m.at("width").get<int>();
    seq.height = m.at("height").get<int>();
    frames = m.at("num_frames").get<std::size_t>();
    if (seq.width <= 0 || seq.height <= 0 || frames == 0) throw Error(ErrorCode::Format, "empty sequence");
    n_tracks = m.at("arrays").at("tracks2d").at("shape").at(0).get<std::size_t>();
    const auto& meta = m.at("meta");
    seq.preset = meta.at("preset").get<std::string>();
    seq.seed = meta.at("seed").get<std::uint64_t>();
    seq.corruption = io::corruption_from_json(meta.at("corruption"));

    const auto h = static_cast<std::size_t>(seq.height), w = static_cast<std::size_t>(seq.width);
    const std::size_t pixels = h * w;

    auto read_maps = [&](const std::string& role, bool tracking) {
      const std::string bytes = load(role, {frames, h, w, 3});
      std::vector<Pointmap> maps;
      maps.reserve(frames);
      for (std::size_t j = 0; j < frames; ++j) {
        const auto fj = static_cast<FrameId>(j);
        Pointmap pm(seq.width, seq.height, tracking ? tracking_tag(fj) : recon_tag(fj));
        for (std::size_t i = 0; i < pixels; ++i) {
          const std::size_t base = 3 * (j * pixels + i);
          const Vec3 p(io::f32_at(bytes, base), io::f32_at(bytes, base + 1), io::f32_at(bytes, base + 2));
          if (p.allFinite()) pm.set(i, p);
        }
        maps.push_back(std::move(pm));
      }
      return maps;
    };
    seq.tracking_pointmaps = read_maps("tracking_pointmaps", true);
    seq.recon_pointmaps = read_maps("recon_pointmaps", false);

    const std::string depth = load("depth", {frames, h, w});
    for (std::size_t j = 0; j < frames; ++j) {
      DepthMap d(seq.width, seq.height);
      for (std::size_t i = 0; i < pixels; ++i) {
        const double z = io::f32_at(depth, j * pixels + i);
        if (z > 0.0 && std::isfinite(z)) d.set(i, z);
      }
      seq.depth.push_back(std::move(d));
    }

    const std::string t2 = load("tracks2d", {n_tracks, frames, 2});
    const std::string t3 = load("tracks3d", {n_tracks, frames, 3});
    const std::string vis = load("visibility", {n_tracks, frames});
    const std::string dyn = load("dynamic_mask", {n_tracks});
    seq.tracks2d = TrackSet2(n_tracks, frames);
    seq.tracks3d_world = TrackSet3(n_tracks, frames);
    for (std::size_t n = 0; n < n_tracks; ++n) {
      const bool dynamic = io::f32_at(dyn, n) != 0.0;
      seq.tracks2d.set_dynamic(n, dynamic);
      seq.tracks3d_world.set_dynamic(n, dynamic);
      for (std::size_t t = 0; t < frames; ++t) {
        const std::size_t k = n * frames + t;
        seq.tracks2d.at(n, t) = Vec2(io::f32_at(t2, 2 * k), io::f32_at(t2, 2 * k + 1));
        seq.tracks2d.set_visible(n, t, io::f32_at(vis, k) != 0.0);
        const Vec3 p(io::f32_at(t3, 3 * k), io::f32_at(t3, 3 * k + 1), io::f32_at(t3, 3 * k + 2));
        if (p.allFinite()) {
          seq.tracks3d_world.at(n, t) = p;
          seq.tracks3d_world.set_visible(n, t, true);
        }
      }
    }

    const std::string intr = load("intrinsics", {3});
    seq.intrinsics = {io::f32_at(intr, 0), io::f32_at(intr, 1), io::f32_at(intr, 2)};
    const std::string cams = load("cameras", {frames, 3, 4});
    for (std::size_t j = 0; j < frames; ++j) {
      PoseSE3 pose;
      for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) pose.rotation(r, c) = io::f32_at(cams, 12 * j + 4 * static_cast<std::size_t>(r) + static_cast<std::size_t>(c));
        pose.translation(r) = io::f32_at(cams, 12 * j + 4 * static_cast<std::size_t>(r) + 3);
      }
      seq.cameras.push_back(pose);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Format, "malformed manifest " + manifest_path.string() + ": " + e.what());
  }

  const PixelGrid grid = seq.grid();
  for (std::size_t n = 0; n < n_tracks; ++n) {
    const auto q = grid.containing(seq.tracks2d.at(n, 0));
    if (!q) throw Error(ErrorCode::QueryOutOfBounds, "track " + std::to_string(n) + " starts outside the image");
    seq.queries.push_back(*q);
  }
  return seq;
}

}  // namespace worldtrack
