// SPDX-License-Identifier: Apache-2.0
//
// Scene and asset I/O: 3DGS-convention binary PLY checkpoints, an OBJ subset
// for inserted meshes, 8-bit PNG images (sRGB at the boundary, zlib-backed),
// camera JSON files, the COLMAP text convention, and composition specs.

#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include "gtrace/camera.hpp"
#include "gtrace/image.hpp"
#include "gtrace/particle.hpp"
#include "gtrace/tracer.hpp"

#include "json.hpp"

namespace gtrace {

using json = nlohmann::json;

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// PLY checkpoints (3DGS convention)
//
// Property order is bit-for-bit the 3DGS checkpoint layout: x y z nx ny nz
// f_dc_0..2 f_rest_0..44 opacity scale_0..2 rot_0..3, all float32,
// binary_little_endian. Activations are applied on load (exp scale, sigmoid
// opacity, normalize quaternion) and inverted on save, in double precision.

namespace detail {

inline const std::vector<std::string>& gs_ply_properties() {
  static const std::vector<std::string> props = [] {
    std::vector<std::string> p = {"x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"};
    for (int i = 0; i < 45; ++i) p.push_back("f_rest_" + std::to_string(i));
    p.push_back("opacity");
    for (int i = 0; i < 3; ++i) p.push_back("scale_" + std::to_string(i));
    for (int i = 0; i < 4; ++i) p.push_back("rot_" + std::to_string(i));
    return p;
  }();
  return props;
}

inline void write_le_float(std::string& out, float v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

}  // namespace detail

inline void save_ply(const Scene& scene, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("save_ply: cannot open '" + path + "'");
  std::ostringstream header;
  header << "ply\nformat binary_little_endian 1.0\nelement vertex " << scene.size() << "\n";
  for (const auto& prop : detail::gs_ply_properties()) header << "property float " << prop << "\n";
  header << "end_header\n";
  f << header.str();

  std::string row;
  for (const Particle& p : scene) {
    row.clear();
    detail::write_le_float(row, p.mu.x);
    detail::write_le_float(row, p.mu.y);
    detail::write_le_float(row, p.mu.z);
    for (int i = 0; i < 3; ++i) detail::write_le_float(row, 0.0f);  // normals, unused
    for (int c = 0; c < 3; ++c) detail::write_le_float(row, p.sh[c * kShCoeffs]);
    for (int c = 0; c < 3; ++c)
      for (int i = 1; i < kShCoeffs; ++i) detail::write_le_float(row, p.sh[c * kShCoeffs + i]);
    const double sigma = clamp(double(p.opacity), 1e-12, 1.0 - 1e-7);
    detail::write_le_float(row, float(std::log(sigma / (1.0 - sigma))));
    for (int i = 0; i < 3; ++i)
      detail::write_le_float(row, float(std::log(std::max(double(p.scale[i]), 1e-12))));
    for (int i = 0; i < 4; ++i) detail::write_le_float(row, p.quat[i]);
    f.write(row.data(), std::streamsize(row.size()));
  }
  if (!f) throw IoError("save_ply: write failed for '" + path + "'");
}

inline Scene load_ply(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_ply: cannot open '" + path + "'");

  std::string line;
  size_t header_bytes = 0;
  size_t vertex_count = 0;
  bool binary_le = false;
  std::vector<std::string> props;
  bool in_vertex_element = false;
  if (!std::getline(f, line) || line.substr(0, 3) != "ply")
    throw IoError("load_ply: '" + path + "' is not a PLY file (missing magic at byte 0)");
  header_bytes += line.size() + 1;
  while (std::getline(f, line)) {
    header_bytes += line.size() + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ss(line);
    std::string tok;
    ss >> tok;
    if (tok == "format") {
      std::string fmt;
      ss >> fmt;
      binary_le = fmt == "binary_little_endian";
      if (!binary_le)
        throw IoError("load_ply: unsupported encoding '" + fmt +
                      "' (binary_little_endian required) at byte " +
                      std::to_string(header_bytes - line.size() - 1));
    } else if (tok == "element") {
      std::string name;
      ss >> name >> vertex_count;
      in_vertex_element = name == "vertex";
      if (!in_vertex_element)
        throw IoError("load_ply: unsupported element '" + name + "'");
    } else if (tok == "property" && in_vertex_element) {
      std::string type, name;
      ss >> type >> name;
      if (type != "float")
        throw IoError("load_ply: property '" + name + "' has unsupported type '" + type + "'");
      props.push_back(name);
    } else if (tok == "end_header") {
      break;
    }
  }

  std::map<std::string, int> index;
  for (size_t i = 0; i < props.size(); ++i) index[props[i]] = int(i);
  for (const char* required : {"x", "y", "z", "f_dc_0", "opacity", "scale_0", "rot_0"})
    if (!index.count(required))
      throw IoError("load_ply: missing required property '" + std::string(required) + "'");

  const size_t stride = props.size() * 4;
  std::vector<float> row(props.size());
  auto get = [&](const char* name, float fallback) {
    auto it = index.find(name);
    return it == index.end() ? fallback : row[size_t(it->second)];
  };

  Scene scene;
  scene.reserve(vertex_count);
  for (size_t v = 0; v < vertex_count; ++v) {
    f.read(reinterpret_cast<char*>(row.data()), std::streamsize(stride));
    if (size_t(f.gcount()) != stride)
      throw IoError("load_ply: truncated file '" + path + "': expected " +
                    std::to_string(vertex_count) + " vertices, got " + std::to_string(v) +
                    " (failed at byte " + std::to_string(header_bytes + v * stride) + ")");
    Particle p;
    p.mu = {get("x", 0), get("y", 0), get("z", 0)};
    for (int c = 0; c < 3; ++c)
      p.sh[c * kShCoeffs] = get(("f_dc_" + std::to_string(c)).c_str(), 0);
    for (int c = 0; c < 3; ++c)
      for (int i = 1; i < kShCoeffs; ++i)
        p.sh[c * kShCoeffs + i] = get(("f_rest_" + std::to_string(c * 15 + i - 1)).c_str(), 0);
    p.opacity = float(1.0 / (1.0 + std::exp(-double(get("opacity", 0)))));
    for (int i = 0; i < 3; ++i)
      p.scale[i] = float(std::exp(double(get(("scale_" + std::to_string(i)).c_str(), 0))));
    Vec4f q{get("rot_0", 1), get("rot_1", 0), get("rot_2", 0), get("rot_3", 0)};
    const float n2 = dot(q, q);
    if (n2 <= 0)
      q = {1, 0, 0, 0};
    else if (std::abs(n2 - 1.0f) > 1e-6f)
      q = normalize(q);
    p.quat = q;
    scene.push_back(p);
  }
  return scene;
}

// ---------------------------------------------------------------------------
// OBJ subset: v and f records, n-gon faces triangulated as fans.

struct TriangleMesh {
  std::vector<Vec3f> vertices;
  std::vector<std::array<uint32_t, 3>> triangles;
};

inline TriangleMesh load_obj(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("load_obj: cannot open '" + path + "'");
  TriangleMesh mesh;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ss(line);
    std::string tok;
    if (!(ss >> tok) || tok[0] == '#') continue;
    if (tok == "v") {
      Vec3f v;
      if (!(ss >> v.x >> v.y >> v.z))
        throw IoError("load_obj: malformed vertex at " + path + ":" + std::to_string(line_no));
      mesh.vertices.push_back(v);
    } else if (tok == "f") {
      std::vector<uint32_t> idx;
      std::string ref;
      while (ss >> ref) {
        const std::string first = ref.substr(0, ref.find('/'));
        long i = 0;
        try {
          i = std::stol(first);
        } catch (...) {
          throw IoError("load_obj: malformed face index '" + ref + "' at " + path + ":" +
                        std::to_string(line_no));
        }
        if (i < 0) i = long(mesh.vertices.size()) + i + 1;
        if (i < 1 || size_t(i) > mesh.vertices.size())
          throw IoError("load_obj: face index " + first + " out of range at " + path + ":" +
                        std::to_string(line_no));
        idx.push_back(uint32_t(i - 1));
      }
      if (idx.size() < 3)
        throw IoError("load_obj: face with fewer than 3 vertices at " + path + ":" +
                      std::to_string(line_no));
      for (size_t k = 1; k + 1 < idx.size(); ++k)
        mesh.triangles.push_back({idx[0], idx[k], idx[k + 1]});
    }
    // everything else (vt, vn, usemtl, o, g, s, mtllib) is ignored
  }
  return mesh;
}

// ---------------------------------------------------------------------------
// PNG (8-bit RGB, sRGB transfer at the boundary)

namespace detail {

inline void put_be32(std::string& s, uint32_t v) {
  s.push_back(char(v >> 24));
  s.push_back(char(v >> 16));
  s.push_back(char(v >> 8));
  s.push_back(char(v));
}

inline uint32_t get_be32(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

inline void png_chunk(std::string& out, const char type[4], const std::string& data) {
  put_be32(out, uint32_t(data.size()));
  const size_t start = out.size();
  out.append(type, 4);
  out.append(data);
  const uint32_t crc = uint32_t(
      crc32(0, reinterpret_cast<const Bytef*>(out.data() + start), uInt(out.size() - start)));
  put_be32(out, crc);
}

inline std::string zlib_compress(const std::string& raw) {
  uLongf bound = compressBound(uLong(raw.size()));
  std::string out(bound, '\0');
  if (compress2(reinterpret_cast<Bytef*>(out.data()), &bound,
                reinterpret_cast<const Bytef*>(raw.data()), uLong(raw.size()), 6) != Z_OK)
    throw IoError("png: zlib compression failed");
  out.resize(bound);
  return out;
}

inline std::string zlib_decompress(const std::string& comp, size_t expected) {
  std::string out(expected, '\0');
  uLongf len = uLongf(expected);
  const int rc = uncompress(reinterpret_cast<Bytef*>(out.data()), &len,
                            reinterpret_cast<const Bytef*>(comp.data()), uLong(comp.size()));
  if (rc != Z_OK) throw IoError("png: zlib decompression failed (code " + std::to_string(rc) + ")");
  out.resize(len);
  return out;
}

}  // namespace detail

// Writes linear radiance as an 8-bit sRGB PNG; out-of-range values clamp.
inline void write_image(const Image& img, const std::string& path) {
  const size_t row_bytes = size_t(img.width) * 3;
  std::string raw;
  raw.reserve((row_bytes + 1) * size_t(img.height));
  for (int y = 0; y < img.height; ++y) {
    raw.push_back('\0');  // filter type none
    for (int x = 0; x < img.width; ++x) {
      const Vec3f& c = img.at(x, y);
      for (int ch = 0; ch < 3; ++ch) raw.push_back(char(quantize8(linear_to_srgb(c[ch]))));
    }
  }
  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  detail::put_be32(ihdr, uint32_t(img.width));
  detail::put_be32(ihdr, uint32_t(img.height));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type RGB
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // no interlace
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", detail::zlib_compress(raw));
  detail::png_chunk(out, "IEND", "");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_image: cannot open '" + path + "'");
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw IoError("write_image: write failed for '" + path + "'");
}

// Reads an 8-bit PNG (gray, RGB, or RGBA) and linearizes from sRGB.
inline Image read_image(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_image: cannot open '" + path + "'");
  std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (data.size() < 8 || std::memcmp(data.data(), "\x89PNG\r\n\x1a\n", 8) != 0)
    throw IoError("read_image: '" + path + "' is not a PNG file");
  const uint8_t* p = reinterpret_cast<const uint8_t*>(data.data());
  size_t pos = 8;
  int width = 0, height = 0, bit_depth = 0, color_type = 0, interlace = 0;
  std::string idat;
  while (pos + 8 <= data.size()) {
    const uint32_t len = detail::get_be32(p + pos);
    const std::string type(data.substr(pos + 4, 4));
    if (pos + 12 + len > data.size()) throw IoError("read_image: truncated chunk in '" + path + "'");
    const uint8_t* chunk = p + pos + 8;
    if (type == "IHDR") {
      width = int(detail::get_be32(chunk));
      height = int(detail::get_be32(chunk + 4));
      bit_depth = chunk[8];
      color_type = chunk[9];
      interlace = chunk[12];
      if (bit_depth == 16)
        throw IoError("read_image: '" + path + "' is a 16-bit PNG; only 8-bit input is supported");
      if (bit_depth != 8 || (color_type != 0 && color_type != 2 && color_type != 6))
        throw IoError("read_image: unsupported PNG format (bit depth " +
                      std::to_string(bit_depth) + ", color type " + std::to_string(color_type) +
                      ") in '" + path + "'");
      if (interlace != 0) throw IoError("read_image: interlaced PNG not supported: '" + path + "'");
    } else if (type == "IDAT") {
      idat.append(reinterpret_cast<const char*>(chunk), len);
    } else if (type == "IEND") {
      break;
    }
    pos += 12 + len;
  }
  if (width <= 0 || height <= 0) throw IoError("read_image: missing IHDR in '" + path + "'");
  const int channels = color_type == 2 ? 3 : (color_type == 6 ? 4 : 1);
  const size_t row_bytes = size_t(width) * size_t(channels);
  const std::string raw = detail::zlib_decompress(idat, (row_bytes + 1) * size_t(height));
  if (raw.size() != (row_bytes + 1) * size_t(height))
    throw IoError("read_image: decompressed size mismatch in '" + path + "'");

  // undo per-row filters
  std::vector<uint8_t> img_bytes(row_bytes * size_t(height));
  const int bpp = channels;
  for (int y = 0; y < height; ++y) {
    const uint8_t* src = reinterpret_cast<const uint8_t*>(raw.data()) + size_t(y) * (row_bytes + 1);
    const uint8_t filter = src[0];
    uint8_t* dst = img_bytes.data() + size_t(y) * row_bytes;
    const uint8_t* prev = y > 0 ? img_bytes.data() + size_t(y - 1) * row_bytes : nullptr;
    for (size_t x = 0; x < row_bytes; ++x) {
      const int a = x >= size_t(bpp) ? dst[x - size_t(bpp)] : 0;
      const int b = prev ? prev[x] : 0;
      const int c = (prev && x >= size_t(bpp)) ? prev[x - size_t(bpp)] : 0;
      int v = src[1 + x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: {
          const int pp = a + b - c;
          const int pa = std::abs(pp - a), pb = std::abs(pp - b), pc = std::abs(pp - c);
          v += (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
          break;
        }
        default: throw IoError("read_image: unknown PNG filter in '" + path + "'");
      }
      dst[x] = uint8_t(v);
    }
  }

  Image img(width, height);
  for (int y = 0; y < height; ++y) {
    const uint8_t* row = img_bytes.data() + size_t(y) * row_bytes;
    for (int x = 0; x < width; ++x) {
      Vec3f c;
      if (channels == 1) {
        const float g = srgb_to_linear(row[x] / 255.0f);
        c = {g, g, g};
      } else {
        c = {srgb_to_linear(row[size_t(x) * size_t(channels)] / 255.0f),
             srgb_to_linear(row[size_t(x) * size_t(channels) + 1] / 255.0f),
             srgb_to_linear(row[size_t(x) * size_t(channels) + 2] / 255.0f)};
      }
      img.at(x, y) = c;
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Camera JSON schema and the COLMAP text convention

inline Vec3f json_vec3(const json& j) { return {j.at(0), j.at(1), j.at(2)}; }
inline Vec4f json_vec4(const json& j) { return {j.at(0), j.at(1), j.at(2), j.at(3)}; }

inline CameraModel camera_from_json(const json& j) {
  CameraModel cam;
  cam.fx = j.at("fx");
  cam.fy = j.at("fy");
  cam.cx = j.at("cx");
  cam.cy = j.at("cy");
  cam.width = j.at("width");
  cam.height = j.at("height");
  if (j.contains("distortion")) {
    const json& d = j["distortion"];
    const std::string type = d.value("type", "none");
    if (type == "none")
      cam.distortion = DistortionType::None;
    else if (type == "opencv_fisheye")
      cam.distortion = DistortionType::OpenCvFisheye;
    else if (type == "opencv_pinhole")
      cam.distortion = DistortionType::OpenCvPinhole;
    else
      throw IoError("camera: unknown distortion type '" + type + "'");
    if (d.contains("params"))
      for (size_t i = 0; i < d["params"].size() && i < 5; ++i)
        cam.dist_params[i] = d["params"][i];
  }
  auto read_pose = [](const json& pj) {
    Pose pose;
    pose.q = normalize(json_vec4(pj.at("q")));
    pose.t = json_vec3(pj.at("t"));
    return pose;
  };
  if (j.contains("pose0")) cam.pose0 = read_pose(j["pose0"]);
  cam.pose1 = j.contains("pose1") ? read_pose(j["pose1"]) : cam.pose0;
  const std::string shutter = j.value("shutter", "global");
  if (shutter == "global")
    cam.shutter = ShutterType::Global;
  else if (shutter == "rolling_top_to_bottom")
    cam.shutter = ShutterType::RollingTopToBottom;
  else if (shutter == "rolling_left_to_right")
    cam.shutter = ShutterType::RollingLeftToRight;
  else
    throw IoError("camera: unknown shutter '" + shutter + "'");
  if (j.contains("lens")) {
    cam.aperture_radius = j["lens"].value("aperture_radius", 0.0f);
    cam.focus_distance = j["lens"].value("focus_distance", 1.0f);
  }
  return cam;
}

inline json camera_to_json(const CameraModel& cam) {
  json j;
  j["fx"] = cam.fx;
  j["fy"] = cam.fy;
  j["cx"] = cam.cx;
  j["cy"] = cam.cy;
  j["width"] = cam.width;
  j["height"] = cam.height;
  const char* dist =
      cam.distortion == DistortionType::None
          ? "none"
          : (cam.distortion == DistortionType::OpenCvFisheye ? "opencv_fisheye"
                                                             : "opencv_pinhole");
  j["distortion"] = {{"type", dist},
                     {"params", {cam.dist_params[0], cam.dist_params[1], cam.dist_params[2],
                                 cam.dist_params[3], cam.dist_params[4]}}};
  auto pose_json = [](const Pose& p) {
    return json{{"q", {p.q.x, p.q.y, p.q.z, p.q.w}}, {"t", {p.t.x, p.t.y, p.t.z}}};
  };
  j["pose0"] = pose_json(cam.pose0);
  j["pose1"] = pose_json(cam.pose1);
  j["shutter"] = cam.shutter == ShutterType::Global
                     ? "global"
                     : (cam.shutter == ShutterType::RollingTopToBottom ? "rolling_top_to_bottom"
                                                                       : "rolling_left_to_right");
  if (cam.aperture_radius > 0)
    j["lens"] = {{"aperture_radius", cam.aperture_radius},
                 {"focus_distance", cam.focus_distance}};
  return j;
}

inline CameraModel load_camera(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("load_camera: cannot open '" + path + "'");
  json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw IoError("load_camera: JSON parse error in '" + path + "': " + e.what());
  }
  return camera_from_json(j);
}

inline void save_camera(const CameraModel& cam, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("save_camera: cannot open '" + path + "'");
  f << camera_to_json(cam).dump(2) << "\n";
}

// COLMAP text model: cameras.txt + images.txt. Returns camera-to-world poses.
struct ColmapView {
  CameraModel camera;
  std::string image_name;
};

inline std::vector<ColmapView> load_colmap_text(const std::string& cameras_txt,
                                                const std::string& images_txt) {
  std::ifstream cf(cameras_txt);
  if (!cf) throw IoError("load_colmap_text: cannot open '" + cameras_txt + "'");
  std::map<int, CameraModel> cams;
  std::string line;
  while (std::getline(cf, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    int id, w, h;
    std::string model;
    ss >> id >> model >> w >> h;
    CameraModel cam;
    cam.width = w;
    cam.height = h;
    std::vector<double> par;
    double v;
    while (ss >> v) par.push_back(v);
    auto need = [&](size_t n) {
      if (par.size() < n)
        throw IoError("load_colmap_text: camera model " + model + " expects " +
                      std::to_string(n) + " params");
    };
    if (model == "PINHOLE") {
      need(4);
      cam.fx = float(par[0]);
      cam.fy = float(par[1]);
      cam.cx = float(par[2]);
      cam.cy = float(par[3]);
    } else if (model == "SIMPLE_PINHOLE") {
      need(3);
      cam.fx = cam.fy = float(par[0]);
      cam.cx = float(par[1]);
      cam.cy = float(par[2]);
    } else if (model == "OPENCV") {
      need(8);
      cam.fx = float(par[0]);
      cam.fy = float(par[1]);
      cam.cx = float(par[2]);
      cam.cy = float(par[3]);
      cam.distortion = DistortionType::OpenCvPinhole;
      for (int i = 0; i < 4; ++i) cam.dist_params[size_t(i)] = par[size_t(4 + i)];
    } else if (model == "OPENCV_FISHEYE") {
      need(8);
      cam.fx = float(par[0]);
      cam.fy = float(par[1]);
      cam.cx = float(par[2]);
      cam.cy = float(par[3]);
      cam.distortion = DistortionType::OpenCvFisheye;
      for (int i = 0; i < 4; ++i) cam.dist_params[size_t(i)] = par[size_t(4 + i)];
    } else {
      throw IoError("load_colmap_text: unsupported camera model '" + model + "'");
    }
    cams[id] = cam;
  }

  std::ifstream imf(images_txt);
  if (!imf) throw IoError("load_colmap_text: cannot open '" + images_txt + "'");
  std::vector<ColmapView> views;
  bool expect_points = false;
  while (std::getline(imf, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (expect_points) {
      expect_points = false;  // the 2D point line is skipped
      continue;
    }
    std::istringstream ss(line);
    int image_id, cam_id;
    double qw, qx, qy, qz, tx, ty, tz;
    std::string name;
    if (!(ss >> image_id >> qw >> qx >> qy >> qz >> tx >> ty >> tz >> cam_id >> name))
      throw IoError("load_colmap_text: malformed image line: " + line);
    auto it = cams.find(cam_id);
    if (it == cams.end())
      throw IoError("load_colmap_text: image references unknown camera " +
                    std::to_string(cam_id));
    ColmapView view;
    view.camera = it->second;
    // COLMAP stores world->cam; invert to cam->world
    const Vec4f q_wc{float(qw), float(qx), float(qy), float(qz)};
    const Vec4f q_cw{q_wc.x, -q_wc.y, -q_wc.z, -q_wc.w};
    const Mat3f R_cw = quat_to_mat3(q_cw);
    view.camera.pose0.q = normalize(q_cw);
    view.camera.pose0.t = -(R_cw * Vec3f{float(tx), float(ty), float(tz)});
    view.camera.pose1 = view.camera.pose0;
    view.image_name = name;
    views.push_back(view);
    expect_points = true;
  }
  return views;
}

// ---------------------------------------------------------------------------
// Composition spec

struct ComposeInstance {
  Transformf xform;
  uint32_t scene_index = 0;
  bool has_crop = false;
  Aabbf crop;
};

struct ComposeSpec {
  std::vector<std::string> scene_paths;
  std::vector<ComposeInstance> instances;
  struct MeshEntry {
    std::string obj_path;
    MeshMaterial material;
  };
  std::vector<MeshEntry> meshes;
  std::vector<PointLight> lights;
  std::string camera_path;
  json settings_overrides;  // forwarded to the CLI settings parser
};

inline ComposeSpec load_compose_spec(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("load_compose_spec: cannot open '" + path + "'");
  json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw IoError("load_compose_spec: JSON parse error in '" + path + "': " + e.what());
  }
  ComposeSpec spec;
  if (j.contains("scene")) spec.scene_paths.push_back(j["scene"]);
  if (j.contains("scenes"))
    for (const auto& s : j["scenes"]) spec.scene_paths.push_back(s);
  if (spec.scene_paths.empty()) throw IoError("load_compose_spec: no 'scene' or 'scenes' given");
  if (j.contains("instances")) {
    for (const auto& ij : j["instances"]) {
      ComposeInstance inst;
      if (ij.contains("translation")) inst.xform.t = json_vec3(ij["translation"]);
      if (ij.contains("rotation")) inst.xform.q = normalize(json_vec4(ij["rotation"]));
      if (ij.contains("scale")) inst.xform.s = ij["scale"];
      inst.scene_index = ij.value("scene", 0u);
      if (inst.scene_index >= spec.scene_paths.size())
        throw IoError("load_compose_spec: instance references scene " +
                      std::to_string(inst.scene_index) + " but only " +
                      std::to_string(spec.scene_paths.size()) + " scenes are given");
      if (ij.contains("crop")) {
        inst.has_crop = true;
        inst.crop.lo = json_vec3(ij["crop"].at("lo"));
        inst.crop.hi = json_vec3(ij["crop"].at("hi"));
      }
      spec.instances.push_back(inst);
    }
  } else {
    spec.instances.push_back({});  // identity instance of scene 0
  }
  if (j.contains("meshes")) {
    for (const auto& mj : j["meshes"]) {
      ComposeSpec::MeshEntry entry;
      entry.obj_path = mj.at("obj");
      const json& mat = mj.value("material", json::object());
      const std::string type = mat.value("type", "diffuse");
      if (type == "mirror")
        entry.material.type = MeshMaterial::Type::Mirror;
      else if (type == "refract")
        entry.material.type = MeshMaterial::Type::Refract;
      else if (type == "diffuse")
        entry.material.type = MeshMaterial::Type::Diffuse;
      else
        throw IoError("load_compose_spec: unknown material type '" + type + "'");
      entry.material.ior = mat.value("ior", 1.5f);
      if (mat.contains("albedo")) entry.material.albedo = json_vec3(mat["albedo"]);
      spec.meshes.push_back(entry);
    }
  }
  if (j.contains("lights")) {
    for (const auto& lj : j["lights"]) {
      PointLight light;
      light.position = json_vec3(lj.at("position"));
      light.intensity = lj.value("intensity", 1.0f);
      spec.lights.push_back(light);
    }
  }
  if (j.contains("camera")) spec.camera_path = j["camera"];
  if (j.contains("settings")) spec.settings_overrides = j["settings"];
  return spec;
}

// ---------------------------------------------------------------------------
// Dataset directory: {cameras.json + images/} or COLMAP {sparse/0 + images/}

inline std::vector<TrainingView> load_dataset(const std::string& dir) {
  const std::string json_path = dir + "/cameras.json";
  std::vector<TrainingView> views;
  if (std::ifstream probe{json_path}) {
    json j;
    try {
      probe >> j;
    } catch (const std::exception& e) {
      throw IoError("load_dataset: JSON parse error in '" + json_path + "': " + e.what());
    }
    for (const auto& vj : j.at("views")) {
      TrainingView view;
      view.camera = camera_from_json(vj.at("camera"));
      view.image = read_image(dir + "/" + std::string(vj.at("image")));
      if (view.image.width != view.camera.width || view.image.height != view.camera.height)
        throw IoError("load_dataset: image size does not match camera resolution for '" +
                      std::string(vj.at("image")) + "'");
      views.push_back(std::move(view));
    }
    return views;
  }
  const std::string cameras_txt = dir + "/sparse/0/cameras.txt";
  const std::string images_txt = dir + "/sparse/0/images.txt";
  if (std::ifstream probe{cameras_txt}) {
    for (const ColmapView& cv : load_colmap_text(cameras_txt, images_txt)) {
      TrainingView view;
      view.camera = cv.camera;
      view.image = read_image(dir + "/images/" + cv.image_name);
      views.push_back(std::move(view));
    }
    return views;
  }
  throw IoError("load_dataset: '" + dir + "' has neither cameras.json nor sparse/0/cameras.txt");
}

}  // namespace gtrace
