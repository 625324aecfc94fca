#include "mba/dataio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <map>
#include <set>
#include <sstream>

#include "mba/errors.hpp"
#include "mba/rng.hpp"

namespace mba {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

/// Skips whitespace and '#' comments in a PGM header.
void skip_header_space(const std::string& s, std::size_t& pos) {
  while (pos < s.size()) {
    if (s[pos] == '#') {
      while (pos < s.size() && s[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(s[pos]))) {
      ++pos;
    } else {
      break;
    }
  }
}

int read_header_int(const std::string& s, std::size_t& pos, const fs::path& path) {
  skip_header_space(s, pos);
  const std::size_t start = pos;
  while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) ++pos;
  if (start == pos || pos - start > 9) throw DataError(path.string() + ": malformed PGM header");
  return std::stoi(s.substr(start, pos - start));
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::string tensor_bytes(std::span<const float> values) {
  std::string bytes(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFFu);
  }
  return bytes;
}

std::vector<float> tensor_values(const std::string& bytes) {
  std::vector<float> values(bytes.size() / 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b)
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
    values[i] = std::bit_cast<float>(bits);
  }
  return values;
}

GrayImage blank(int width, int height, float value = 0.0f) {
  return {width, height, std::vector<float>(static_cast<std::size_t>(width) * height, value)};
}

GrayImage box_blur3(const GrayImage& in) {
  GrayImage out = blank(in.width, in.height);
  for (int y = 0; y < in.height; ++y) {
    for (int x = 0; x < in.width; ++x) {
      float acc = 0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int sx = std::clamp(x + dx, 0, in.width - 1);
          const int sy = std::clamp(y + dy, 0, in.height - 1);
          acc += in.at(sx, sy);
        }
      }
      out.at(x, y) = acc / 9.0f;
    }
  }
  return out;
}

/// Interior appearance in [0, 1]: 0 for the cystic pattern, a bright
/// texture for solid tissue, and half of each for mixed lesions.
double interior_pattern(const LesionGeometry& g, double px, double py) {
  const auto solid = [&] {
    double t = 0;
    for (const auto& w : g.texture) {
      t += std::sin(w[0] * (px * std::cos(w[1]) + py * std::sin(w[1])) + w[2]);
    }
    return 0.55 + 0.45 * (0.5 + 0.5 * t / 3.0);
  };
  switch (g.lesion_class) {
    case LesionClass::Cystic:
      return 0.0;
    case LesionClass::Solid:
      return solid();
    case LesionClass::Mixed: {
      const double side = (px - g.cx) * std::cos(g.split_angle) + (py - g.cy) * std::sin(g.split_angle);
      return side >= 0 ? solid() : 0.0;
    }
  }
  return 0.0;
}

}  // namespace

GrayImage read_pgm(const fs::path& path) {
  const std::string s = read_file(path);
  if (s.size() < 2 || s[0] != 'P' || s[1] != '5') throw DataError(path.string() + ": not a P5 PGM");
  std::size_t pos = 2;
  const int width = read_header_int(s, pos, path);
  const int height = read_header_int(s, pos, path);
  const int maxval = read_header_int(s, pos, path);
  if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 255) {
    throw DataError(path.string() + ": unsupported PGM extent or maxval");
  }
  if (pos >= s.size() || !std::isspace(static_cast<unsigned char>(s[pos]))) {
    throw DataError(path.string() + ": malformed PGM header");
  }
  ++pos;
  const std::size_t count = static_cast<std::size_t>(width) * height;
  if (s.size() - pos != count) {
    throw DataError(path.string() + ": expected " + std::to_string(count) + " pixel bytes, found " +
                    std::to_string(s.size() - pos));
  }
  GrayImage img = blank(width, height);
  for (std::size_t i = 0; i < count; ++i) {
    img.pixels[i] = static_cast<float>(static_cast<unsigned char>(s[pos + i])) / static_cast<float>(maxval);
  }
  return img;
}

void write_pgm(const fs::path& path, const GrayImage& image) {
  std::string bytes = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  bytes.reserve(bytes.size() + image.pixels.size());
  for (float v : image.pixels) {
    const long q = std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f);
    bytes.push_back(static_cast<char>(static_cast<unsigned char>(q)));
  }
  write_file(path, bytes);
}

GrayImage resize_bilinear(const GrayImage& image, int width, int height) {
  if (width <= 0 || height <= 0) throw ShapeError("resize_bilinear: non-positive target extent");
  GrayImage out = blank(width, height);
  const double sx = static_cast<double>(image.width) / width;
  const double sy = static_cast<double>(image.height) / height;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, image.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, image.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - x0;
      const double top = image.at(x0, y0) * (1 - wx) + image.at(x1, y0) * wx;
      const double bottom = image.at(x0, y1) * (1 - wx) + image.at(x1, y1) * wx;
      out.at(x, y) = static_cast<float>(top * (1 - wy) + bottom * wy);
    }
  }
  return out;
}

std::string to_string(LesionClass c) {
  switch (c) {
    case LesionClass::Cystic:
      return "cystic";
    case LesionClass::Solid:
      return "solid";
    case LesionClass::Mixed:
      return "mixed";
  }
  return "cystic";
}

LesionClass lesion_class_from_string(const std::string& s) {
  if (s == "cystic") return LesionClass::Cystic;
  if (s == "solid") return LesionClass::Solid;
  if (s == "mixed") return LesionClass::Mixed;
  throw DataError("unknown lesion class '" + s + "'");
}

nlohmann::json SampleRecord::to_json() const {
  return {{"id", id},       {"geometry", geometry}, {"image", image}, {"mask", mask},
          {"class", to_string(lesion_class)}, {"domain", domain}, {"split", split}};
}

SampleRecord SampleRecord::from_json(const nlohmann::json& j) {
  SampleRecord r;
  try {
    r.id = j.at("id").get<std::string>();
    r.image = j.at("image").get<std::string>();
    r.mask = j.at("mask").get<std::string>();
    r.lesion_class = lesion_class_from_string(j.at("class").get<std::string>());
    r.domain = j.at("domain").get<std::string>();
    r.split = j.at("split").get<std::string>();
    r.geometry = j.value("geometry", r.id);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed manifest entry: ") + e.what());
  }
  if (r.domain != "A" && r.domain != "B") throw DataError("sample " + r.id + ": domain must be A or B");
  if (r.split != "train" && r.split != "val" && r.split != "test") {
    throw DataError("sample " + r.id + ": split must be train, val or test");
  }
  return r;
}

std::vector<SampleRecord> Manifest::select(const std::string& split, const std::string& domain) const {
  std::vector<SampleRecord> out;
  for (const auto& s : samples) {
    if ((split.empty() || s.split == split) && (domain.empty() || s.domain == domain)) out.push_back(s);
  }
  return out;
}

Manifest load_manifest(const fs::path& root) {
  const fs::path path = root / "manifest.jsonl";
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  Manifest m;
  m.root = root;
  std::set<std::string> ids;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    auto rec = SampleRecord::from_json(j);
    if (!ids.insert(rec.id).second) throw DataError("duplicate sample id '" + rec.id + "'");
    m.samples.push_back(std::move(rec));
  }
  return m;
}

void save_manifest(const Manifest& manifest) {
  std::string text;
  for (const auto& s : manifest.samples) text += s.to_json().dump() + "\n";
  write_file(manifest.root / "manifest.jsonl", text);
}

double LesionGeometry::radius(double theta) const {
  double s = 1.0;
  for (int k = 0; k < 4; ++k) s += a[k] * std::sin((k + 1) * theta + phi[k]);
  return r0 * s;
}

double LesionGeometry::max_radius() const {
  return r0 * (1.0 + a[0] + a[1] + a[2] + a[3]);
}

LesionGeometry sample_geometry(std::uint64_t seed, int size) {
  Rng rng(seed);
  LesionGeometry g;
  g.r0 = rng.uniform(0.15 * size, 0.3 * size);
  for (int k = 0; k < 4; ++k) {
    g.a[k] = rng.uniform(0.0, 0.15);
    g.phi[k] = rng.uniform(0.0, kTwoPi);
  }
  const double rmax = g.max_radius();
  const double lo = rmax + 0.5, hi = size - rmax - 0.5;
  g.cx = lo < hi ? rng.uniform(lo, hi) : 0.5 * size;
  g.cy = lo < hi ? rng.uniform(lo, hi) : 0.5 * size;
  g.lesion_class = static_cast<LesionClass>(rng.below(3));
  g.split_angle = rng.uniform(0.0, kTwoPi);
  for (auto& w : g.texture) {
    w[0] = rng.uniform(4.0, 10.0) * kTwoPi / size;
    w[1] = rng.uniform(0.0, std::numbers::pi);
    w[2] = rng.uniform(0.0, kTwoPi);
  }
  return g;
}

GrayImage rasterize_mask(const LesionGeometry& geo, int size) {
  GrayImage mask = blank(size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double dx = x + 0.5 - geo.cx, dy = y + 0.5 - geo.cy;
      if (std::hypot(dx, dy) <= geo.radius(std::atan2(dy, dx))) mask.at(x, y) = 1.0f;
    }
  }
  return mask;
}

GrayImage render_phantom(const LesionGeometry& geo, int size, const std::string& domain,
                         std::uint64_t noise_seed) {
  if (domain != "A" && domain != "B") throw ConfigError("domain must be A or B, got '" + domain + "'");
  const GrayImage mask = rasterize_mask(geo, size);
  Rng rng(noise_seed);
  GrayImage img = blank(size, size);
  if (domain == "A") {
    const double speckle_sigma = std::sqrt(2.0 / std::numbers::pi);  // unit-mean Rayleigh
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double base = mask.at(x, y) > 0 ? 0.08 + 0.3 * interior_pattern(geo, x + 0.5, y + 0.5) : 0.55;
        img.at(x, y) = static_cast<float>(base * rng.rayleigh(speckle_sigma));
      }
    }
    img = box_blur3(img);
  } else {
    double c[5];
    for (double& v : c) v = rng.uniform(-0.15, 0.15);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double u = 2.0 * (x + 0.5) / size - 1.0, v = 2.0 * (y + 0.5) / size - 1.0;
        const double bias = 1.0 + c[0] * u + c[1] * v + c[2] * u * u + c[3] * v * v + c[4] * u * v;
        const double base = mask.at(x, y) > 0 ? 0.6 + 0.35 * interior_pattern(geo, x + 0.5, y + 0.5) : 0.3;
        img.at(x, y) = static_cast<float>(base * bias + 0.04 * rng.normal());
      }
    }
  }
  for (float& v : img.pixels) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

Manifest gen_dataset(const fs::path& out, const GenOptions& opts) {
  if (opts.size < 32 || opts.size % 4 != 0) {
    throw ConfigError("--size must be >= 32 and divisible by 4, got " + std::to_string(opts.size));
  }
  if (opts.train < 0 || opts.val < 0 || opts.test < 0 || opts.train + opts.val + opts.test == 0) {
    throw ConfigError("split counts must be non-negative with at least one sample");
  }
  const int total = opts.train + opts.val + opts.test;
  std::vector<std::string> geometry_ids;
  for (int i = 0; i < total; ++i) {
    std::ostringstream os;
    os << 'g' << std::setw(4) << std::setfill('0') << i;
    geometry_ids.push_back(os.str());
  }

  // Splits: order geometries by a seeded hash of their id, then cut at the
  // requested counts. Paired renderings share the geometry's split.
  std::vector<int> order(total);
  std::iota(order.begin(), order.end(), 0);
  const auto key = [&](int i) { return mix_seed(opts.seed, hash_string(geometry_ids[i])); };
  std::sort(order.begin(), order.end(), [&](int a, int b) { return key(a) < key(b); });
  std::vector<std::string> split_of(total);
  for (int r = 0; r < total; ++r) {
    split_of[order[r]] = r < opts.train ? "train" : (r < opts.train + opts.val ? "val" : "test");
  }

  fs::create_directories(out / "images");
  fs::create_directories(out / "masks");
  Manifest manifest;
  manifest.root = out;
  for (int i = 0; i < total; ++i) {
    const auto& gid = geometry_ids[i];
    const std::uint64_t geo_seed = mix_seed(opts.seed, hash_string(gid));
    const auto geo = sample_geometry(geo_seed, opts.size);
    const auto mask = rasterize_mask(geo, opts.size);
    std::vector<std::string> domains;
    if (opts.paired) {
      domains = {"A", "B"};
    } else {
      domains = {i % 2 == 0 ? "A" : "B"};
    }
    for (const auto& d : domains) {
      SampleRecord rec;
      rec.id = gid + "_" + d;
      rec.geometry = gid;
      rec.image = "images/" + rec.id + ".pgm";
      rec.mask = "masks/" + rec.id + ".pgm";
      rec.lesion_class = geo.lesion_class;
      rec.domain = d;
      rec.split = split_of[i];
      write_pgm(out / rec.image, render_phantom(geo, opts.size, d, mix_seed(geo_seed, hash_string(d))));
      write_pgm(out / rec.mask, mask);
      manifest.samples.push_back(rec);
    }
  }
  save_manifest(manifest);
  return manifest;
}

LoadedSample load_sample(const fs::path& root, const SampleRecord& record) {
  LoadedSample s;
  s.record = record;
  s.image = read_pgm(root / record.image);
  s.mask = read_pgm(root / record.mask);
  if (s.image.width != s.mask.width || s.image.height != s.mask.height) {
    throw DataError("sample " + record.id + ": image and mask extents differ");
  }
  for (float v : s.mask.pixels) {
    if (v != 0.0f && v != 1.0f) throw DataError("sample " + record.id + ": mask is not binary (0/255)");
  }
  return s;
}

std::vector<LoadedSample> load_samples(const Manifest& manifest, const std::string& split,
                                       const std::string& domain) {
  std::vector<LoadedSample> out;
  for (const auto& rec : manifest.select(split, domain)) out.push_back(load_sample(manifest.root, rec));
  return out;
}

template <typename T>
ModelInputs<T> make_inputs(const std::vector<const GrayImage*>& images, const ModelConfig& cfg) {
  const Index b = static_cast<Index>(images.size());
  if (b == 0) throw ShapeError("make_inputs: empty batch");
  std::vector<T> prior, domain;
  prior.reserve(static_cast<std::size_t>(b * cfg.x_s * cfg.x_s));
  domain.reserve(static_cast<std::size_t>(b * cfg.x_c * cfg.x_c));
  for (const auto* img : images) {
    for (float v : resize_bilinear(*img, cfg.x_s, cfg.x_s).pixels) prior.push_back(static_cast<T>(v));
    for (float v : resize_bilinear(*img, cfg.x_c, cfg.x_c).pixels) domain.push_back(static_cast<T>(v));
  }
  return {Tensor<T>::from_data({b, 1, cfg.x_s, cfg.x_s}, std::move(prior)),
          Tensor<T>::from_data({b, 1, cfg.x_c, cfg.x_c}, std::move(domain))};
}

template <typename T>
Tensor<T> make_targets(const std::vector<const GrayImage*>& masks, const ModelConfig& cfg) {
  const Index b = static_cast<Index>(masks.size());
  if (b == 0) throw ShapeError("make_targets: empty batch");
  std::vector<T> out;
  for (const auto* m : masks) {
    for (float v : resize_bilinear(*m, cfg.x_c, cfg.x_c).pixels) out.push_back(v >= 0.5f ? T(1) : T(0));
  }
  return Tensor<T>::from_data({b, 1, cfg.x_c, cfg.x_c}, std::move(out));
}

template <typename T>
void save_checkpoint(const fs::path& dir, const ParamSet<T>& params, const CheckpointMeta& meta) {
  fs::create_directories(dir);
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& p : params.items()) {
    const auto src = p.tensor.data();
    const std::vector<float> values(src.begin(), src.end());
    const std::string bytes = tensor_bytes(values);
    const std::string file = p.name + ".bin";
    write_file(dir / file, bytes);
    tensors.push_back({{"name", p.name},
                       {"file", file},
                       {"shape", p.tensor.shape()},
                       {"fnv1a", hex64(hash_string(bytes))}});
  }
  const nlohmann::json j{{"format_version", meta.version},
                         {"config", meta.config.to_json()},
                         {"epoch", meta.epoch},
                         {"seed", meta.seed},
                         {"tensors", tensors}};
  write_file(dir / "meta.json", j.dump(2) + "\n");
}

namespace {

nlohmann::json read_meta_json(const fs::path& dir) {
  try {
    return nlohmann::json::parse(read_file(dir / "meta.json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("checkpoint meta.json is not valid JSON: " + std::string(e.what()));
  }
}

}  // namespace

CheckpointMeta read_checkpoint_meta(const fs::path& dir) {
  const auto j = read_meta_json(dir);
  CheckpointMeta meta;
  try {
    meta.version = j.at("format_version").get<int>();
    if (meta.version != kCheckpointVersion) {
      throw DataError("checkpoint format version " + std::to_string(meta.version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
    }
    meta.config = ModelConfig::from_json(j.at("config"));
    meta.epoch = j.at("epoch").get<int>();
    meta.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint meta.json is incomplete: " + std::string(e.what()));
  }
  return meta;
}

template <typename T>
void load_checkpoint_params(const fs::path& dir, ParamSet<T>& params) {
  read_checkpoint_meta(dir);
  const auto j = read_meta_json(dir);
  struct Entry {
    Shape shape;
    std::string file;
    std::string checksum;
  };
  std::map<std::string, Entry> entries;
  try {
    for (const auto& t : j.at("tensors")) {
      entries[t.at("name").get<std::string>()] = {t.at("shape").get<Shape>(), t.at("file").get<std::string>(),
                                                 t.at("fnv1a").get<std::string>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint tensor table is malformed: " + std::string(e.what()));
  }

  for (auto& p : params.items()) {
    const auto it = entries.find(p.name);
    if (it == entries.end()) throw DataError("checkpoint is missing tensor '" + p.name + "'");
    const auto& e = it->second;
    if (e.shape != p.tensor.shape()) {
      throw DataError("tensor '" + p.name + "': checkpoint shape " + shape_str(e.shape) +
                      " does not match model shape " + shape_str(p.tensor.shape()));
    }
    const fs::path file = dir / e.file;
    if (!fs::exists(file)) throw DataError("tensor '" + p.name + "': file " + file.string() + " is missing");
    const std::string bytes = read_file(file);
    const std::size_t expected = static_cast<std::size_t>(p.tensor.numel()) * 4;
    if (bytes.size() != expected) {
      throw DataError("tensor '" + p.name + "': file has " + std::to_string(bytes.size()) +
                      " bytes, expected " + std::to_string(expected));
    }
    if (hex64(hash_string(bytes)) != e.checksum) {
      throw DataError("tensor '" + p.name + "': checksum mismatch, file is corrupted");
    }
    const auto values = tensor_values(bytes);
    auto dst = p.tensor.mutable_data();
    std::copy(values.begin(), values.end(), dst.begin());
    entries.erase(it);
  }
  if (!entries.empty()) {
    throw DataError("checkpoint tensor '" + entries.begin()->first + "' has no counterpart in the model");
  }
}

#define MBA_INSTANTIATE_DATAIO(T)                                                                 \
  template ModelInputs<T> make_inputs(const std::vector<const GrayImage*>&, const ModelConfig&); \
  template Tensor<T> make_targets(const std::vector<const GrayImage*>&, const ModelConfig&);     \
  template void save_checkpoint(const fs::path&, const ParamSet<T>&, const CheckpointMeta&);     \
  template void load_checkpoint_params(const fs::path&, ParamSet<T>&);

MBA_INSTANTIATE_DATAIO(float)
MBA_INSTANTIATE_DATAIO(double)

#undef MBA_INSTANTIATE_DATAIO

}  // namespace mba
