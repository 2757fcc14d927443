#include "fsr/synthdata.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace fsr::synthdata {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

// Low-frequency value noise: a coarse random lattice upsampled bilinearly.
std::vector<float> value_noise(int size, int lattice, double amplitude, Rng& rng) {
  std::vector<double> grid(static_cast<size_t>(lattice) * lattice);
  for (auto& g : grid) g = uniform(rng, -amplitude, amplitude);
  std::vector<float> out(static_cast<size_t>(size) * size);
  double scale = static_cast<double>(lattice - 1) / (size - 1);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double fy = y * scale, fx = x * scale;
      int y0 = std::min(static_cast<int>(fy), lattice - 2);
      int x0 = std::min(static_cast<int>(fx), lattice - 2);
      double ty = fy - y0, tx = fx - x0;
      double v00 = grid[static_cast<size_t>(y0) * lattice + x0];
      double v01 = grid[static_cast<size_t>(y0) * lattice + x0 + 1];
      double v10 = grid[static_cast<size_t>(y0 + 1) * lattice + x0];
      double v11 = grid[static_cast<size_t>(y0 + 1) * lattice + x0 + 1];
      out[static_cast<size_t>(y) * size + x] = static_cast<float>(
          (1 - ty) * ((1 - tx) * v00 + tx * v01) + ty * ((1 - tx) * v10 + tx * v11));
    }
  return out;
}

bool inside_shape(const ShapeSpec& s, double x, double y) {
  double dx = x - s.cx, dy = y - s.cy;
  switch (s.cls) {
    case 1:  // circle
      return dx * dx + dy * dy <= s.half * s.half;
    case 2:  // axis-aligned square
      return std::abs(dx) <= s.half && std::abs(dy) <= s.half;
    case 3: {  // upward triangle: apex (cx, cy-h), base corners (cx±h, cy+h)
      if (dy < -s.half || dy > s.half) return false;
      double width = (dy + s.half) * 0.5;  // half-width grows linearly toward the base
      return std::abs(dx) <= width;
    }
    default:
      return false;
  }
}

void write_f32(const fs::path& p, const std::vector<float>& data) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw DataError("cannot open for write: " + p.string());
  f.write(reinterpret_cast<const char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(float)));
}

void write_u8(const fs::path& p, const std::vector<uint8_t>& data) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw DataError("cannot open for write: " + p.string());
  f.write(reinterpret_cast<const char*>(data.data()),
          static_cast<std::streamsize>(data.size()));
}

std::vector<float> read_f32(const fs::path& p, size_t count) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw DataError("missing image file: " + p.string());
  std::vector<float> data(count);
  f.read(reinterpret_cast<char*>(data.data()),
         static_cast<std::streamsize>(count * sizeof(float)));
  if (static_cast<size_t>(f.gcount()) != count * sizeof(float))
    throw DataError("truncated image file: " + p.string());
  return data;
}

std::vector<uint8_t> read_u8(const fs::path& p, size_t count) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw DataError("missing mask file: " + p.string());
  std::vector<uint8_t> data(count);
  f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count));
  if (static_cast<size_t>(f.gcount()) != count) throw DataError("truncated mask file: " + p.string());
  return data;
}

std::string image_name(int id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "IMG_%06d.bin", id);
  return buf;
}

// Per-class base colors; one dominant channel each, jittered per instance.
void draw_shape_color(int cls, Rng& rng, float out[3]) {
  double dom = uniform(rng, 0.55, 0.95);
  double off1 = uniform(rng, 0.05, 0.40);
  double off2 = uniform(rng, 0.05, 0.40);
  switch (cls) {
    case 1: out[0] = clamp01(dom); out[1] = clamp01(off1); out[2] = clamp01(off2); break;
    case 2: out[0] = clamp01(off1); out[1] = clamp01(dom); out[2] = clamp01(off2); break;
    default: out[0] = clamp01(off1); out[1] = clamp01(off2); out[2] = clamp01(dom); break;
  }
}

LabeledImage generate_image(const DatasetConfig& cfg, int split_tag, int index) {
  Rng rng = make_rng(mix_seed(cfg.seed, mix_seed(static_cast<uint64_t>(split_tag),
                                                 static_cast<uint64_t>(index))));
  int n_shapes = uniform_int(rng, 1, 3);
  std::vector<ShapeSpec> shapes;
  for (int s = 0; s < n_shapes; ++s) {
    ShapeSpec sp;
    sp.cls = uniform_int(rng, 1, cfg.num_classes);
    sp.half = uniform(rng, cfg.image_size * 0.12, cfg.image_size * 0.28);
    sp.cx = uniform(rng, sp.half * 0.6, cfg.image_size - sp.half * 0.6);
    sp.cy = uniform(rng, sp.half * 0.6, cfg.image_size - sp.half * 0.6);
    draw_shape_color(sp.cls, rng, sp.color);
    shapes.push_back(sp);
  }
  uint64_t bg_seed = rng();
  LabeledImage img = render_scene(cfg.image_size, cfg.num_classes, shapes, bg_seed);
  img.id = index;
  return img;
}

}  // namespace

LabeledImage render_scene(int image_size, int num_classes,
                          const std::vector<ShapeSpec>& shapes, uint64_t background_seed) {
  if (num_classes < 1) throw ConfigError("render_scene: zero classes");
  Rng rng = make_rng(background_seed);
  LabeledImage img;
  img.height = img.width = image_size;
  img.pixels.assign(static_cast<size_t>(image_size) * image_size * 3, 0.0f);
  img.gt_mask.assign(static_cast<size_t>(image_size) * image_size, 0);

  float base[3];
  for (float& b : base) b = clamp01(uniform(rng, 0.25, 0.75));
  auto noise = value_noise(image_size, 9, 0.18, rng);
  std::vector<float> tint(3);
  for (auto& t : tint) t = static_cast<float>(uniform(rng, 0.5, 1.5));

  for (int y = 0; y < image_size; ++y)
    for (int x = 0; x < image_size; ++x) {
      size_t pi = (static_cast<size_t>(y) * image_size + x);
      float n = noise[pi];
      for (int c = 0; c < 3; ++c)
        img.pixels[pi * 3 + c] =
            clamp01(base[c] + n * tint[static_cast<size_t>(c)] + uniform(rng, -0.04, 0.04));
    }

  for (const auto& sp : shapes) {
    for (int y = 0; y < image_size; ++y)
      for (int x = 0; x < image_size; ++x) {
        if (!inside_shape(sp, x + 0.5, y + 0.5)) continue;
        size_t pi = static_cast<size_t>(y) * image_size + x;
        img.gt_mask[pi] = static_cast<uint8_t>(sp.cls);
        for (int c = 0; c < 3; ++c)
          img.pixels[pi * 3 + c] = clamp01(sp.color[c] + uniform(rng, -0.06, 0.06));
      }
  }

  // Labels are exactly the classes visible after occlusion.
  img.labels.assign(static_cast<size_t>(num_classes), 0);
  for (uint8_t m : img.gt_mask)
    if (m > 0) img.labels[static_cast<size_t>(m - 1)] = 1;
  return img;
}

void generate_dataset(const DatasetConfig& cfg) {
  if (cfg.num_classes < 1) throw ConfigError("generate_dataset: num_classes must be >= 1");
  if (cfg.patch_size < 1 || cfg.image_size % cfg.patch_size != 0)
    throw ConfigError("generate_dataset: image_size " + std::to_string(cfg.image_size) +
                      " is not a multiple of patch_size " + std::to_string(cfg.patch_size));

  fs::path root(cfg.root);
  struct Split {
    const char* name;
    int tag;
    int count;
  };
  const Split splits[] = {{"train", 0, cfg.train_images}, {"val", 1, cfg.val_images}};

  for (const auto& sp : splits) {
    fs::create_directories(root / sp.name / "images");
    fs::create_directories(root / sp.name / "masks");
    std::ofstream labels(root / sp.name / "labels.jsonl");
    if (!labels) throw DataError("cannot write labels file under " + (root / sp.name).string());
    for (int i = 0; i < sp.count; ++i) {
      LabeledImage img = generate_image(cfg, sp.tag, i);
      // Images always contain at least one foreground class by construction
      // (the last drawn shape is always visible); keep the guard anyway.
      if (std::accumulate(img.labels.begin(), img.labels.end(), 0) == 0)
        throw DataError("generated image without foreground: index " + std::to_string(i));
      write_f32(root / sp.name / "images" / image_name(i), img.pixels);
      write_u8(root / sp.name / "masks" / image_name(i), img.gt_mask);
      json row = {{"id", i}, {"labels", img.labels}};
      labels << row.dump() << "\n";
    }
  }

  json meta = {{"image_size", cfg.image_size},
               {"num_classes", cfg.num_classes},
               {"class_names", {"circle", "square", "triangle"}},
               {"seed", cfg.seed}};
  std::ofstream mf(root / "meta.json");
  mf << meta.dump(2) << "\n";
}

DatasetMeta load_meta(const fs::path& root) {
  std::ifstream mf(root / "meta.json");
  if (!mf) throw DataError("missing meta.json under " + root.string());
  json meta = json::parse(mf, nullptr, /*allow_exceptions=*/false);
  if (meta.is_discarded()) throw DataError("malformed meta.json under " + root.string());
  DatasetMeta out;
  out.image_size = meta.at("image_size").get<int>();
  out.num_classes = meta.at("num_classes").get<int>();
  out.class_names = meta.at("class_names").get<std::vector<std::string>>();
  out.seed = meta.at("seed").get<uint64_t>();
  return out;
}

std::vector<LabeledImage> load_dataset(const fs::path& root, const std::string& split) {
  DatasetMeta meta = load_meta(root);
  fs::path dir = root / split;
  std::ifstream labels(dir / "labels.jsonl");
  if (!labels) throw DataError("missing labels.jsonl under " + dir.string());

  std::vector<LabeledImage> out;
  std::string line;
  int lineno = 0;
  const size_t npix = static_cast<size_t>(meta.image_size) * meta.image_size;
  while (std::getline(labels, line)) {
    ++lineno;
    if (line.empty()) continue;
    json row = json::parse(line, nullptr, false);
    if (row.is_discarded() || !row.contains("id") || !row.contains("labels"))
      throw DataError("malformed labels.jsonl entry at line " + std::to_string(lineno) +
                      " in " + (dir / "labels.jsonl").string());
    LabeledImage img;
    img.id = row["id"].get<int>();
    img.labels = row["labels"].get<std::vector<int>>();
    if (static_cast<int>(img.labels.size()) != meta.num_classes)
      throw DataError("labels.jsonl entry id " + std::to_string(img.id) +
                      ": expected " + std::to_string(meta.num_classes) + " labels, got " +
                      std::to_string(img.labels.size()));
    img.height = img.width = meta.image_size;
    img.pixels = read_f32(dir / "images" / image_name(img.id), npix * 3);
    fs::path mask_path = dir / "masks" / image_name(img.id);
    if (fs::exists(mask_path)) {
      img.gt_mask = read_u8(mask_path, npix);
      for (uint8_t m : img.gt_mask)
        if (m > meta.num_classes)
          throw DataError("mask value out of range in " + mask_path.string());
    }
    out.push_back(std::move(img));
  }
  return out;
}

std::vector<int> epoch_order(int count, uint64_t seed, int epoch) {
  std::vector<int> order(static_cast<size_t>(count));
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(mix_seed(seed, 0x5f0e1ULL + static_cast<uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::vector<float> resize_bilinear(const std::vector<float>& src, int h, int w, int out) {
  std::vector<float> dst(static_cast<size_t>(out) * out * 3);
  double sy = static_cast<double>(h) / out;
  double sx = static_cast<double>(w) / out;
  for (int y = 0; y < out; ++y)
    for (int x = 0; x < out; ++x) {
      double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, h - 1.0);
      double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, w - 1.0);
      int y0 = std::min(static_cast<int>(fy), h - 2 >= 0 ? h - 2 : 0);
      int x0 = std::min(static_cast<int>(fx), w - 2 >= 0 ? w - 2 : 0);
      int y1 = std::min(y0 + 1, h - 1);
      int x1 = std::min(x0 + 1, w - 1);
      double ty = fy - y0, tx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        auto at = [&](int yy, int xx) {
          return static_cast<double>(src[(static_cast<size_t>(yy) * w + xx) * 3 + c]);
        };
        double v = (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x1)) +
                   ty * ((1 - tx) * at(y1, x0) + tx * at(y1, x1));
        dst[(static_cast<size_t>(y) * out + x) * 3 + c] = static_cast<float>(v);
      }
    }
  return dst;
}

std::vector<float> augment_view(const LabeledImage& img, const AugmentConfig& cfg, Rng& rng) {
  // Random resized crop: area scale then aspect ratio, clamped to the image.
  double area = static_cast<double>(img.height) * img.width;
  double s = uniform(rng, cfg.scale_min, cfg.scale_max);
  double ratio = uniform(rng, cfg.ratio_min, cfg.ratio_max);
  int cw = std::clamp(static_cast<int>(std::round(std::sqrt(area * s * ratio))), 1, img.width);
  int ch = std::clamp(static_cast<int>(std::round(std::sqrt(area * s / ratio))), 1, img.height);
  int x0 = uniform_int(rng, 0, img.width - cw);
  int y0 = uniform_int(rng, 0, img.height - ch);

  std::vector<float> crop(static_cast<size_t>(ch) * cw * 3);
  for (int y = 0; y < ch; ++y)
    for (int x = 0; x < cw; ++x)
      for (int c = 0; c < 3; ++c)
        crop[(static_cast<size_t>(y) * cw + x) * 3 + c] =
            img.pixels[(static_cast<size_t>(y0 + y) * img.width + (x0 + x)) * 3 + c];

  std::vector<float> view = resize_bilinear(crop, ch, cw, cfg.out_size);

  if (cfg.flip && uniform(rng, 0.0, 1.0) < 0.5) {
    for (int y = 0; y < cfg.out_size; ++y)
      for (int x = 0; x < cfg.out_size / 2; ++x)
        for (int c = 0; c < 3; ++c)
          std::swap(view[(static_cast<size_t>(y) * cfg.out_size + x) * 3 + c],
                    view[(static_cast<size_t>(y) * cfg.out_size + (cfg.out_size - 1 - x)) * 3 + c]);
  }

  if (cfg.color_jitter) {
    double gain[3], bias[3];
    for (int c = 0; c < 3; ++c) {
      gain[c] = uniform(rng, 0.8, 1.2);
      bias[c] = uniform(rng, -0.1, 0.1);
    }
    for (size_t i = 0; i < view.size(); i += 3)
      for (int c = 0; c < 3; ++c)
        view[i + static_cast<size_t>(c)] = clamp01(view[i + static_cast<size_t>(c)] * gain[c] + bias[c]);
  }
  return view;
}

ViewPair augment_two_views(const LabeledImage& img, const AugmentConfig& cfg, Rng& rng) {
  ViewPair vp;
  vp.size = cfg.out_size;
  vp.labels = img.labels;
  vp.view1 = augment_view(img, cfg, rng);
  vp.view2 = augment_view(img, cfg, rng);  // independent draws, including jitter
  return vp;
}

}  // namespace fsr::synthdata
