#include "fsr/evalkit.hpp"

#include "fsr/cam.hpp"
#include "fsr/decoder_losses.hpp"
#include "fsr/png_io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace fsr {

namespace fs = std::filesystem;

void ConfusionMatrix::accumulate(const std::vector<int>& gt, const std::vector<int>& pred) {
  if (gt.size() != pred.size()) throw NumericError("ConfusionMatrix: length mismatch");
  const int n = static_cast<int>(counts.rows());
  for (size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == kIgnoreIndex || pred[i] == kIgnoreIndex) continue;
    if (gt[i] < 0 || gt[i] >= n || pred[i] < 0 || pred[i] >= n)
      throw NumericError("ConfusionMatrix: label out of range");
    counts(gt[i], pred[i]) += 1;
  }
}

MiouResult miou(const ConfusionMatrix& conf) {
  const int n = static_cast<int>(conf.counts.rows());
  MiouResult res;
  res.per_class.assign(static_cast<size_t>(n), -1.0);
  double sum = 0.0;
  int scored = 0;
  for (int c = 0; c < n; ++c) {
    const int64_t tp = conf.counts(c, c);
    const int64_t fp = conf.counts.col(c).sum() - tp;
    const int64_t fn = conf.counts.row(c).sum() - tp;
    const int64_t uni = tp + fp + fn;
    if (uni == 0) continue;
    double iou = 100.0 * static_cast<double>(tp) / static_cast<double>(uni);
    res.per_class[static_cast<size_t>(c)] = iou;
    sum += iou;
    ++scored;
  }
  res.miou = scored > 0 ? sum / scored : 0.0;
  return res;
}

std::vector<double> attention_entropy(const std::vector<MatrixXd>& head_maps) {
  std::vector<double> out;
  out.reserve(head_maps.size());
  for (const auto& a : head_maps) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      double h = 0.0;
      for (Eigen::Index j = 0; j < a.cols(); ++j) {
        double p = a(i, j);
        if (p > 0.0) h -= p * std::log(p);
      }
      acc += h;
    }
    out.push_back(a.rows() > 0 ? acc / static_cast<double>(a.rows()) : 0.0);
  }
  return out;
}

double cka(const MatrixXd& x, const MatrixXd& y) {
  if (x.rows() != y.rows()) throw NumericError("cka: row counts disagree");
  MatrixXd xc = x.rowwise() - x.colwise().mean();
  MatrixXd yc = y.rowwise() - y.colwise().mean();
  double num = (yc.transpose() * xc).squaredNorm();
  double den = (xc.transpose() * xc).norm() * (yc.transpose() * yc).norm();
  if (den <= 0.0) return 0.0;
  return num / den;
}

std::vector<int> downsample_mask(const std::vector<uint8_t>& mask, int size, int grid) {
  std::vector<int> out(static_cast<size_t>(grid) * grid);
  const int stride = size / grid;
  for (int gy = 0; gy < grid; ++gy)
    for (int gx = 0; gx < grid; ++gx) {
      int y = gy * stride + stride / 2;
      int x = gx * stride + stride / 2;
      out[static_cast<size_t>(gy) * grid + gx] =
          mask[static_cast<size_t>(y) * size + x];
    }
  return out;
}

namespace {

// Full-image forward (no augmentation) returning final tokens.
MatrixXd forward_image(const TrainerState& state, const synthdata::LabeledImage& img) {
  MatrixXd emb = patchify_embed(img.pixels, state.student.encoder);
  return transformer_forward(emb, state.student.encoder);
}

}  // namespace

EvalReport evaluate_split(const TrainerState& state,
                          const std::vector<synthdata::LabeledImage>& images,
                          const std::string& split_name) {
  const TrainConfig& cfg = state.cfg;
  const int grid = cfg.encoder.grid();
  ConfusionMatrix conf_pseudo(cfg.num_classes + 1);
  ConfusionMatrix conf_pred(cfg.num_classes + 1);

  for (const auto& img : images) {
    if (img.gt_mask.empty())
      throw DataError("evaluate_split: image id " + std::to_string(img.id) +
                      " has no ground-truth mask");
    MatrixXd z = forward_image(state, img);
    Cam cam = compute_cam(z, state.student.classifier.w, grid, grid);
    PseudoLabel pseudo = derive_pseudo_labels(cam, img.labels, cfg.beta_low, cfg.beta_high);

    MatrixXd seg = decode_segmentation(z, state.student.decoder, grid, grid);
    std::vector<int> pred(static_cast<size_t>(grid) * grid);
    for (Eigen::Index i = 0; i < seg.rows(); ++i) {
      Eigen::Index best;
      seg.row(i).maxCoeff(&best);
      pred[static_cast<size_t>(i)] = static_cast<int>(best);
    }

    std::vector<int> gt = downsample_mask(img.gt_mask, img.height, grid);
    conf_pseudo.accumulate(gt, pseudo.labels);
    conf_pred.accumulate(gt, pred);
  }

  MiouResult mp = miou(conf_pseudo);
  MiouResult md = miou(conf_pred);
  EvalReport rep;
  rep.split = split_name;
  rep.miou_pseudo = mp.miou;
  rep.miou_pred = md.miou;
  rep.per_class_pseudo = mp.per_class;
  rep.per_class_pred = md.per_class;
  return rep;
}

void export_cam_maps(const TrainerState& state,
                     const std::vector<synthdata::LabeledImage>& images,
                     const fs::path& outdir) {
  const TrainConfig& cfg = state.cfg;
  const int grid = cfg.encoder.grid();
  fs::create_directories(outdir);

  for (const auto& img : images) {
    MatrixXd z = forward_image(state, img);
    Cam cam = compute_cam(z, state.student.classifier.w, grid, grid);
    PseudoLabel pseudo = derive_pseudo_labels(cam, img.labels, cfg.beta_low, cfg.beta_high);

    char stem[32];
    std::snprintf(stem, sizeof(stem), "IMG_%06d", img.id);

    for (int c = 0; c < cfg.num_classes; ++c) {
      std::vector<uint8_t> gray(static_cast<size_t>(grid) * grid);
      std::vector<float> raw(static_cast<size_t>(grid) * grid);
      for (int i = 0; i < grid * grid; ++i) {
        raw[static_cast<size_t>(i)] = static_cast<float>(cam.scores(i, c));
        gray[static_cast<size_t>(i)] =
            static_cast<uint8_t>(std::lround(cam.scores(i, c) * 255.0));
      }
      fs::path base = outdir / (std::string(stem) + "_cam" + std::to_string(c + 1));
      write_gray_png(base.string() + ".png", grid, grid, gray);
      std::ofstream rf(base.string() + ".bin", std::ios::binary);
      rf.write(reinterpret_cast<const char*>(raw.data()),
               static_cast<std::streamsize>(raw.size() * sizeof(float)));
    }

    std::vector<uint8_t> lab(static_cast<size_t>(grid) * grid);
    std::vector<uint8_t> gray(static_cast<size_t>(grid) * grid);
    for (int i = 0; i < grid * grid; ++i) {
      int l = pseudo.labels[static_cast<size_t>(i)];
      lab[static_cast<size_t>(i)] = static_cast<uint8_t>(l);
      gray[static_cast<size_t>(i)] =
          l == kIgnoreIndex ? 255 : static_cast<uint8_t>(l * (200 / std::max(cfg.num_classes, 1)));
    }
    fs::path base = outdir / (std::string(stem) + "_pseudo");
    write_gray_png(base.string() + ".png", grid, grid, gray);
    std::ofstream lf(base.string() + ".bin", std::ios::binary);
    lf.write(reinterpret_cast<const char*>(lab.data()),
             static_cast<std::streamsize>(lab.size()));
  }
}

AnalysisProfiles analyze_attention_and_cka(const TrainerState& state,
                                           const std::vector<synthdata::LabeledImage>& images,
                                           int max_images) {
  const TrainConfig& cfg = state.cfg;
  const int depth = cfg.encoder.depth;
  const int heads = cfg.encoder.heads;
  const int count = std::min<int>(max_images, static_cast<int>(images.size()));
  if (count == 0) throw DataError("analyze: no images");

  AnalysisProfiles prof;
  prof.entropy.assign(static_cast<size_t>(depth), std::vector<double>(heads, 0.0));
  // layer_outputs has depth+1 entries (embedding + each block output).
  std::vector<MatrixXd> stacked(static_cast<size_t>(depth) + 1);

  for (int i = 0; i < count; ++i) {
    MatrixXd emb = patchify_embed(images[static_cast<size_t>(i)].pixels, state.student.encoder);
    AttentionCapture cap;
    transformer_forward(emb, state.student.encoder, &cap);
    for (int l = 0; l < depth; ++l) {
      auto ent = attention_entropy(cap.layers[static_cast<size_t>(l)]);
      for (int h = 0; h < heads; ++h)
        prof.entropy[static_cast<size_t>(l)][static_cast<size_t>(h)] += ent[static_cast<size_t>(h)];
    }
    for (size_t l = 0; l < cap.layer_outputs.size(); ++l) {
      MatrixXd& dst = stacked[l];
      if (dst.size() == 0) {
        dst = cap.layer_outputs[l];
      } else {
        MatrixXd merged(dst.rows() + cap.layer_outputs[l].rows(), dst.cols());
        merged.topRows(dst.rows()) = dst;
        merged.bottomRows(cap.layer_outputs[l].rows()) = cap.layer_outputs[l];
        dst = std::move(merged);
      }
    }
  }
  for (auto& layer : prof.entropy)
    for (auto& e : layer) e /= count;

  const int nl = static_cast<int>(stacked.size());
  prof.cka_layers = MatrixXd::Zero(nl, nl);
  for (int a = 0; a < nl; ++a)
    for (int b = 0; b < nl; ++b)
      prof.cka_layers(a, b) = cka(stacked[static_cast<size_t>(a)], stacked[static_cast<size_t>(b)]);
  return prof;
}

}  // namespace fsr
