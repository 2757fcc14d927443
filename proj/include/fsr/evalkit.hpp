#pragma once

// Evaluation and analysis: mIoU over pseudo and predicted labels, attention
// entropy profiles, linear CKA between layer representations, CAM export.

#include "fsr/common.hpp"
#include "fsr/synthdata.hpp"
#include "fsr/trainer.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace fsr {

struct ConfusionMatrix {
  Eigen::MatrixXi counts;  // (C+1)×(C+1); rows = ground truth, cols = prediction

  explicit ConfusionMatrix(int num_classes_with_bg)
      : counts(Eigen::MatrixXi::Zero(num_classes_with_bg, num_classes_with_bg)) {}

  // Positions where either side is the IGNORE index are not scored.
  void accumulate(const std::vector<int>& gt, const std::vector<int>& pred);
  int64_t total() const { return counts.sum(); }
};

struct MiouResult {
  double miou = 0.0;                 // percent, mean over classes with nonzero union
  std::vector<double> per_class;     // percent; -1 for classes with zero union
};

MiouResult miou(const ConfusionMatrix& conf);

// Per-head mean over query rows of -sum_j a_ij * ln(a_ij).
std::vector<double> attention_entropy(const std::vector<MatrixXd>& head_maps);

// Linear CKA between two representations with matching row counts.
double cka(const MatrixXd& x, const MatrixXd& y);

struct EvalReport {
  std::string split;
  double miou_pseudo = 0.0;
  double miou_pred = 0.0;
  std::vector<double> per_class_pseudo;
  std::vector<double> per_class_pred;
};

// Nearest-neighbour downsample of a pixel mask to the token grid.
std::vector<int> downsample_mask(const std::vector<uint8_t>& mask, int size, int grid);

// Pseudo-label and decoder mIoU over a split at token-grid resolution.
EvalReport evaluate_split(const TrainerState& state,
                          const std::vector<synthdata::LabeledImage>& images,
                          const std::string& split_name);

// Per-image per-class CAM heat maps and pseudo-label maps as grayscale PNG
// plus raw arrays (float32 for CAMs, uint8 for labels).
void export_cam_maps(const TrainerState& state,
                     const std::vector<synthdata::LabeledImage>& images,
                     const std::filesystem::path& outdir);

struct AnalysisProfiles {
  // entropy[layer][head]
  std::vector<std::vector<double>> entropy;
  // cka_layers(l1, l2) over final-token features of the sampled images
  MatrixXd cka_layers;
};

AnalysisProfiles analyze_attention_and_cka(const TrainerState& state,
                                           const std::vector<synthdata::LabeledImage>& images,
                                           int max_images);

}  // namespace fsr
