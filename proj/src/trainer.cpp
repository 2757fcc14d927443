#include "fsr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <numeric>

namespace fsr {

namespace {

constexpr uint64_t kAugmentStream = 0xDA7AULL;
constexpr uint64_t kArtifactStream = 0xA47ULL;

bool distill_active(const TrainConfig& cfg, int64_t iter) {
  double f = lambda45_factor(iter, cfg);
  return cfg.lambdas[3] * f != 0.0 || cfg.lambdas[4] * f != 0.0;
}

MatrixXd sharpen_rows(const MatrixXd& logits, const VectorXd& center, double tau) {
  MatrixXd p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::RowVectorXd row = (logits.row(i) - center.transpose()) / tau;
    double m = row.maxCoeff();
    Eigen::ArrayXd e = (row.array() - m).exp();
    p.row(i) = e / e.sum();
  }
  return p;
}

MaskPair empty_mask(int n) {
  MaskPair mp;
  mp.soft = VectorXd::Zero(n);
  mp.binary.assign(static_cast<size_t>(n), 0);
  mp.k = 0;
  return mp;
}

void check_finite(const char* term, double value, int64_t iter) {
  if (!std::isfinite(value))
    throw NumericError("train_step: non-finite loss term '" + std::string(term) +
                       "' at iteration " + std::to_string(iter));
}

struct SampleResult {
  double cls = 0.0, aff = 0.0, seg = 0.0, u = 0.0, c = 0.0;
  std::vector<std::pair<std::string, MatrixXd>> grads;
};

// Builds the full per-sample graph (both student views) and optionally runs
// backward. Artifacts and teacher outputs are constants to the graph.
SampleResult run_sample(StudentParams& student, const TrainConfig& cfg,
                        const synthdata::ViewPair& vp, const StepArtifacts& art, double l4,
                        double l5, bool with_grad) {
  Tape tape(with_grad);
  const bool distill = (l4 != 0.0 || l5 != 0.0);
  const int grid = cfg.encoder.grid();

  std::vector<std::pair<std::string, Var>> leafed;
  auto record = [&](const std::string& prefix, auto& params, size_t start) {
    size_t i = 0;
    params.visit(prefix, [&](const std::string& n, MatrixXd&) {
      leafed.emplace_back(n, Var{static_cast<int32_t>(start + i)});
      ++i;
    });
  };

  size_t start = tape.size();
  EncoderVars enc = leaf_encoder(tape, student.encoder, with_grad);
  record("encoder.", student.encoder, start);
  start = tape.size();
  Var cls_w = tape.leaf(student.classifier.w, with_grad);
  record("classifier.", student.classifier, start);
  start = tape.size();
  DecoderVars dec = leaf_decoder(tape, student.decoder, with_grad);
  record("decoder.", student.decoder, start);

  AggregationVars agg;
  ProjectorVars proj;
  if (distill) {
    start = tape.size();
    agg = leaf_aggregation(tape, student.aggregation, with_grad);
    record("aggregation.", student.aggregation, start);
    start = tape.size();
    proj = leaf_projector(tape, student.projector, with_grad);
    record("projector.", student.projector, start);
  }

  // View 1: classification, segmentation, affinity.
  MatrixXd patches1 = patchify(vp.view1, cfg.encoder.image_size, cfg.encoder.patch_size);
  Var emb1 = patchify_embed_t(tape, patches1, enc);
  Var z1 = transformer_forward_t(tape, emb1, enc, cfg.encoder);
  Var logits = pool_class_logits_t(tape, z1, cls_w);
  Var l_cls = loss_cls_t(tape, logits, vp.labels);
  Var segl = decode_segmentation_t(tape, z1, dec, cfg.decoder_config(), grid, grid);
  Var l_seg = loss_seg_t(tape, segl, art.pseudo);
  Var l_aff = loss_aff_t(tape, z1, art.pairs);

  // View 2: masked student pass, aggregation, projection, distillation.
  Var l_u = tape.constant(MatrixXd::Zero(1, 1));
  Var l_c = tape.constant(MatrixXd::Zero(1, 1));
  if (distill) {
    MatrixXd patches2 = patchify(vp.view2, cfg.encoder.image_size, cfg.encoder.patch_size);
    Var emb2 = patchify_embed_t(tape, patches2, enc);
    Var masked = art.mask.k > 0
                     ? apply_mask_tokens_t(tape, emb2, art.mask, enc.mask_token, enc.pos)
                     : emb2;
    Var z2 = transformer_forward_t(tape, masked, enc, cfg.encoder);

    Var cls_tok;
    switch (cfg.aggregation) {
      case AggregationKind::kMca:
        cls_tok = aggregate_class_token_t(tape, z2, art.mask, agg);
        break;
      case AggregationKind::kGap:
        cls_tok = pool_gap_t(tape, z2, art.mask);
        break;
      case AggregationKind::kGmp:
        cls_tok = pool_gmp_t(tape, z2, art.mask);
        break;
    }

    // Only the class row and the masked patch rows reach a loss; projecting
    // just those rows computes the same L_u and L_c as the full distribution.
    Var sel = art.masked_indices.empty()
                  ? cls_tok
                  : tape.concat_rows(cls_tok, tape.gather_rows(z2, art.masked_indices));
    Var probs = project_and_normalize_t(tape, sel, proj, cfg.tau_student, nullptr);

    if (l4 != 0.0 && art.mask.k > 0) {
      MatrixXd teacher(1 + art.mask.k, art.teacher_p2_masked.cols());
      teacher.row(0).setZero();
      teacher.bottomRows(art.mask.k) = art.teacher_p2_masked;
      MaskPair reduced;
      reduced.k = art.mask.k;
      reduced.binary.assign(static_cast<size_t>(art.mask.k), 1);
      reduced.soft = VectorXd::Ones(art.mask.k);
      l_u = loss_uncertain_t(tape, probs, teacher, reduced);
    }
    if (l5 != 0.0) l_c = loss_certain_t(tape, probs, art.teacher_p1_cls);
  }

  SampleResult res;
  res.cls = tape.val(l_cls)(0, 0);
  res.aff = tape.val(l_aff)(0, 0);
  res.seg = tape.val(l_seg)(0, 0);
  res.u = tape.val(l_u)(0, 0);
  res.c = tape.val(l_c)(0, 0);

  if (with_grad) {
    Var total = tape.scale(l_cls, cfg.lambdas[0]);
    total = tape.add(total, tape.scale(l_aff, cfg.lambdas[1]));
    total = tape.add(total, tape.scale(l_seg, cfg.lambdas[2]));
    if (distill) {
      total = tape.add(total, tape.scale(l_u, l4));
      total = tape.add(total, tape.scale(l_c, l5));
    }
    tape.backward(total);
    res.grads.reserve(leafed.size());
    for (const auto& [name, var] : leafed) res.grads.emplace_back(name, tape.grad(var));
  }
  return res;
}

LossBreakdown reduce_losses(const std::vector<SampleResult>& results, const TrainConfig& cfg,
                            double l4, double l5) {
  double cls = 0, aff = 0, seg = 0, u = 0, c = 0;
  for (const auto& r : results) {
    cls += r.cls;
    aff += r.aff;
    seg += r.seg;
    u += r.u;
    c += r.c;
  }
  const double b = static_cast<double>(results.size());
  std::array<double, 5> eff{cfg.lambdas[0], cfg.lambdas[1], cfg.lambdas[2], l4, l5};
  return total_loss(cls / b, aff / b, seg / b, u / b, c / b, eff);
}

std::vector<SampleResult> run_batch(StudentParams& student, const TrainConfig& cfg,
                                    const FixedStepInputs& inputs, double l4, double l5,
                                    bool with_grad) {
  const size_t b = inputs.views.size();
  std::vector<SampleResult> results(b);
  const int threads = std::max(1, cfg.threads);
  if (threads <= 1 || b <= 1) {
    for (size_t i = 0; i < b; ++i)
      results[i] =
          run_sample(student, cfg, inputs.views[i], inputs.artifacts[i], l4, l5, with_grad);
  } else {
    // Per-sample graphs are independent; gradients are merged in sample
    // order afterwards, so the result is identical to the serial path.
    std::vector<std::future<void>> futures;
    std::atomic<size_t> next{0};
    auto worker = [&]() {
      for (;;) {
        size_t i = next.fetch_add(1);
        if (i >= b) return;
        results[i] =
            run_sample(student, cfg, inputs.views[i], inputs.artifacts[i], l4, l5, with_grad);
      }
    };
    for (int t = 0; t < std::min<int>(threads, static_cast<int>(b)); ++t)
      futures.push_back(std::async(std::launch::async, worker));
    for (auto& f : futures) f.get();
  }
  return results;
}

}  // namespace

void TrainConfig::validate() const {
  if (iterations < 0) throw ConfigError("iterations must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (warmup_iters < 0 || warmup_iters > iterations)
    throw ConfigError("warmup_iters must lie in [0, iterations]");
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("mask_ratio must be in (0,1)");
  if (!(0.0 < beta_low && beta_low < beta_high && beta_high < 1.0))
    throw ConfigError("need 0 < beta_low < beta_high < 1");
  if (!(tau_student > 0.0) || !(tau_teacher > 0.0))
    throw ConfigError("temperatures must be positive");
  for (double m : {center_momentum, proj_momentum, enc_momentum})
    if (!(m >= 0.0 && m <= 1.0)) throw ConfigError("momenta must lie in [0,1]");
  for (double l : lambdas)
    if (l < 0.0) throw ConfigError("lambda weights must be non-negative");
  if (encoder.image_size % encoder.patch_size != 0)
    throw ConfigError("image_size must be a multiple of patch_size");
  if (encoder.dim % encoder.heads != 0)
    throw ConfigError("embed_dim must be divisible by heads");
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (agg_blocks < 1) throw ConfigError("agg_blocks must be >= 1");
  if (max_affinity_pairs < 0) throw ConfigError("max_affinity_pairs must be >= 0");
  if (threads < 0) throw ConfigError("threads must be >= 0");
}

double lr_schedule(int64_t t, const TrainConfig& cfg) {
  if (cfg.warmup_iters > 0 && t < cfg.warmup_iters)
    return cfg.base_lr * static_cast<double>(t) / static_cast<double>(cfg.warmup_iters);
  const int64_t total = std::max<int64_t>(cfg.iterations - cfg.warmup_iters, 1);
  double p = static_cast<double>(std::min<int64_t>(t - cfg.warmup_iters, total)) /
             static_cast<double>(total);
  if (cfg.lr_schedule == LrScheduleKind::kCosine)
    return cfg.base_lr * 0.5 * (1.0 + std::cos(M_PI * p));
  return cfg.base_lr * std::pow(1.0 - p, 0.9);
}

double momentum_schedule(int64_t t, const TrainConfig& cfg) {
  const double total = std::max(cfg.iterations, 1);
  double cosine = 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(t) / total));
  return 1.0 - (1.0 - cfg.proj_momentum) * cosine;
}

double lambda45_factor(int64_t t, const TrainConfig& cfg) {
  if (!cfg.lambda45_cosine_decay) return 1.0;
  const double total = std::max(cfg.iterations, 1);
  return 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(t) / total));
}

void StudentParams::visit(const std::string& prefix, const ParamVisitor& fn) {
  encoder.visit(prefix + "encoder.", fn);
  classifier.visit(prefix + "classifier.", fn);
  decoder.visit(prefix + "decoder.", fn);
  aggregation.visit(prefix + "aggregation.", fn);
  projector.visit(prefix + "projector.", fn);
}

TrainerState TrainerState::init(const TrainConfig& cfg) {
  cfg.validate();
  TrainerState state;
  state.cfg = cfg;
  Rng rng = make_rng(mix_seed(cfg.seed, 0x1717ULL));
  state.student.encoder = EncoderParams::init(cfg.encoder, rng);
  state.student.classifier = ClassifierParams::init(cfg.num_classes, cfg.encoder.dim, rng);
  state.student.decoder = DecoderParams::init(cfg.decoder_config(), rng);
  state.student.aggregation = AggregationParams::init(cfg.aggregation_config(), rng);
  ProjectorConfig pc = cfg.projector_config();
  state.student.projector = ProjectorParams::init(pc, rng);
  state.teacher = TeacherState::from_student(state.student.encoder, state.student.aggregation,
                                             state.student.projector);
  state.iter = 0;
  return state;
}

FixedStepInputs prepare_step_inputs(const TrainerState& state,
                                    const std::vector<synthdata::LabeledImage>& train_set) {
  const TrainConfig& cfg = state.cfg;
  if (train_set.empty()) throw DataError("prepare_step_inputs: empty training set");
  const int n = static_cast<int>(train_set.size());
  const int grid = cfg.encoder.grid();
  const int tokens = cfg.encoder.tokens();

  const double f = lambda45_factor(state.iter, cfg);
  const double l4 = cfg.lambdas[3] * f;
  const double l5 = cfg.lambdas[4] * f;
  const bool distill = (l4 != 0.0 || l5 != 0.0);

  FixedStepInputs out;
  out.iter = state.iter;

  int64_t epoch_cached = -1;
  std::vector<int> order;
  for (int i = 0; i < cfg.batch_size; ++i) {
    const int64_t pos = state.iter * cfg.batch_size + i;
    const int64_t epoch = pos / n;
    if (epoch != epoch_cached) {
      order = synthdata::epoch_order(n, cfg.seed, static_cast<int>(epoch));
      epoch_cached = epoch;
    }
    const synthdata::LabeledImage& img = order.empty()
                                             ? train_set[0]
                                             : train_set[static_cast<size_t>(
                                                   order[static_cast<size_t>(pos % n)])];

    Rng aug_rng = make_rng(mix_seed(mix_seed(cfg.seed, kAugmentStream),
                                    static_cast<uint64_t>(pos)));
    synthdata::AugmentConfig acfg;
    acfg.out_size = cfg.encoder.image_size;
    synthdata::ViewPair vp = synthdata::augment_two_views(img, acfg, aug_rng);

    Rng art_rng = make_rng(mix_seed(mix_seed(cfg.seed, kArtifactStream),
                                    static_cast<uint64_t>(pos)));

    // Student view-1 forward (values only) to derive CAM-based artifacts.
    StudentParams& student = const_cast<StudentParams&>(state.student);
    MatrixXd emb1 = patchify_embed(vp.view1, student.encoder);
    MatrixXd z1 = transformer_forward(emb1, student.encoder);
    Cam cam = compute_cam(z1, student.classifier.w, grid, grid);

    StepArtifacts art;
    art.pseudo = derive_pseudo_labels(cam, vp.labels, cfg.beta_low, cfg.beta_high);
    art.mask = empty_mask(tokens);

    if (distill) {
      switch (cfg.masking) {
        case MaskingStrategy::kUncertain: {
          VectorXd soft = score_uncertainty(cam, cfg.beta_low, cfg.beta_high, art_rng);
          art.mask = select_mask(soft, cfg.mask_ratio);
          break;
        }
        case MaskingStrategy::kRandom:
          art.mask = random_mask(tokens, cfg.mask_ratio, art_rng);
          break;
        case MaskingStrategy::kNone:
          break;
      }
      for (size_t j = 0; j < art.mask.binary.size(); ++j)
        if (art.mask.binary[j]) art.masked_indices.push_back(static_cast<int>(j));

      const TeacherState& teacher = state.teacher;
      // With encoder momentum 0 the teacher encoder is synchronized with the
      // student, so the student's view-1 embeddings are reused verbatim.
      MatrixXd z1t = cfg.enc_momentum == 0.0
                         ? z1
                         : transformer_forward(patchify_embed(vp.view1, teacher.encoder),
                                               teacher.encoder);
      MatrixXd z2t = transformer_forward(patchify_embed(vp.view2, teacher.encoder),
                                         teacher.encoder);

      MaskPair nomask = empty_mask(tokens);
      MatrixXd cls1, cls2;
      switch (cfg.aggregation) {
        case AggregationKind::kMca:
          cls1 = aggregate_class_token(z1t, nomask, teacher.aggregation);
          cls2 = aggregate_class_token(z2t, nomask, teacher.aggregation);
          break;
        case AggregationKind::kGap:
          cls1 = pool_gap(z1t, nomask);
          cls2 = pool_gap(z2t, nomask);
          break;
        case AggregationKind::kGmp:
          cls1 = pool_gmp(z1t, nomask);
          cls2 = pool_gmp(z2t, nomask);
          break;
      }

      MatrixXd logits1 = projector_logits(cls1, teacher.projector);
      MatrixXd rows2(1 + art.mask.k, cfg.encoder.dim);
      rows2.row(0) = cls2.row(0);
      for (int j = 0; j < art.mask.k; ++j)
        rows2.row(1 + j) = z2t.row(art.masked_indices[static_cast<size_t>(j)]);
      MatrixXd logits2 = projector_logits(rows2, teacher.projector);

      art.teacher_p1_cls = sharpen_rows(logits1, teacher.center, cfg.tau_teacher);
      MatrixXd p2 = sharpen_rows(logits2, teacher.center, cfg.tau_teacher);
      art.teacher_p2_masked = p2.bottomRows(art.mask.k);

      art.teacher_center_logits.resize(logits1.rows() + logits2.rows(), logits1.cols());
      art.teacher_center_logits.topRows(logits1.rows()) = logits1;
      art.teacher_center_logits.bottomRows(logits2.rows()) = logits2;
    }

    art.pairs = sample_affinity_pairs(art.pseudo, cfg.max_affinity_pairs, art_rng);
    out.views.push_back(std::move(vp));
    out.artifacts.push_back(std::move(art));
  }
  return out;
}

LossBreakdown eval_total_loss(StudentParams& student, const TrainConfig& cfg,
                              const FixedStepInputs& inputs) {
  const double f = lambda45_factor(inputs.iter, cfg);
  const double l4 = cfg.lambdas[3] * f;
  const double l5 = cfg.lambdas[4] * f;
  auto results = run_batch(student, cfg, inputs, l4, l5, /*with_grad=*/false);
  return reduce_losses(results, cfg, l4, l5);
}

LossBreakdown accumulate_gradients(StudentParams& student, const TrainConfig& cfg,
                                   const FixedStepInputs& inputs,
                                   std::map<std::string, MatrixXd>& grads) {
  const double f = lambda45_factor(inputs.iter, cfg);
  const double l4 = cfg.lambdas[3] * f;
  const double l5 = cfg.lambdas[4] * f;
  auto results = run_batch(student, cfg, inputs, l4, l5, /*with_grad=*/true);
  const double inv_b = 1.0 / static_cast<double>(results.size());
  for (const auto& r : results) {
    for (const auto& [name, g] : r.grads) {
      auto it = grads.find(name);
      if (it == grads.end())
        grads.emplace(name, g * inv_b);
      else
        it->second += g * inv_b;
    }
  }
  return reduce_losses(results, cfg, l4, l5);
}

StepLog train_step(TrainerState& state, const std::vector<synthdata::LabeledImage>& train_set) {
  const TrainConfig& cfg = state.cfg;
  FixedStepInputs inputs = prepare_step_inputs(state, train_set);
  std::map<std::string, MatrixXd> grads;
  LossBreakdown losses = accumulate_gradients(state.student, cfg, inputs, grads);

  check_finite("cls", losses.cls, state.iter);
  check_finite("aff", losses.aff, state.iter);
  check_finite("seg", losses.seg, state.iter);
  check_finite("u", losses.u, state.iter);
  check_finite("c", losses.c, state.iter);
  check_finite("total", losses.total, state.iter);

  const double lr = lr_schedule(state.iter, cfg);
  state.student.visit("", [&](const std::string& name, MatrixXd& p) {
    auto it = grads.find(name);
    if (it == grads.end()) return;
    const MatrixXd& g = it->second;
    if (g.size() == 0 || (g.array() == 0.0).all()) return;  // untouched this step
    AdamMoments& mm = state.opt[name];
    if (mm.m.size() == 0) {
      mm.m = MatrixXd::Zero(p.rows(), p.cols());
      mm.v = MatrixXd::Zero(p.rows(), p.cols());
    }
    mm.t += 1;
    mm.m = cfg.beta1 * mm.m + (1.0 - cfg.beta1) * g;
    mm.v = cfg.beta2 * mm.v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(mm.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(mm.t));
    MatrixXd mhat = mm.m / bc1;
    MatrixXd denom = (mm.v / bc2).cwiseSqrt().array() + cfg.adam_eps;
    p -= lr * (mhat.cwiseQuotient(denom) + cfg.weight_decay * p);
  });

  const double m_proj = momentum_schedule(state.iter, cfg);
  if (distill_active(cfg, state.iter)) {
    ema_update(state.teacher.encoder, state.student.encoder, cfg.enc_momentum);
    ema_update(state.teacher.aggregation, state.student.aggregation, m_proj);
    ema_update(state.teacher.projector, state.student.projector, m_proj);

    Eigen::Index rows = 0;
    for (const auto& a : inputs.artifacts) rows += a.teacher_center_logits.rows();
    if (rows > 0) {
      MatrixXd all(rows, state.teacher.center.size());
      Eigen::Index at = 0;
      for (const auto& a : inputs.artifacts) {
        all.middleRows(at, a.teacher_center_logits.rows()) = a.teacher_center_logits;
        at += a.teacher_center_logits.rows();
      }
      state.teacher.center = update_center(state.teacher.center, all, cfg.center_momentum);
    }
  }

  StepLog log;
  log.iter = state.iter;
  log.lr = lr;
  log.m_proj = m_proj;
  log.losses = losses;
  state.iter += 1;
  return log;
}

void train_loop(TrainerState& state, const std::vector<synthdata::LabeledImage>& train_set,
                int steps, const StepCallback& on_step) {
  for (int s = 0; s < steps; ++s) {
    StepLog log = train_step(state, train_set);
    if (on_step) on_step(log);
  }
}

}  // namespace fsr
