// fsr command-line interface: dataset generation, training, evaluation,
// analysis, and CAM export. Exit codes: 0 success, 1 validation error,
// 2 runtime/numeric failure.

#include "fsr/checkpoint.hpp"
#include "fsr/config.hpp"
#include "fsr/evalkit.hpp"
#include "fsr/synthdata.hpp"
#include "fsr/trainer.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::string checkpoint;
  std::string split = "val";
  std::string kind = "entropy";
};

fsr::RunConfig load_config_or_sibling(const CommonArgs& args) {
  if (!args.config_path.empty())
    return fsr::load_run_config(args.config_path, args.sets);
  if (!args.checkpoint.empty()) {
    fs::path sibling = fs::path(args.checkpoint).parent_path() / "config.json";
    if (fs::exists(sibling)) return fsr::load_run_config(sibling, args.sets);
    throw fsr::ConfigError("no --config given and no config snapshot found at " +
                           sibling.string());
  }
  throw fsr::ConfigError("missing --config");
}

void write_snapshot(const fsr::RunConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream f(dir / "config.json");
  if (!f) throw fsr::DataError("cannot write config snapshot under " + dir.string());
  f << cfg.to_json().dump(2) << "\n";
}

json report_to_json(const fsr::EvalReport& rep) {
  return json{{"split", rep.split},
              {"miou_pseudo", rep.miou_pseudo},
              {"miou_pred", rep.miou_pred},
              {"per_class", rep.per_class_pseudo},
              {"per_class_pred", rep.per_class_pred}};
}

int cmd_gen_data(const CommonArgs& args) {
  fsr::RunConfig cfg = fsr::load_run_config(args.config_path, args.sets);
  fsr::synthdata::generate_dataset(cfg.dataset_config());
  write_snapshot(cfg, cfg.data_dir);
  std::cout << "dataset written to " << cfg.data_dir << "\n";
  return 0;
}

int cmd_train(const CommonArgs& args) {
  fsr::RunConfig cfg = fsr::load_run_config(args.config_path, args.sets);
  const fs::path run_dir = cfg.resolved_run_dir();
  write_snapshot(cfg, run_dir);

  auto train_set = fsr::synthdata::load_dataset(cfg.data_dir, "train");
  fsr::TrainerState state = fsr::TrainerState::init(cfg.train_config());
  const std::string hash = fsr::config_hash(cfg);

  std::ofstream metrics(run_dir / "metrics.jsonl");
  if (!metrics) throw fsr::DataError("cannot write metrics log under " + run_dir.string());

  fsr::train_loop(state, train_set, cfg.iterations, [&](const fsr::StepLog& log) {
    json line = {{"iter", log.iter},         {"lr", log.lr},
                 {"m_proj", log.m_proj},     {"cls", log.losses.cls},
                 {"aff", log.losses.aff},    {"seg", log.losses.seg},
                 {"u", log.losses.u},        {"c", log.losses.c},
                 {"total", log.losses.total}};
    metrics << line.dump() << "\n";
    if (cfg.checkpoint_every > 0 && (log.iter + 1) % cfg.checkpoint_every == 0)
      fsr::save_checkpoint(run_dir / ("checkpoint_it" + std::to_string(log.iter + 1)), state,
                           hash);
  });
  fsr::save_checkpoint(run_dir / "checkpoint", state, hash);

  auto eval_set = fsr::synthdata::load_dataset(cfg.data_dir, cfg.eval_split);
  fsr::EvalReport rep = fsr::evaluate_split(state, eval_set, cfg.eval_split);
  std::ofstream rf(run_dir / ("eval_" + cfg.eval_split + ".json"));
  rf << report_to_json(rep).dump(2) << "\n";
  std::cout << "miou_pseudo=" << rep.miou_pseudo << " miou_pred=" << rep.miou_pred
            << " run_dir=" << run_dir.string() << "\n";
  return 0;
}

int cmd_eval(const CommonArgs& args) {
  fsr::RunConfig cfg = load_config_or_sibling(args);
  if (args.checkpoint.empty()) throw fsr::ConfigError("eval requires --checkpoint");
  fsr::TrainerState state =
      fsr::load_checkpoint(args.checkpoint, cfg.train_config(), /*expected_hash=*/"");
  auto images = fsr::synthdata::load_dataset(cfg.data_dir, args.split);
  fsr::EvalReport rep = fsr::evaluate_split(state, images, args.split);
  fs::path out = fs::path(args.checkpoint).parent_path() / ("eval_" + args.split + ".json");
  std::ofstream rf(out);
  rf << report_to_json(rep).dump(2) << "\n";
  std::cout << report_to_json(rep).dump(2) << "\n";
  return 0;
}

int cmd_analyze(const CommonArgs& args) {
  fsr::RunConfig cfg = load_config_or_sibling(args);
  if (args.checkpoint.empty()) throw fsr::ConfigError("analyze requires --checkpoint");
  if (args.kind != "entropy" && args.kind != "cka")
    throw fsr::ConfigError("analyze kind must be 'entropy' or 'cka' (got '" + args.kind + "')");
  fsr::TrainerState state = fsr::load_checkpoint(args.checkpoint, cfg.train_config(), "");
  auto images = fsr::synthdata::load_dataset(cfg.data_dir, cfg.eval_split);
  fsr::AnalysisProfiles prof =
      fsr::analyze_attention_and_cka(state, images, cfg.analyze_images);

  json out;
  if (args.kind == "entropy") {
    out["entropy_per_layer_head"] = prof.entropy;
  } else {
    std::vector<std::vector<double>> rows;
    for (Eigen::Index i = 0; i < prof.cka_layers.rows(); ++i) {
      std::vector<double> r;
      for (Eigen::Index j = 0; j < prof.cka_layers.cols(); ++j)
        r.push_back(prof.cka_layers(i, j));
      rows.push_back(std::move(r));
    }
    out["cka_layers"] = rows;
  }
  fs::path outfile =
      fs::path(args.checkpoint).parent_path() / ("analysis_" + args.kind + ".json");
  std::ofstream f(outfile);
  f << out.dump(2) << "\n";
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_export_cam(const CommonArgs& args) {
  fsr::RunConfig cfg = load_config_or_sibling(args);
  if (args.checkpoint.empty()) throw fsr::ConfigError("export-cam requires --checkpoint");
  fsr::TrainerState state = fsr::load_checkpoint(args.checkpoint, cfg.train_config(), "");
  auto images = fsr::synthdata::load_dataset(cfg.data_dir, args.split);
  fs::path outdir = fs::path(args.checkpoint).parent_path() / ("cam_" + args.split);
  fsr::export_cam_maps(state, images, outdir);
  std::cout << "CAM maps written to " << outdir.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fsr: single-stage weakly supervised segmentation with "
               "progressive feature self-reinforcement"};
  app.require_subcommand(1);

  CommonArgs args;
  auto add_common = [&](CLI::App* sub, bool with_checkpoint) {
    sub->add_option("--config", args.config_path, "JSON config file");
    sub->add_option("--set", args.sets, "override config field, key=value")->take_all();
    if (with_checkpoint) {
      sub->add_option("--checkpoint", args.checkpoint, "checkpoint directory");
      sub->add_option("--split", args.split, "dataset split (train|val)");
    }
  };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic shapes dataset");
  add_common(gen, false);
  auto* train = app.add_subcommand("train", "train the model end to end");
  add_common(train, false);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  add_common(eval, true);
  auto* analyze = app.add_subcommand("analyze", "attention-entropy / CKA analysis");
  add_common(analyze, true);
  analyze->add_option("--kind", args.kind, "entropy or cka");
  auto* exportc = app.add_subcommand("export-cam", "export CAM heat maps and pseudo labels");
  add_common(exportc, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(args);
    if (train->parsed()) return cmd_train(args);
    if (eval->parsed()) return cmd_eval(args);
    if (analyze->parsed()) return cmd_analyze(args);
    if (exportc->parsed()) return cmd_export_cam(args);
    return 1;
  } catch (const fsr::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const fsr::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 1;
  } catch (const fsr::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
