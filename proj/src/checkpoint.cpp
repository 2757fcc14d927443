#include "fsr/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <fstream>

namespace fsr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TensorRef {
  std::string name;
  const MatrixXd* matrix;
};

// Fixed serialization order: student, teacher, center, optimizer moments.
std::vector<TensorRef> collect_tensors(const TrainerState& state, MatrixXd& center_storage) {
  std::vector<TensorRef> out;
  auto& st = const_cast<TrainerState&>(state);
  st.student.visit("student.", [&](const std::string& n, MatrixXd& m) {
    out.push_back({n, &m});
  });
  st.teacher.encoder.visit("teacher.encoder.", [&](const std::string& n, MatrixXd& m) {
    out.push_back({n, &m});
  });
  st.teacher.aggregation.visit("teacher.aggregation.", [&](const std::string& n, MatrixXd& m) {
    out.push_back({n, &m});
  });
  st.teacher.projector.visit("teacher.projector.", [&](const std::string& n, MatrixXd& m) {
    out.push_back({n, &m});
  });
  center_storage = state.teacher.center;
  out.push_back({"teacher.center", &center_storage});
  for (auto& [name, mm] : st.opt) {
    out.push_back({"opt.m." + name, &mm.m});
    out.push_back({"opt.v." + name, &mm.v});
  }
  return out;
}

void write_matrix(std::ofstream& f, const MatrixXd& m) {
  // Row-major element order, little-endian float64 (native on x86).
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      double v = m(i, j);
      f.write(reinterpret_cast<const char*>(&v), sizeof(double));
    }
}

MatrixXd read_matrix(std::ifstream& f, Eigen::Index rows, Eigen::Index cols,
                     const std::string& name) {
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) {
      double v;
      f.read(reinterpret_cast<char*>(&v), sizeof(double));
      if (!f) throw DataError("checkpoint params.bin truncated while reading " + name);
      m(i, j) = v;
    }
  return m;
}

}  // namespace

void save_checkpoint(const fs::path& dir, const TrainerState& state,
                     const std::string& config_hash) {
  fs::create_directories(dir);
  MatrixXd center_storage;
  auto tensors = collect_tensors(state, center_storage);

  json manifest = json::array();
  for (const auto& t : tensors)
    manifest.push_back({{"name", t.name},
                        {"shape", {t.matrix->rows(), t.matrix->cols()}},
                        {"dtype", "float64"}});
  std::ofstream mf(dir / "manifest.json");
  if (!mf) throw DataError("cannot write " + (dir / "manifest.json").string());
  mf << manifest.dump(1) << "\n";

  std::ofstream pf(dir / "params.bin", std::ios::binary);
  if (!pf) throw DataError("cannot write " + (dir / "params.bin").string());
  for (const auto& t : tensors) write_matrix(pf, *t.matrix);

  json opt_steps = json::object();
  for (const auto& [name, mm] : state.opt) opt_steps[name] = mm.t;
  json rng = {{"iteration", state.iter},
              {"config_hash", config_hash},
              {"run_seed", state.cfg.seed},
              {"opt_steps", opt_steps}};
  std::ofstream rf(dir / "rng.json");
  rf << rng.dump(1) << "\n";
}

TrainerState load_checkpoint(const fs::path& dir, const TrainConfig& cfg,
                             const std::string& expected_hash) {
  std::ifstream rf(dir / "rng.json");
  if (!rf) throw DataError("missing checkpoint file " + (dir / "rng.json").string());
  json rng = json::parse(rf, nullptr, false);
  if (rng.is_discarded()) throw DataError("malformed rng.json in " + dir.string());

  const std::string stored_hash = rng.at("config_hash").get<std::string>();
  if (!expected_hash.empty() && stored_hash != expected_hash)
    throw DataError("checkpoint config hash " + stored_hash + " does not match expected " +
                    expected_hash);

  TrainerState state = TrainerState::init(cfg);
  state.iter = rng.at("iteration").get<int64_t>();
  if (rng.at("run_seed").get<uint64_t>() != cfg.seed)
    throw DataError("checkpoint run seed does not match config seed");

  // Pre-create optimizer slots so moment tensors have a destination.
  for (auto& [name, steps] : rng.at("opt_steps").items()) {
    AdamMoments mm;
    mm.t = steps.get<int64_t>();
    state.opt.emplace(name, std::move(mm));
  }

  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw DataError("missing checkpoint file " + (dir / "manifest.json").string());
  json manifest = json::parse(mf, nullptr, false);
  if (manifest.is_discarded() || !manifest.is_array())
    throw DataError("malformed manifest.json in " + dir.string());

  // Name -> destination map over the freshly initialized state.
  std::map<std::string, MatrixXd*> dst;
  state.student.visit("student.", [&](const std::string& n, MatrixXd& m) { dst[n] = &m; });
  state.teacher.encoder.visit("teacher.encoder.",
                              [&](const std::string& n, MatrixXd& m) { dst[n] = &m; });
  state.teacher.aggregation.visit("teacher.aggregation.",
                                  [&](const std::string& n, MatrixXd& m) { dst[n] = &m; });
  state.teacher.projector.visit("teacher.projector.",
                                [&](const std::string& n, MatrixXd& m) { dst[n] = &m; });
  MatrixXd center_storage;
  for (auto& [name, mm] : state.opt) {
    dst["opt.m." + name] = &mm.m;
    dst["opt.v." + name] = &mm.v;
  }

  std::ifstream pf(dir / "params.bin", std::ios::binary);
  if (!pf) throw DataError("missing checkpoint file " + (dir / "params.bin").string());
  for (const auto& entry : manifest) {
    const std::string name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<Eigen::Index>>();
    const std::string dtype = entry.at("dtype").get<std::string>();
    if (dtype != "float64") throw DataError("unsupported dtype " + dtype + " for " + name);
    if (shape.size() != 2) throw DataError("bad shape for " + name);
    MatrixXd m = read_matrix(pf, shape[0], shape[1], name);
    if (name == "teacher.center") {
      state.teacher.center = m;
      continue;
    }
    auto it = dst.find(name);
    if (it == dst.end()) throw DataError("checkpoint tensor " + name + " has no destination");
    if (it->second->rows() != m.rows() || it->second->cols() != m.cols())
      throw DataError("checkpoint tensor " + name + " shape mismatch");
    *it->second = std::move(m);
  }
  return state;
}

}  // namespace fsr
