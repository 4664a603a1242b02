#pragma once

#include <Eigen/Dense>
#include <array>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "kinefisher/body_model.hpp"
#include "kinefisher/constants.hpp"
#include "kinefisher/errors.hpp"
#include "kinefisher/fitting.hpp"
#include "kinefisher/pose_distributions.hpp"
#include "kinefisher/so3.hpp"

namespace kinefisher::io {

using nlohmann::json;

/// Shortest decimal that parses back to the same double.
inline std::string format_double(double v) {
  std::array<char, 32> buf{};
  const auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc{}) throw Error("number formatting failed");
  return std::string(buf.data(), end);
}

// ---------------------------------------------------------------------------
// Arrays

inline json to_json(const Mat3& m) {
  const auto a = to_row_major(m);
  return json(std::vector<double>(a.begin(), a.end()));
}

inline Mat3 mat3_from_json(const json& j) {
  const auto a = j.get<std::vector<double>>();
  if (a.size() != 9) throw InvalidArgument("expected 9 entries for a 3x3 matrix");
  return from_row_major(a);
}

inline json to_json(const Eigen::VectorXd& v) {
  return json(std::vector<double>(v.data(), v.data() + v.size()));
}

inline Eigen::VectorXd vector_from_json(const json& j) {
  const auto a = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(a.data(), static_cast<Eigen::Index>(a.size()));
}

/// Row-major nested arrays.
template <typename Derived>
json matrix_to_json(const Eigen::MatrixBase<Derived>& m) {
  json out = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(m.cols());
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[c] = m(r, c);
    out.push_back(row);
  }
  return out;
}

template <typename M>
M matrix_from_json(const json& j, Eigen::Index cols = -1) {
  const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
  if (cols < 0) cols = rows > 0 ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  M out(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto row = j.at(r).get<std::vector<double>>();
    if (static_cast<Eigen::Index>(row.size()) != cols) throw InvalidArgument("ragged matrix in JSON");
    for (Eigen::Index c = 0; c < cols; ++c) out(r, c) = row[c];
  }
  return out;
}

inline json to_json(const Camera& c) { return {{"s", c.s}, {"tx", c.tx}, {"ty", c.ty}}; }

inline Camera camera_from_json(const json& j) {
  return {j.at("s").get<double>(), j.at("tx").get<double>(), j.at("ty").get<double>()};
}

inline json to_json(const AxisAngle& a) { return json({a.v(0), a.v(1), a.v(2)}); }

inline AxisAngle axis_angle_from_json(const json& j) {
  const auto a = j.get<std::vector<double>>();
  if (a.size() != 3) throw InvalidArgument("axis-angle needs 3 entries");
  return {Vec3(a[0], a[1], a[2])};
}

inline json rotations_to_json(std::span<const Rotation> rots) {
  json out = json::array();
  for (const auto& r : rots) out.push_back(to_json(r.matrix()));
  return out;
}

inline std::vector<Rotation> rotations_from_json(const json& j) {
  std::vector<Rotation> out;
  for (const auto& r : j) out.push_back(Rotation::from_matrix(mat3_from_json(r)));
  return out;
}

inline void check_schema(const json& j, const std::string& kind) {
  if (!j.is_object() || !j.contains("schema_version"))
    throw InvalidArgument(kind + ": missing schema_version");
  const int v = j.at("schema_version").get<int>();
  if (v != kSchemaVersion)
    throw InvalidArgument(kind + ": unsupported schema_version " + std::to_string(v));
  if (j.contains("kind") && j.at("kind").get<std::string>() != kind)
    throw InvalidArgument("expected a " + kind + " document, got " + j.at("kind").get<std::string>());
}

inline json header(const std::string& kind) {
  return {{"schema_version", kSchemaVersion}, {"kind", kind}};
}

// ---------------------------------------------------------------------------
// Body model

inline json to_json(const BodyModel& m) {
  json j = header("body_model");
  j["parents"] = m.parents;
  j["names"] = m.names;
  j["template_vertices"] = matrix_to_json(m.template_vertices);
  j["shape_basis"] = matrix_to_json(m.shape_basis);
  j["joint_regressor"] = matrix_to_json(m.joint_regressor);
  j["skin_weights"] = matrix_to_json(m.skin_weights);
  j["faces"] = m.faces;
  return j;
}

inline BodyModel body_model_from_json(const json& j) {
  check_schema(j, "body_model");
  BodyModel m;
  m.parents = j.at("parents").get<std::vector<int>>();
  m.names = j.at("names").get<std::vector<std::string>>();
  m.template_vertices = matrix_from_json<Points3>(j.at("template_vertices"), 3);
  const Eigen::Index nv = m.template_vertices.rows();
  const Eigen::Index nj = static_cast<Eigen::Index>(m.parents.size());
  const auto& basis = j.at("shape_basis");
  m.shape_basis = matrix_from_json<Eigen::MatrixXd>(basis, basis.empty() ? 0 : -1);
  m.joint_regressor = matrix_from_json<Eigen::MatrixXd>(j.at("joint_regressor"), nv);
  m.skin_weights = matrix_from_json<Eigen::MatrixXd>(j.at("skin_weights"), nj);
  m.faces = j.at("faces").get<std::vector<std::array<int, 3>>>();
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Scene

inline json to_json(const Scene& s) {
  json j = header("scene");
  j["canvas"] = s.canvas;
  j["j2d"] = matrix_to_json(s.j2d);
  j["vis"] = s.vis;
  if (s.gt) {
    j["gt"] = {{"rots", rotations_to_json(s.gt->rots)},
               {"beta", to_json(s.gt->beta)},
               {"gamma", to_json(s.gt->gamma)},
               {"camera", to_json(s.gt->camera)}};
  }
  return j;
}

inline Scene scene_from_json(const json& j) {
  check_schema(j, "scene");
  Scene s;
  s.canvas = j.at("canvas").get<double>();
  s.j2d = matrix_from_json<Points2>(j.at("j2d"), 2);
  s.vis = j.at("vis").get<std::vector<int>>();
  if (static_cast<Eigen::Index>(s.vis.size()) != s.j2d.rows())
    throw InvalidArgument("scene: vis and j2d lengths differ");
  for (int& w : s.vis) {
    if (w != 0 && w != 1) throw InvalidArgument("scene: vis entries must be 0 or 1");
  }
  if (j.contains("gt") && !j.at("gt").is_null()) {
    const auto& g = j.at("gt");
    s.gt = SceneTruth{rotations_from_json(g.at("rots")), vector_from_json(g.at("beta")),
                      axis_angle_from_json(g.at("gamma")), camera_from_json(g.at("camera"))};
  }
  return s;
}

// ---------------------------------------------------------------------------
// Body distribution

inline json to_json(const BodyDistribution& d) {
  json j = header("body_distribution");
  j["mode"] = to_string(d.mode_flag);
  json joints = json::array();
  for (const auto& f : d.joints) joints.push_back(to_json(f.f()));
  j["joints"] = joints;
  j["shape"] = {{"mu", to_json(d.shape.mu)}, {"sigma2", to_json(d.shape.sigma2)}};
  j["gamma"] = to_json(d.gamma);
  j["camera"] = to_json(d.camera);
  json ctx = json::array();
  for (const auto& list : d.parent_context) {
    json entries = json::array();
    for (const auto& p : list) {
      entries.push_back({{"joint", p.joint},
                         {"u", to_json(p.u.matrix())},
                         {"s", {p.s(0), p.s(1), p.s(2)}},
                         {"mode", p.mode ? to_json(p.mode->matrix()) : json(nullptr)}});
    }
    ctx.push_back(entries);
  }
  j["parent_context"] = ctx;
  return j;
}

/**
 * Checks the document structure without building a distribution. Throws
 * InvalidArgument naming the first problem.
 */
inline void validate_distribution_json(const json& j) {
  check_schema(j, "body_distribution");
  for (const char* key : {"mode", "joints", "shape", "gamma", "camera", "parent_context"})
    if (!j.contains(key)) throw InvalidArgument(std::string("body_distribution: missing ") + key);
  parse_distribution_mode(j.at("mode").get<std::string>());
  for (const auto& f : j.at("joints")) {
    const Mat3 m = mat3_from_json(f);
    if (!m.allFinite()) throw InvalidArgument("body_distribution: non-finite F");
  }
  const auto mu = vector_from_json(j.at("shape").at("mu"));
  const auto s2 = vector_from_json(j.at("shape").at("sigma2"));
  ShapeDist{mu, s2}.validate();
  axis_angle_from_json(j.at("gamma"));
  camera_from_json(j.at("camera"));
  if (j.at("parent_context").size() != j.at("joints").size())
    throw InvalidArgument("body_distribution: parent_context needs one entry per joint");
}

/// Joint distributions are rebuilt at `order`; parent_context is recomputed
/// from them.
inline BodyDistribution distribution_from_json(const json& j, const BodyModel& model,
                                               int order = default_quadrature_order()) {
  validate_distribution_json(j);
  BodyDistribution d;
  d.mode_flag = parse_distribution_mode(j.at("mode").get<std::string>());
  for (const auto& f : j.at("joints")) d.joints.emplace_back(mat3_from_json(f), order);
  d.shape.mu = vector_from_json(j.at("shape").at("mu"));
  d.shape.sigma2 = vector_from_json(j.at("shape").at("sigma2"));
  d.gamma = axis_angle_from_json(j.at("gamma"));
  d.camera = camera_from_json(j.at("camera"));
  check_distribution(model, d);
  refresh_parent_context(model, d);
  return d;
}

// ---------------------------------------------------------------------------
// Files

inline json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InvalidArgument(path + ": " + e.what());
  }
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << text;
  if (!out) throw Error("write failed: " + path);
}

/// Compact by default; manifests are indented for reading.
inline void write_json(const std::string& path, const json& j, int indent = -1) {
  write_text(path, j.dump(indent) + "\n");
}

inline std::string obj_text(const Points3& vertices, const std::vector<std::array<int, 3>>& faces) {
  std::ostringstream os;
  for (Eigen::Index v = 0; v < vertices.rows(); ++v) {
    os << "v " << format_double(vertices(v, 0)) << ' ' << format_double(vertices(v, 1)) << ' '
       << format_double(vertices(v, 2)) << '\n';
  }
  for (const auto& f : faces) os << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
  return os.str();
}

/// step, stage, epoch, total, every loss term, grad_norm, step_size.
inline std::string trace_csv(const std::vector<TraceRow>& trace) {
  std::ostringstream os;
  os << "step,stage,epoch,total";
  for (const auto& n : loss_term_names()) os << ',' << n;
  os << ",grad_norm,step_size\n";
  for (const auto& r : trace) {
    os << r.step << ',' << r.stage << ',' << r.epoch << ',' << format_double(r.report.total);
    for (const auto& n : loss_term_names()) os << ',' << format_double(r.report.term(n));
    os << ',' << format_double(r.report.grad_norm) << ',' << format_double(r.step_size) << '\n';
  }
  return os.str();
}

inline std::string uncertainty_csv(const Eigen::VectorXd& unc, const std::vector<int>& dominant) {
  std::ostringstream os;
  os << "vertex,uncertainty,dominant_joint\n";
  for (Eigen::Index v = 0; v < unc.size(); ++v)
    os << v << ',' << format_double(unc(v)) << ',' << dominant.at(v) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Run manifest

/// Everything needed to replay a command: its argument list with the seed
/// made explicit, the resolved configuration and the files it touched.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;  ///< replayable: includes the resolved --seed
  json config = json::object();
  std::uint64_t seed = 0;
  bool seed_from_entropy = false;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  double wall_time_s = 0.0;
  json extra = json::object();
  std::string library = library_version();
};

inline json to_json(const RunManifest& m) {
  json j = header("run_manifest");
  j["command"] = m.command;
  j["argv"] = m.argv;
  j["config"] = m.config;
  j["seed"] = m.seed;
  j["seed_from_entropy"] = m.seed_from_entropy;
  j["inputs"] = m.inputs;
  j["outputs"] = m.outputs;
  j["wall_time_s"] = m.wall_time_s;
  j["library_version"] = m.library;
  if (!m.extra.empty()) j["extra"] = m.extra;
  return j;
}

inline RunManifest manifest_from_json(const json& j) {
  check_schema(j, "run_manifest");
  RunManifest m;
  m.command = j.at("command").get<std::string>();
  m.argv = j.at("argv").get<std::vector<std::string>>();
  m.config = j.at("config");
  m.seed = j.at("seed").get<std::uint64_t>();
  m.seed_from_entropy = j.at("seed_from_entropy").get<bool>();
  m.inputs = j.at("inputs").get<std::vector<std::string>>();
  m.outputs = j.at("outputs").get<std::vector<std::string>>();
  m.wall_time_s = j.at("wall_time_s").get<double>();
  m.library = j.at("library_version").get<std::string>();
  if (j.contains("extra")) m.extra = j.at("extra");
  return m;
}

inline std::string manifest_path(const std::string& output) { return output + ".manifest.json"; }

inline json to_json(const FitConfig& c) {
  return {{"steps", c.steps},
          {"stage_steps", c.stage_steps},
          {"polish", c.polish},
          {"samples", c.samples},
          {"kl_weight", c.kl_weight},
          {"sample_weight", c.sample_weight},
          {"mode_weight", c.mode_weight},
          {"learning_rate", c.learning_rate},
          {"lr_increase", c.lr_increase},
          {"lr_decrease", c.lr_decrease},
          {"max_backtracks", c.max_backtracks},
          {"tolerance", c.tolerance},
          {"patience", c.patience},
          {"resample_every", c.resample_every},
          {"max_epochs", c.max_epochs},
          {"seed", c.seed},
          {"mode", to_string(c.mode)},
          {"quadrature_order", c.quadrature_order},
          {"init_f", c.init_f},
          {"init_jitter", c.init_jitter},
          {"shape_prior_std", c.shape_prior_std},
          {"sampler_b", c.sampler_b ? json(*c.sampler_b) : json(nullptr)}};
}

}  // namespace kinefisher::io
