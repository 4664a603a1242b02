#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kinefisher/constants.hpp"
#include "kinefisher/errors.hpp"
#include "kinefisher/rng.hpp"
#include "kinefisher/so3.hpp"

namespace kinefisher {

using Points3 = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Points2 = Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>;

/// Weak-perspective camera: pixel = s * (x, y) + (tx, ty).
struct Camera {
  double s = 1.0;
  double tx = 0.0;
  double ty = 0.0;
};

/**
 * Skinned body with a linear shape space.
 *
 * shape_basis is stored as a (3V x B) matrix: row 3v + c holds the
 * displacement of coordinate c of vertex v per unit of each shape coefficient.
 */
struct BodyModel {
  Points3 template_vertices;
  Eigen::MatrixXd shape_basis;
  std::vector<int> parents;
  Eigen::MatrixXd joint_regressor;  ///< J x V
  Eigen::MatrixXd skin_weights;     ///< V x J
  std::vector<std::string> names;
  std::vector<std::array<int, 3>> faces;

  [[nodiscard]] int num_joints() const { return static_cast<int>(parents.size()); }
  [[nodiscard]] int num_vertices() const { return static_cast<int>(template_vertices.rows()); }
  [[nodiscard]] int num_betas() const { return static_cast<int>(shape_basis.cols()); }

  [[nodiscard]] int joint_index(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<int>(i);
    throw InvalidArgument("unknown joint name: " + std::string(name));
  }

  [[nodiscard]] std::vector<std::vector<int>> children() const {
    std::vector<std::vector<int>> out(parents.size());
    for (int i = 1; i < num_joints(); ++i) out[parents[i]].push_back(i);
    return out;
  }

  [[nodiscard]] std::vector<int> depths() const {
    std::vector<int> d(parents.size(), 0);
    for (int i = 1; i < num_joints(); ++i) d[i] = d[parents[i]] + 1;
    return d;
  }

  [[nodiscard]] bool is_descendant(int joint, int ancestor) const {
    for (int j = joint; j >= 0; j = parents[j])
      if (j == ancestor) return true;
    return false;
  }

  /// Throws InvalidArgument if any structural invariant fails.
  void validate() const {
    const int nj = num_joints();
    const int nv = num_vertices();
    if (nj < 1 || parents[0] != -1) throw InvalidArgument("parents[0] must be -1");
    for (int i = 1; i < nj; ++i) {
      if (parents[i] < 0 || parents[i] >= i)
        throw InvalidArgument("parents must be topologically ordered");
    }
    if (shape_basis.rows() != 3 * nv) throw InvalidArgument("shape basis has wrong row count");
    if (joint_regressor.rows() != nj || joint_regressor.cols() != nv)
      throw InvalidArgument("joint regressor must be J x V");
    if (skin_weights.rows() != nv || skin_weights.cols() != nj)
      throw InvalidArgument("skin weights must be V x J");
    if (!names.empty() && static_cast<int>(names.size()) != nj)
      throw InvalidArgument("names must have one entry per joint");
    const auto stochastic = [](const Eigen::MatrixXd& m, const char* what) {
      if (!m.allFinite() || m.minCoeff() < 0.0)
        throw InvalidArgument(std::string(what) + " must be finite and nonnegative");
      for (Eigen::Index r = 0; r < m.rows(); ++r) {
        if (std::abs(m.row(r).sum() - 1.0) > kTol.stochastic_rows)
          throw InvalidArgument(std::string(what) + " rows must sum to 1");
      }
    };
    stochastic(joint_regressor, "joint regressor");
    stochastic(skin_weights, "skin weights");
    for (const auto& f : faces)
      for (int v : f)
        if (v < 0 || v >= nv) throw InvalidArgument("face index out of range");
  }
};

struct ToyModelConfig {
  int num_joints = 16;
  int vertices_per_bone = 12;
  std::uint64_t seed = 0;
  int num_betas = kDefaultNumBetas;
};

namespace detail {

struct Segment {
  int parent_joint;
  int child_joint;  ///< -1 for a leaf tip segment
  int start_node;
  int end_node;
  double radius;
};

struct Skeleton {
  std::vector<int> parents;
  std::vector<std::string> names;
  std::vector<Vec3> nodes;       ///< joints first, then leaf tips
  std::vector<int> node_owner;   ///< joint owning each node (tips: their leaf)
  std::vector<double> radius;    ///< radius of the segment ending at each non-root node
};

inline Skeleton default_skeleton() {
  Skeleton sk;
  sk.parents = {-1, 0, 1, 2, 2, 4, 5, 2, 7, 8, 0, 10, 11, 0, 13, 14};
  sk.names = {"root",       "spine1",  "spine2",  "head",    "l_shoulder", "l_elbow",
              "l_wrist",    "r_shoulder", "r_elbow", "r_wrist", "l_hip",      "l_knee",
              "l_ankle",    "r_hip",   "r_knee",  "r_ankle"};
  sk.nodes = {{0, 0, 0},        {0, .12, 0},       {0, .30, 0},      {0, .52, 0},
              {.18, .42, 0},    {.45, .42, 0},     {.70, .42, 0},    {-.18, .42, 0},
              {-.45, .42, 0},   {-.70, .42, 0},    {.09, -.08, 0},   {.10, -.50, 0},
              {.10, -.90, 0},   {-.09, -.08, 0},   {-.10, -.50, 0},  {-.10, -.90, 0},
              // tips: head, hands, feet
              {0, .72, 0},      {.88, .42, 0},     {-.88, .42, 0},   {.10, -.95, .15},
              {-.10, -.95, .15}};
  sk.node_owner = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 3, 6, 9, 12, 15};
  sk.radius = {0.0,   0.09,  0.10,  0.05,  0.05,  0.045, 0.04,  0.05,  0.045, 0.04, 0.07,
               0.07,  0.055, 0.07,  0.07,  0.055, 0.09,  0.035, 0.035, 0.04,  0.04};
  return sk;
}

inline Skeleton procedural_skeleton(int num_joints, RngStream rng) {
  Skeleton sk;
  sk.parents.assign(num_joints, -1);
  sk.nodes.assign(num_joints, Vec3::Zero());
  sk.radius.assign(num_joints, 0.0);
  for (int i = 0; i < num_joints; ++i) {
    sk.names.push_back(i == 0 ? "root" : "joint_" + std::to_string(i));
    sk.node_owner.push_back(i);
  }
  for (int i = 1; i < num_joints; ++i) {
    const int lo = std::max(0, i - 3);
    sk.parents[i] = lo + static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(i - lo));
    Vec3 dir(rng.normal(), rng.normal(), rng.normal());
    dir.normalize();
    sk.nodes[i] = sk.nodes[sk.parents[i]] + (0.1 + 0.2 * rng.uniform()) * dir;
    sk.radius[i] = 0.03 + 0.02 * rng.uniform();
  }
  std::vector<bool> has_child(num_joints, false);
  for (int i = 1; i < num_joints; ++i) has_child[sk.parents[i]] = true;
  for (int i = 1; i < num_joints; ++i) {
    if (has_child[i]) continue;
    sk.nodes.push_back(sk.nodes[i] + 0.5 * (sk.nodes[i] - sk.nodes[sk.parents[i]]));
    sk.node_owner.push_back(i);
    sk.radius.push_back(0.03 + 0.02 * rng.uniform());
  }
  return sk;
}

// Per-channel node displacements (nodes x 3) and per-segment girth rates.
struct ShapeChannel {
  std::vector<Vec3> node_delta;
  std::vector<double> girth;  ///< indexed by segment end node
};

inline std::vector<ShapeChannel> default_shape_channels(const Skeleton& sk, int num_betas,
                                                        RngStream rng) {
  const int nn = static_cast<int>(sk.nodes.size());
  const int nj = static_cast<int>(sk.parents.size());
  const auto in_subtree = [&](int node, int top) {
    for (int j = sk.node_owner[node]; j >= 0; j = sk.parents[j])
      if (j == top) return true;
    return false;
  };
  const auto strictly_below = [&](int node, int top) { return node != top && in_subtree(node, top); };
  std::vector<ShapeChannel> ch(num_betas);
  for (auto& c : ch) {
    c.node_delta.assign(nn, Vec3::Zero());
    c.girth.assign(nn, 0.0);
  }
  const bool named = nj == 16 && sk.names[4] == "l_shoulder";
  for (int b = 0; b < num_betas; ++b) {
    auto& c = ch[b];
    for (int n = 0; n < nn; ++n) {
      const Vec3& p = sk.nodes[n];
      if (!named) continue;
      switch (b) {
        case 0: c.node_delta[n] = Vec3(0, 0.07 * p.y(), 0); break;
        case 1: if (n > 0) c.girth[n] = 0.12; break;
        case 2:
          for (int s : {4, 7})
            if (strictly_below(n, s)) c.node_delta[n] = 0.08 * (p - sk.nodes[s]);
          break;
        case 3:
          for (int s : {10, 13})
            if (strictly_below(n, s)) c.node_delta[n] = 0.08 * (p - sk.nodes[s]);
          break;
        case 4: if (strictly_below(n, 1)) c.node_delta[n] = Vec3(0, 0.04, 0); break;
        case 5:
          if (in_subtree(n, 4)) c.node_delta[n] = Vec3(0.025, 0, 0);
          if (in_subtree(n, 7)) c.node_delta[n] = Vec3(-0.025, 0, 0);
          break;
        case 6:
          if (in_subtree(n, 10)) c.node_delta[n] = Vec3(0.02, 0, 0);
          if (in_subtree(n, 13)) c.node_delta[n] = Vec3(-0.02, 0, 0);
          break;
        case 7: if (strictly_below(n, 4) || strictly_below(n, 7)) c.girth[n] = 0.18; break;
        case 8: if (strictly_below(n, 10) || strictly_below(n, 13)) c.girth[n] = 0.18; break;
        case 9:
          if (n == 16) c.node_delta[n] = 0.12 * (p - sk.nodes[3]);
          if (n == 16 || n == 3) c.girth[n] = 0.15;
          break;
        default: break;
      }
    }
    if (!named) {
      // Coherent random deformations: each joint's offset accumulates along
      // the chain, so whole subtrees move together.
      for (int n = 1; n < nn; ++n) {
        const int owner = sk.node_owner[n];
        const int base = n < nj ? sk.parents[n] : owner;
        c.node_delta[n] = c.node_delta[base] + 0.01 * Vec3(rng.normal(), rng.normal(), rng.normal());
        c.girth[n] = 0.1 * rng.normal();
      }
    }
    for (int n = 0; n < nn; ++n)
      c.node_delta[n] += 0.004 * Vec3(rng.normal(), rng.normal(), rng.normal());
  }
  return ch;
}

}  // namespace detail

/**
 * Procedural capsule body. The default configuration is a 16-joint humanoid
 * in a T-pose (y up, meters); other joint counts give a seeded random tree.
 *
 * Each bone carries three rings of vertices. The regressor takes joint i as
 * the centroid of the ring that sits on it, and that ring is skinned half to
 * the joint and half to its parent, so regressed posed joints coincide with
 * forward-kinematics joint positions.
 */
inline BodyModel make_toy_model(const ToyModelConfig& cfg = {}) {
  if (cfg.num_joints < 4) throw InvalidArgument("toy model needs at least 4 joints");
  if (cfg.vertices_per_bone < 6 || cfg.vertices_per_bone % 3 != 0)
    throw InvalidArgument("vertices per bone must be a multiple of 3, at least 6");
  if (cfg.num_betas < 1) throw InvalidArgument("toy model needs at least one shape coefficient");
  const RngStream root(cfg.seed, hash_name("toy_model"));
  const detail::Skeleton sk = cfg.num_joints == 16
                                  ? detail::default_skeleton()
                                  : detail::procedural_skeleton(cfg.num_joints, root.split("tree"));
  const auto channels = detail::default_shape_channels(sk, cfg.num_betas, root.split("shape"));

  const int nj = cfg.num_joints;
  const int ring = cfg.vertices_per_bone / 3;
  std::vector<detail::Segment> segs;
  for (int n = 1; n < static_cast<int>(sk.nodes.size()); ++n) {
    const bool tip = n >= nj;
    const int owner = sk.node_owner[n];
    segs.push_back({tip ? owner : sk.parents[n], tip ? -1 : n, tip ? owner : sk.parents[n], n,
                    sk.radius[n]});
  }
  const int nv = static_cast<int>(segs.size()) * 3 * ring;

  BodyModel m;
  m.parents = sk.parents;
  m.names = sk.names;
  m.template_vertices.setZero(nv, 3);
  m.shape_basis.setZero(3 * nv, cfg.num_betas);
  m.skin_weights.setZero(nv, nj);
  m.joint_regressor.setZero(nj, nv);

  int v = 0;
  for (std::size_t g = 0; g < segs.size(); ++g) {
    const auto& sg = segs[g];
    const Vec3 a = sk.nodes[sg.start_node];
    const Vec3 b = sk.nodes[sg.end_node];
    const Vec3 dir = (b - a).normalized();
    Vec3 helper = Vec3::Zero();
    int least = 0;
    dir.cwiseAbs().minCoeff(&least);
    helper(least) = 1.0;
    const Vec3 u = dir.cross(helper).normalized();
    const Vec3 w = dir.cross(u);
    const int first = v;
    for (int r = 0; r < 3; ++r) {
      const double t = 0.5 * r;
      for (int k = 0; k < ring; ++k) {
        const double theta = 2.0 * std::numbers::pi * k / ring;
        const Vec3 offset = sg.radius * (std::cos(theta) * u + std::sin(theta) * w);
        m.template_vertices.row(v) = ((1.0 - t) * a + t * b + offset).transpose();
        for (int c = 0; c < cfg.num_betas; ++c) {
          const auto& chn = channels[c];
          const Vec3 d = (1.0 - t) * chn.node_delta[sg.start_node] +
                         t * chn.node_delta[sg.end_node] + chn.girth[sg.end_node] * offset;
          m.shape_basis.block(3 * v, c, 3, 1) = d;
        }
        if (sg.child_joint < 0) {
          m.skin_weights(v, sg.parent_joint) = 1.0;
        } else if (r == 0) {
          m.skin_weights(v, sg.parent_joint) = 1.0;
        } else if (r == 1) {
          m.skin_weights(v, sg.parent_joint) = 0.9;
          m.skin_weights(v, sg.child_joint) = 0.1;
        } else {
          m.skin_weights(v, sg.parent_joint) = 0.5;
          m.skin_weights(v, sg.child_joint) = 0.5;
        }
        ++v;
      }
    }
    if (sg.child_joint >= 0) {
      for (int k = 0; k < ring; ++k) m.joint_regressor(sg.child_joint, first + 2 * ring + k) = 1.0 / ring;
    }
    if (ring >= 3) {
      for (int r = 0; r < 2; ++r) {
        for (int k = 0; k < ring; ++k) {
          const int k2 = (k + 1) % ring;
          const int p00 = first + r * ring + k, p01 = first + r * ring + k2;
          const int p10 = first + (r + 1) * ring + k, p11 = first + (r + 1) * ring + k2;
          m.faces.push_back({p00, p01, p11});
          m.faces.push_back({p00, p11, p10});
        }
      }
    }
  }
  // Root: centroid of the first rings of its child bones.
  int root_children = 0;
  for (const auto& sg : segs)
    if (sg.child_joint >= 0 && sg.parent_joint == 0) ++root_children;
  v = 0;
  for (const auto& sg : segs) {
    if (sg.child_joint >= 0 && sg.parent_joint == 0) {
      for (int k = 0; k < ring; ++k) m.joint_regressor(0, v + k) = 1.0 / (ring * root_children);
    }
    v += 3 * ring;
  }
  m.validate();
  return m;
}

/// Rest-pose vertices and joints for shape coefficients beta.
struct BodyGeometry {
  Points3 vertices;
  Points3 joints;
};

inline Points3 shaped_vertices(const BodyModel& model, const Eigen::VectorXd& beta) {
  if (beta.size() != model.num_betas())
    throw InvalidArgument("shape vector has " + std::to_string(beta.size()) + " entries, model has " +
                          std::to_string(model.num_betas()));
  const Eigen::VectorXd flat = model.shape_basis * beta;
  Points3 out = model.template_vertices;
  out += Eigen::Map<const Points3>(flat.data(), model.num_vertices(), 3);
  return out;
}

inline BodyGeometry shaped_rest(const BodyModel& model, const Eigen::VectorXd& beta) {
  BodyGeometry g;
  g.vertices = shaped_vertices(model, beta);
  g.joints = model.joint_regressor * g.vertices;
  return g;
}

/// World transforms of every joint: x_posed = rot * (x_rest - rest_joint) + pos.
struct JointTransforms {
  std::vector<Mat3> rot;
  std::vector<Vec3> pos;
};

inline JointTransforms forward_kinematics(const BodyModel& model, std::span<const Rotation> rots,
                                          const AxisAngle& gamma, const Points3& rest_joints) {
  const int nj = model.num_joints();
  if (static_cast<int>(rots.size()) != nj - 1)
    throw InvalidArgument("expected " + std::to_string(nj - 1) + " joint rotations, got " +
                          std::to_string(rots.size()));
  JointTransforms t;
  t.rot.resize(nj);
  t.pos.resize(nj);
  t.rot[0] = axis_angle_to_matrix(gamma).matrix();
  t.pos[0] = rest_joints.row(0).transpose();
  for (int i = 1; i < nj; ++i) {
    const int p = model.parents[i];
    t.rot[i] = t.rot[p] * rots[i - 1].matrix();
    t.pos[i] = t.rot[p] * (rest_joints.row(i) - rest_joints.row(p)).transpose() + t.pos[p];
  }
  return t;
}

inline Points3 skin_vertices(const BodyModel& model, const Points3& rest_vertices,
                             const Points3& rest_joints, const JointTransforms& t) {
  Points3 out = Points3::Zero(rest_vertices.rows(), 3);
  for (int j = 0; j < model.num_joints(); ++j) {
    const Eigen::VectorXd w = model.skin_weights.col(j);
    const Eigen::RowVector3d offset = (t.pos[j] - t.rot[j] * rest_joints.row(j).transpose()).transpose();
    const Points3 moved = (rest_vertices * t.rot[j].transpose()).rowwise() + offset;
    out += w.asDiagonal() * moved;
  }
  return out;
}

/// Linear blend skinning of the shaped body; joints are regressed from the
/// posed vertices.
inline BodyGeometry pose_body(const BodyModel& model, std::span<const Rotation> rots,
                              const AxisAngle& gamma, const Eigen::VectorXd& beta) {
  const BodyGeometry rest = shaped_rest(model, beta);
  const JointTransforms t = forward_kinematics(model, rots, gamma, rest.joints);
  BodyGeometry g;
  g.vertices = skin_vertices(model, rest.vertices, rest.joints, t);
  g.joints = model.joint_regressor * g.vertices;
  return g;
}

inline Points2 project_weak_perspective(const Points3& points, const Camera& cam) {
  Points2 out(points.rows(), 2);
  out.col(0) = cam.s * points.col(0).array() + cam.tx;
  out.col(1) = cam.s * points.col(1).array() + cam.ty;
  return out;
}

/**
 * Posed joints as a function of (rotations, gamma, beta), with a reverse-mode
 * pass. Regressed joints are expanded through the skinning weights:
 *   joint_j = sum_i rot_i (P_ji - M_ji rest_i) + M_ji pos_i,
 * with M = regressor * weights and P_ji = sum_v reg_jv w_vi v(beta), which is
 * exactly the regressor applied to the skinned vertices.
 */
class JointMap {
 public:
  explicit JointMap(const BodyModel& model) : parents_(model.parents) {
    const int nj = model.num_joints();
    const int nb = model.num_betas();
    const int nv = model.num_vertices();
    mix_ = model.joint_regressor * model.skin_weights;
    rest_joints_ = model.joint_regressor * model.template_vertices;
    joint_basis_.resize(3 * nj, nb);
    for (int c = 0; c < 3; ++c) {
      Eigen::MatrixXd basis_c(nv, nb);
      for (int v = 0; v < nv; ++v) basis_c.row(v) = model.shape_basis.row(3 * v + c);
      const Eigen::MatrixXd jb = model.joint_regressor * basis_c;
      for (int j = 0; j < nj; ++j) joint_basis_.row(3 * j + c) = jb.row(j);
    }
    for (int j = 0; j < nj; ++j) {
      for (int i = 0; i < nj; ++i) {
        if (mix_(j, i) == 0.0) continue;
        Term term{j, i, mix_(j, i), Vec3::Zero(), Eigen::Matrix<double, 3, Eigen::Dynamic>::Zero(3, nb)};
        for (int v = 0; v < nv; ++v) {
          const double c = model.joint_regressor(j, v) * model.skin_weights(v, i);
          if (c == 0.0) continue;
          term.p0 += c * model.template_vertices.row(v).transpose();
          for (int k = 0; k < 3; ++k) term.pb.row(k) += c * model.shape_basis.row(3 * v + k);
        }
        terms_.push_back(std::move(term));
      }
    }
  }

  [[nodiscard]] int num_joints() const { return static_cast<int>(parents_.size()); }

  struct Tape {
    Eigen::VectorXd beta;
    Points3 rest;
    JointTransforms fk;
    std::vector<Vec3> p;  ///< per term
    std::vector<Mat3> local;
    AxisAngle gamma;
  };

  /// Posed joints (J x 3); fills `tape` for backward() when given.
  Points3 forward(std::span<const Mat3> rots, const AxisAngle& gamma, const Eigen::VectorXd& beta,
                  Tape* tape = nullptr) const {
    const int nj = num_joints();
    Tape local_tape;
    Tape& t = tape ? *tape : local_tape;
    t.beta = beta;
    t.gamma = gamma;
    t.local.assign(rots.begin(), rots.end());
    const Eigen::VectorXd flat = joint_basis_ * beta;
    t.rest = rest_joints_ + Eigen::Map<const Points3>(flat.data(), nj, 3);
    t.fk.rot.resize(nj);
    t.fk.pos.resize(nj);
    t.fk.rot[0] = axis_angle_to_matrix(gamma).matrix();
    t.fk.pos[0] = t.rest.row(0).transpose();
    for (int i = 1; i < nj; ++i) {
      const int p = parents_[i];
      t.fk.rot[i] = t.fk.rot[p] * rots[i - 1];
      t.fk.pos[i] = t.fk.rot[p] * (t.rest.row(i) - t.rest.row(p)).transpose() + t.fk.pos[p];
    }
    Points3 out = Points3::Zero(nj, 3);
    t.p.resize(terms_.size());
    for (std::size_t k = 0; k < terms_.size(); ++k) {
      const auto& term = terms_[k];
      t.p[k] = term.p0 + term.pb * beta;
      const Vec3 local = t.p[k] - term.m * t.rest.row(term.bone).transpose();
      out.row(term.joint) += (t.fk.rot[term.bone] * local + term.m * t.fk.pos[term.bone]).transpose();
    }
    return out;
  }

  struct Gradient {
    std::vector<Mat3> rots;  ///< dL/dR_i for the J - 1 relative rotations
    Vec3 gamma = Vec3::Zero();
    Eigen::VectorXd beta;
  };

  /// Reverse pass for upstream gradient `joints_bar` (J x 3).
  Gradient backward(const Tape& t, const Points3& joints_bar) const {
    const int nj = num_joints();
    std::vector<Mat3> rot_bar(nj, Mat3::Zero());
    std::vector<Vec3> pos_bar(nj, Vec3::Zero());
    Points3 rest_bar = Points3::Zero(nj, 3);
    Gradient g;
    g.beta = Eigen::VectorXd::Zero(t.beta.size());
    for (std::size_t k = 0; k < terms_.size(); ++k) {
      const auto& term = terms_[k];
      const Vec3 gj = joints_bar.row(term.joint).transpose();
      if (gj.isZero(0.0)) continue;
      const Vec3 local = t.p[k] - term.m * t.rest.row(term.bone).transpose();
      rot_bar[term.bone] += gj * local.transpose();
      const Vec3 local_bar = t.fk.rot[term.bone].transpose() * gj;
      g.beta += term.pb.transpose() * local_bar;
      rest_bar.row(term.bone) -= term.m * local_bar.transpose();
      pos_bar[term.bone] += term.m * gj;
    }
    g.rots.assign(nj - 1, Mat3::Zero());
    for (int i = nj - 1; i >= 1; --i) {
      const int p = parents_[i];
      const Vec3 offset = (t.rest.row(i) - t.rest.row(p)).transpose();
      rot_bar[p] += pos_bar[i] * offset.transpose();
      const Vec3 back = t.fk.rot[p].transpose() * pos_bar[i];
      rest_bar.row(i) += back.transpose();
      rest_bar.row(p) -= back.transpose();
      pos_bar[p] += pos_bar[i];
      g.rots[i - 1] = t.fk.rot[p].transpose() * rot_bar[i];
      rot_bar[p] += rot_bar[i] * t.local[i - 1].transpose();
    }
    rest_bar.row(0) += pos_bar[0].transpose();
    const auto jac = axis_angle_jacobian(t.gamma);
    for (int c = 0; c < 3; ++c) g.gamma(c) = rot_bar[0].cwiseProduct(jac[c]).sum();
    const Eigen::Map<const Eigen::VectorXd> rest_flat(rest_bar.data(), 3 * nj);
    g.beta += joint_basis_.transpose() * rest_flat;
    return g;
  }

 private:
  struct Term {
    int joint;
    int bone;
    double m;
    Vec3 p0;
    Eigen::Matrix<double, 3, Eigen::Dynamic> pb;
  };
  std::vector<int> parents_;
  Eigen::MatrixXd mix_;
  Points3 rest_joints_;
  Eigen::MatrixXd joint_basis_;  ///< (3J x B), row 3j + c
  std::vector<Term> terms_;
};

// ---------------------------------------------------------------------------
// Synthetic scenes

struct SceneTruth {
  std::vector<Rotation> rots;
  Eigen::VectorXd beta;
  AxisAngle gamma;
  Camera camera;
};

struct Scene {
  std::optional<SceneTruth> gt;
  Points2 j2d;
  std::vector<int> vis;
  double canvas = 256.0;

  [[nodiscard]] int num_visible() const {
    return static_cast<int>(std::count(vis.begin(), vis.end(), 1));
  }
};

struct SceneConfig {
  double canvas = 256.0;
  double shape_std = 1.25;
  double beta_clamp = 6.0;
  double noise_px = 8.0;        ///< half-width of the uniform pixel noise, 0 disables
  double removal_prob = 0.1;
  double pose_std_deg = 25.0;
  double pose_clamp_deg = 90.0;
  double yaw_range_deg = 60.0;
  double tilt_std_deg = 5.0;
  double body_fraction = 0.7;   ///< fraction of the canvas spanned by the rest body
};

/// s from the extent of the rest body, t putting the root at the canvas center.
inline Camera fit_camera(const Points3& rest_vertices, const Vec3& root, double canvas,
                         double fraction) {
  const Eigen::RowVector3d lo = rest_vertices.colwise().minCoeff();
  const Eigen::RowVector3d hi = rest_vertices.colwise().maxCoeff();
  const double extent = std::max(hi(0) - lo(0), hi(1) - lo(1));
  Camera cam;
  cam.s = fraction * canvas / extent;
  cam.tx = 0.5 * canvas - cam.s * root.x();
  cam.ty = 0.5 * canvas - cam.s * root.y();
  return cam;
}

namespace detail {

inline Vec3 hinge_axis(std::string_view name) {
  if (name == "l_elbow" || name == "r_elbow") return Vec3::UnitZ();
  if (name == "l_knee" || name == "r_knee") return Vec3::UnitX();
  return Vec3::Zero();
}

inline double deg(double d) { return d * std::numbers::pi / 180.0; }

}  // namespace detail

/**
 * Random pose, shape, global rotation and camera; observations are the
 * projected joints with uniform pixel noise, random removal, and clamping to
 * the canvas. Each ingredient draws from its own substream, so toggling noise
 * or removal leaves the ground truth unchanged.
 */
inline Scene generate_scene(const BodyModel& model, const SceneConfig& cfg, const RngStream& rng) {
  const int nj = model.num_joints();
  SceneTruth gt;

  RngStream shape_rng = rng.split("shape");
  gt.beta.resize(model.num_betas());
  for (int b = 0; b < model.num_betas(); ++b)
    gt.beta(b) = std::clamp(cfg.shape_std * shape_rng.normal(), -cfg.beta_clamp, cfg.beta_clamp);

  RngStream pose_rng = rng.split("pose");
  const double clamp = detail::deg(cfg.pose_clamp_deg);
  for (int i = 1; i < nj; ++i) {
    Vec3 axis(pose_rng.normal(), pose_rng.normal(), pose_rng.normal());
    axis.normalize();
    const Vec3 hinge = model.names.empty() ? Vec3::Zero() : detail::hinge_axis(model.names[i]);
    if (!hinge.isZero()) axis = (hinge + 0.3 * axis).normalized();
    const double angle = std::clamp(detail::deg(cfg.pose_std_deg) * pose_rng.normal(), -clamp, clamp);
    gt.rots.push_back(axis_angle_to_matrix({angle * axis}));
  }

  RngStream glob_rng = rng.split("global");
  const double yaw = detail::deg(cfg.yaw_range_deg) * (2.0 * glob_rng.uniform() - 1.0);
  const double tilt_x = detail::deg(cfg.tilt_std_deg) * glob_rng.normal();
  const double tilt_z = detail::deg(cfg.tilt_std_deg) * glob_rng.normal();
  const Rotation global = axis_angle_to_matrix({Vec3(0, yaw, 0)}) *
                          axis_angle_to_matrix({Vec3(tilt_x, 0, tilt_z)});
  gt.gamma = matrix_to_axis_angle(global);

  const BodyGeometry rest = shaped_rest(model, gt.beta);
  gt.camera = fit_camera(rest.vertices, rest.joints.row(0).transpose(), cfg.canvas, cfg.body_fraction);

  const BodyGeometry posed = pose_body(model, gt.rots, gt.gamma, gt.beta);
  Scene scene;
  scene.canvas = cfg.canvas;
  scene.j2d = project_weak_perspective(posed.joints, gt.camera);
  RngStream noise_rng = rng.split("noise");
  RngStream vis_rng = rng.split("visibility");
  scene.vis.assign(nj, 1);
  for (int l = 0; l < nj; ++l) {
    for (int c = 0; c < 2; ++c) {
      const double u = noise_rng.uniform();
      if (cfg.noise_px > 0.0) scene.j2d(l, c) += cfg.noise_px * (2.0 * u - 1.0);
      scene.j2d(l, c) = std::clamp(scene.j2d(l, c), 0.0, cfg.canvas);
    }
    if (vis_rng.uniform() < cfg.removal_prob) scene.vis[l] = 0;
  }
  scene.gt = std::move(gt);
  return scene;
}

}  // namespace kinefisher
