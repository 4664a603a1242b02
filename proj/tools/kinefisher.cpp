// kinefisher command-line tool: scene synthesis, fitting, sampling,
// uncertainty, export and the acceptance self-test.

#include <CLI11.hpp>

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "kinefisher/acceptance.hpp"
#include "kinefisher/kinefisher.hpp"

namespace kf = kinefisher;
using kf::io::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumerical = 2;
constexpr int kExitAcceptance = 3;

struct Context {
  std::vector<std::string> argv;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
};

/// --seed value, or a fresh one from system entropy.
struct SeedOption {
  std::optional<std::uint64_t> value;

  [[nodiscard]] std::pair<std::uint64_t, bool> resolve() const {
    if (value) return {*value, false};
    std::random_device rd;
    return {(std::uint64_t{rd()} << 32) | rd(), true};
  }
};

void add_seed(CLI::App* cmd, SeedOption& seed) {
  cmd->add_option("--seed", seed.value, "Root seed; drawn from system entropy when omitted");
}

/// argv with --seed set to the resolved value, so the manifest replays.
std::vector<std::string> replay_argv(const std::vector<std::string>& argv, std::uint64_t seed) {
  std::vector<std::string> out;
  bool found = false;
  for (std::size_t i = 0; i < argv.size(); ++i) {
    const std::string& a = argv[i];
    if (a == "--seed" && i + 1 < argv.size()) {
      out.push_back(a);
      out.push_back(std::to_string(seed));
      ++i;
      found = true;
    } else if (a.rfind("--seed=", 0) == 0) {
      out.push_back("--seed=" + std::to_string(seed));
      found = true;
    } else {
      out.push_back(a);
    }
  }
  if (!found) {
    out.push_back("--seed");
    out.push_back(std::to_string(seed));
  }
  return out;
}

void write_manifests(const Context& ctx, const std::string& command, const json& config,
                     std::optional<std::pair<std::uint64_t, bool>> seed,
                     const std::vector<std::string>& inputs, const std::vector<std::string>& outputs,
                     const json& extra = json::object()) {
  kf::io::RunManifest m;
  m.command = command;
  m.argv = seed ? replay_argv(ctx.argv, seed->first) : ctx.argv;
  m.config = config;
  m.config["quadrature_order"] = kf::default_quadrature_order();
  if (seed) {
    m.seed = seed->first;
    m.seed_from_entropy = seed->second;
  }
  m.inputs = inputs;
  m.outputs = outputs;
  m.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - ctx.start).count();
  m.extra = extra;
  const json j = kf::io::to_json(m);
  for (const auto& out : outputs) kf::io::write_json(kf::io::manifest_path(out), j, 1);
}

kf::BodyModel load_model(const std::string& path) {
  return path.empty() ? kf::make_toy_model() : kf::io::body_model_from_json(kf::io::read_json(path));
}

std::vector<std::string> inputs_of(std::initializer_list<std::string> paths) {
  std::vector<std::string> out;
  for (const auto& p : paths)
    if (!p.empty()) out.push_back(p);
  return out;
}

/// Singular values from "--s a,b,c" or a full matrix from "--f" (row-major).
kf::Mat3 parameter_matrix(const std::vector<double>& s, const std::vector<double>& f) {
  if (!s.empty() == !f.empty()) throw kf::InvalidArgument("give exactly one of --s or --f");
  if (!s.empty()) {
    if (s.size() != 3) throw kf::InvalidArgument("--s needs 3 values");
    return kf::Vec3(s[0], s[1], s[2]).asDiagonal();
  }
  if (f.size() != 9) throw kf::InvalidArgument("--f needs 9 values");
  return kf::from_row_major(f);
}

json summarize(const kf::MatrixFisher& d) {
  const kf::Vec3 s = d.singular_values();
  const kf::Vec3 k = kf::concentrations(d).k;
  json j{{"F", kf::io::to_json(d.f())},
         {"singular_values", {s(0), s(1), s(2)}},
         {"concentrations", {k(0), k(1), k(2)}},
         {"log_c", d.log_c()},
         {"expected_rotation", kf::io::to_json(kf::expected_rotation(d))},
         {"kl_to_uniform", kf::kl_to_uniform(d)}};
  j["mode"] = d.is_uniform() ? json(nullptr) : kf::io::to_json(kf::mode(d).matrix());
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  Context ctx;
  ctx.argv.assign(argv, argv + argc);

  CLI::App app{"Matrix-Fisher distributions over articulated body poses"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kf::library_version());

  // model make
  auto* model_cmd = app.add_subcommand("model", "Body models")->require_subcommand(1);
  auto* model_make = model_cmd->add_subcommand("make", "Build the procedural toy body model");
  kf::ToyModelConfig toy;
  std::string model_out;
  SeedOption model_seed;
  model_make->add_option("--joints", toy.num_joints, "Joint count (16 gives the named default skeleton)")
      ->capture_default_str();
  model_make->add_option("--vertices-per-bone", toy.vertices_per_bone, "Vertices per bone")
      ->capture_default_str();
  model_make->add_option("--betas", toy.num_betas, "Shape coefficients")->capture_default_str();
  add_seed(model_make, model_seed);
  model_make->add_option("-o,--output", model_out, "Output JSON")->required();

  // scene generate
  auto* scene_cmd = app.add_subcommand("scene", "Synthetic observations")->require_subcommand(1);
  auto* scene_gen = scene_cmd->add_subcommand("generate", "Random posed body with 2D joint observations");
  kf::SceneConfig scene_cfg;
  std::string scene_model, scene_out;
  SeedOption scene_seed;
  std::vector<std::string> scene_mask;
  scene_gen->add_option("--model", scene_model, "Body model JSON (default: toy model)");
  scene_gen->add_option("--noise-px", scene_cfg.noise_px, "Half-width of uniform pixel noise")
      ->capture_default_str();
  scene_gen->add_option("--removal-prob", scene_cfg.removal_prob, "Probability a joint is unobserved")
      ->capture_default_str();
  scene_gen->add_option("--canvas", scene_cfg.canvas, "Image size in pixels")->capture_default_str();
  scene_gen->add_option("--pose-std-deg", scene_cfg.pose_std_deg, "Joint angle spread")->capture_default_str();
  scene_gen->add_option("--mask", scene_mask, "Joint names forced unobserved")->delimiter(',');
  add_seed(scene_gen, scene_seed);
  scene_gen->add_option("-o,--output", scene_out, "Output JSON")->required();

  // fit
  auto* fit_cmd = app.add_subcommand("fit", "Fit a body distribution to a scene");
  kf::FitConfig fit_cfg;
  std::string fit_scene, fit_model, fit_out, fit_trace, fit_mode = "independent";
  SeedOption fit_seed;
  bool no_polish = false;
  fit_cmd->add_option("--scene", fit_scene, "Scene JSON")->required();
  fit_cmd->add_option("--model", fit_model, "Body model JSON (default: toy model)");
  fit_cmd->add_option("--mode", fit_mode, "independent or hierarchical")
      ->check(CLI::IsMember({"independent", "hierarchical"}))
      ->capture_default_str();
  fit_cmd->add_option("--samples", fit_cfg.samples, "Monte-Carlo bodies per step (K)")->capture_default_str();
  fit_cmd->add_option("--kl-weight", fit_cfg.kl_weight, "Weight of the KL-to-uniform regularizer")
      ->capture_default_str();
  fit_cmd->add_option("--sample-weight", fit_cfg.sample_weight, "Weight of the 2D sample loss")
      ->capture_default_str();
  fit_cmd->add_option("--mode-weight", fit_cfg.mode_weight, "Weight of the 2D mode loss")
      ->capture_default_str();
  fit_cmd->add_option("--steps", fit_cfg.steps, "Optimizer steps (polish pass when hierarchical)")
      ->capture_default_str();
  fit_cmd->add_option("--stage-steps", fit_cfg.stage_steps, "Steps per hierarchical stage")
      ->capture_default_str();
  fit_cmd->add_flag("--no-polish", no_polish, "Skip the joint pass after the hierarchical stages");
  add_seed(fit_cmd, fit_seed);
  fit_cmd->add_option("-o,--output", fit_out, "Output distribution JSON")->required();
  fit_cmd->add_option("--trace", fit_trace, "Loss trace CSV");

  // mf sample / eval / mle
  auto* mf_cmd = app.add_subcommand("mf", "Single matrix-Fisher distributions")->require_subcommand(1);
  std::vector<double> mf_s, mf_f, mf_rot;
  int mf_n = 1000;
  std::optional<double> mf_b;
  std::string mf_out, mf_in;
  SeedOption mf_seed;
  auto* mf_sample = mf_cmd->add_subcommand("sample", "Draw rotations");
  mf_sample->add_option("--s", mf_s, "Singular values s1,s2,s3 (F = diag(s))")->delimiter(',');
  mf_sample->add_option("--f", mf_f, "F as 9 row-major values")->delimiter(',');
  mf_sample->add_option("--n", mf_n, "Number of draws")->capture_default_str()->check(CLI::PositiveNumber);
  mf_sample->add_option("--b", mf_b, "Override the proposal parameter b (default: optimal)")
      ->check(CLI::PositiveNumber);
  add_seed(mf_sample, mf_seed);
  mf_sample->add_option("-o,--output", mf_out, "Output JSON list of row-major rotations")->required();
  auto* mf_eval = mf_cmd->add_subcommand("eval", "Normalizer, mode, concentrations, moments");
  mf_eval->add_option("--s", mf_s, "Singular values s1,s2,s3")->delimiter(',');
  mf_eval->add_option("--f", mf_f, "F as 9 row-major values")->delimiter(',');
  mf_eval->add_option("--rotation", mf_rot, "Rotation (9 row-major values) for log_pdf")->delimiter(',');
  mf_eval->add_option("-o,--output", mf_out, "Output JSON (default: stdout)");
  auto* mf_mle = mf_cmd->add_subcommand("mle", "Maximum-likelihood fit to sampled rotations");
  mf_mle->add_option("--samples", mf_in, "JSON list of row-major rotations")->required();
  mf_mle->add_option("-o,--output", mf_out, "Output JSON (default: stdout)");

  // uncertainty
  auto* unc_cmd = app.add_subcommand("uncertainty", "Per-vertex uncertainty of a body distribution");
  std::string unc_model, unc_dist, unc_out;
  int unc_samples = 100;
  SeedOption unc_seed;
  unc_cmd->add_option("--model", unc_model, "Body model JSON (default: toy model)");
  unc_cmd->add_option("--dist", unc_dist, "Body distribution JSON")->required();
  unc_cmd->add_option("--samples", unc_samples, "Bodies drawn")->capture_default_str()->check(CLI::Range(2, 1000000));
  add_seed(unc_cmd, unc_seed);
  unc_cmd->add_option("-o,--output", unc_out, "Output CSV")->required();

  // export obj
  auto* export_cmd = app.add_subcommand("export", "Mesh export")->require_subcommand(1);
  auto* export_obj = export_cmd->add_subcommand("obj", "Write a body mesh as OBJ");
  std::string exp_model, exp_dist, exp_scene, exp_out;
  int exp_sample = -1;
  SeedOption exp_seed;
  export_obj->add_option("--model", exp_model, "Body model JSON (default: toy model)");
  auto* exp_dist_opt = export_obj->add_option("--dist", exp_dist, "Body distribution: exports its mode body");
  auto* exp_scene_opt = export_obj->add_option("--scene", exp_scene, "Scene with ground truth: exports the true body");
  exp_dist_opt->excludes(exp_scene_opt);
  export_obj->add_option("--sample", exp_sample, "Export sample n of --dist instead of the mode")
      ->needs(exp_dist_opt)
      ->check(CLI::NonNegativeNumber);
  add_seed(export_obj, exp_seed);
  export_obj->add_option("-o,--output", exp_out, "Output OBJ")->required();

  // selftest
  auto* self_cmd = app.add_subcommand("selftest", "Run the acceptance suite");
  std::uint64_t self_seed = 0;
  std::string self_out = "selftest_report.txt";
  std::vector<int> self_criteria = kf::acceptance::all_criteria();
  bool quiet = false;
  self_cmd->add_option("--seed", self_seed, "Root seed")->capture_default_str();
  self_cmd->add_option("-o,--output", self_out, "Report file")->capture_default_str();
  self_cmd->add_option("--criteria", self_criteria, "Subset of criteria, e.g. 1,2,6")
      ->delimiter(',')
      ->check(CLI::Range(1, 8));
  self_cmd->add_flag("-q,--quiet", quiet, "No progress on stderr");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << "\n" << app.help();
    return kExitUsage;
  }

  try {
    if (model_make->parsed()) {
      const auto seed = model_seed.resolve();
      toy.seed = seed.first;
      const kf::BodyModel m = kf::make_toy_model(toy);
      kf::io::write_json(model_out, kf::io::to_json(m));
      write_manifests(ctx, "model make",
                      {{"joints", toy.num_joints}, {"vertices_per_bone", toy.vertices_per_bone}, {"betas", toy.num_betas}},
                      seed, {}, {model_out});
    } else if (scene_gen->parsed()) {
      const auto seed = scene_seed.resolve();
      const kf::BodyModel m = load_model(scene_model);
      kf::Scene scene = kf::generate_scene(m, scene_cfg, kf::RngStream(seed.first).split("scene"));
      for (const auto& name : scene_mask) scene.vis[m.joint_index(name)] = 0;
      kf::io::write_json(scene_out, kf::io::to_json(scene));
      write_manifests(ctx, "scene generate",
                      {{"noise_px", scene_cfg.noise_px},
                       {"removal_prob", scene_cfg.removal_prob},
                       {"canvas", scene_cfg.canvas},
                       {"pose_std_deg", scene_cfg.pose_std_deg},
                       {"mask", scene_mask}},
                      seed, inputs_of({scene_model}), {scene_out});
    } else if (fit_cmd->parsed()) {
      const auto seed = fit_seed.resolve();
      fit_cfg.seed = seed.first;
      fit_cfg.mode = kf::parse_distribution_mode(fit_mode);
      fit_cfg.polish = !no_polish;
      const kf::BodyModel m = load_model(fit_model);
      const kf::Scene scene = kf::io::scene_from_json(kf::io::read_json(fit_scene));
      const kf::FitResult res = kf::fit_to_observation(m, scene, fit_cfg);
      kf::io::write_json(fit_out, kf::io::to_json(res.dist));
      std::vector<std::string> outputs{fit_out};
      if (!fit_trace.empty()) {
        kf::io::write_text(fit_trace, kf::io::trace_csv(res.trace));
        outputs.push_back(fit_trace);
      }
      const json final_loss = res.trace.empty() ? json(nullptr) : json(res.trace.back().report.terms);
      write_manifests(ctx, "fit", kf::io::to_json(fit_cfg), seed, inputs_of({fit_scene, fit_model}),
                      outputs, {{"accepted_steps", res.trace.size()}, {"final_terms", final_loss}});
    } else if (mf_sample->parsed()) {
      const auto seed = mf_seed.resolve();
      const kf::MatrixFisher d(parameter_matrix(mf_s, mf_f));
      kf::RngStream rng = kf::RngStream(seed.first).split("mf_sample");
      kf::SamplerOptions opts;
      opts.b = mf_b;
      json out = json::array();
      for (int k = 0; k < mf_n; ++k)
        out.push_back(kf::io::to_json(kf::sample_matrix_fisher(d, rng, opts).first.matrix()));
      kf::io::write_json(mf_out, out);
      json config{{"F", kf::io::to_json(d.f())}, {"n", mf_n}};
      if (mf_b) config["b"] = *mf_b;
      write_manifests(ctx, "mf sample", config, seed, {}, {mf_out},
                      {{"schema_version", kf::kSchemaVersion}, {"format", "list of row-major 3x3 rotations"}});
    } else if (mf_eval->parsed()) {
      const kf::MatrixFisher d(parameter_matrix(mf_s, mf_f));
      json out = kf::io::header("matrix_fisher_summary");
      out.update(summarize(d));
      if (!mf_rot.empty()) {
        if (mf_rot.size() != 9) throw kf::InvalidArgument("--rotation needs 9 values");
        out["log_pdf"] = kf::log_pdf(kf::Rotation::from_matrix(kf::from_row_major(mf_rot)), d);
      }
      if (mf_out.empty()) {
        std::cout << out.dump(1) << "\n";
      } else {
        kf::io::write_json(mf_out, out);
        write_manifests(ctx, "mf eval", {{"F", kf::io::to_json(d.f())}}, std::nullopt, {}, {mf_out});
      }
    } else if (mf_mle->parsed()) {
      const auto rots = kf::io::rotations_from_json(kf::io::read_json(mf_in));
      const kf::MatrixFisher d = kf::mle_fit(rots);
      json out = kf::io::header("matrix_fisher_summary");
      out.update(summarize(d));
      out["samples"] = rots.size();
      if (mf_out.empty()) {
        std::cout << out.dump(1) << "\n";
      } else {
        kf::io::write_json(mf_out, out);
        write_manifests(ctx, "mf mle", json::object(), std::nullopt, {mf_in}, {mf_out});
      }
    } else if (unc_cmd->parsed()) {
      const auto seed = unc_seed.resolve();
      const kf::BodyModel m = load_model(unc_model);
      const kf::BodyDistribution d = kf::io::distribution_from_json(kf::io::read_json(unc_dist), m);
      const Eigen::VectorXd unc =
          kf::per_vertex_uncertainty(m, d, unc_samples, kf::RngStream(seed.first).split("uncertainty"));
      kf::io::write_text(unc_out, kf::io::uncertainty_csv(unc, kf::dominant_joint(m)));
      write_manifests(ctx, "uncertainty", {{"samples", unc_samples}}, seed, inputs_of({unc_model, unc_dist}),
                      {unc_out});
    } else if (export_obj->parsed()) {
      const kf::BodyModel m = load_model(exp_model);
      std::optional<std::pair<std::uint64_t, bool>> seed;
      kf::Points3 vertices;
      std::string what = "rest";
      if (!exp_dist.empty()) {
        const kf::BodyDistribution d = kf::io::distribution_from_json(kf::io::read_json(exp_dist), m);
        if (exp_sample >= 0) {
          seed = exp_seed.resolve();
          const auto bodies = kf::sample_bodies(m, d, exp_sample + 1, kf::RngStream(seed->first).split("export"));
          vertices = bodies.back().vertices;
          what = "sample";
        } else {
          vertices = kf::mode_body(m, d).vertices;
          what = "mode";
        }
      } else if (!exp_scene.empty()) {
        const kf::Scene scene = kf::io::scene_from_json(kf::io::read_json(exp_scene));
        if (!scene.gt) throw kf::InvalidArgument("scene has no ground truth");
        vertices = kf::pose_body(m, scene.gt->rots, scene.gt->gamma, scene.gt->beta).vertices;
        what = "ground_truth";
      } else {
        vertices = m.template_vertices;
      }
      kf::io::write_text(exp_out, kf::io::obj_text(vertices, m.faces));
      write_manifests(ctx, "export obj", {{"body", what}, {"sample", exp_sample}}, seed,
                      inputs_of({exp_model, exp_dist, exp_scene}), {exp_out});
    } else if (self_cmd->parsed()) {
      kf::acceptance::Log log;
      if (!quiet) log = [](const std::string& line) { std::cerr << line << std::endl; };
      const auto results = kf::acceptance::run(self_seed, self_criteria, log);
      kf::io::write_text(self_out, kf::acceptance::report_text(self_seed, results));
      json timings = json::array();
      bool all = true;
      for (const auto& r : results) {
        timings.push_back({{"criterion", r.id}, {"pass", r.pass}, {"seconds", r.seconds}, {"budget_seconds", r.budget_seconds}});
        all = all && r.pass;
      }
      write_manifests(ctx, "selftest", {{"criteria", self_criteria}}, std::make_pair(self_seed, false), {},
                      {self_out}, {{"timings", timings}});
      return all ? kExitOk : kExitAcceptance;
    }
  } catch (const kf::NumericalFailure& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const kf::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const json::exception& e) {
    std::cerr << "error: malformed JSON: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitOk;
}
