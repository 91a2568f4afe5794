#include "diffvar/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "diffvar/discrete_oracle.hpp"
#include "diffvar/errors.hpp"
#include "diffvar/girsanov.hpp"
#include "diffvar/statistics.hpp"

namespace diffvar::cli {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

bool parse_real(std::string_view s, double& out) {
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end && std::isfinite(out);
}

bool parse_integer(std::string_view s, std::int64_t& out) {
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

bool parse_flag(std::string_view s, bool& out) {
  if (s == "true" || s == "1" || s == "yes") return out = true, true;
  if (s == "false" || s == "0" || s == "no") return out = false, true;
  return false;
}

}  // namespace

Config::Config() {
  auto add = [this](const char* key, Type type, const char* value) { entries_[key] = Entry{type, value}; };
  // model
  add("coefficients", Type::text, "brownian");
  add("dim", Type::integer, "1");
  add("sigma", Type::real, "1");
  add("drift", Type::real, "0");
  add("kappa", Type::real, "1");
  add("radius", Type::real, "10");
  // functional
  add("functional", Type::text, "terminal_quadratic");
  add("constant", Type::real, "0");
  add("lambda", Type::real, "1");
  add("component", Type::text, "x");
  add("index", Type::integer, "0");
  add("expr", Type::text, "");
  // run
  add("n_steps", Type::integer, "64");
  add("n_paths", Type::integer, "20000");
  add("seed", Type::integer, "1");
  add("tree_dim", Type::integer, "1");
  add("n_functionals", Type::integer, "1");
  // optimizer
  add("family", Type::text, "linear_feedback");
  add("segments", Type::integer, "8");
  add("clip", Type::real, "10");
  add("max_iter", Type::integer, "100");
  add("grad_mode", Type::text, "pathwise");
  add("step", Type::real, "0.5");
  add("perturbation", Type::real, "0.1");
  add("tol", Type::real, "0");
  add("paths_per_iter", Type::integer, "5000");
  add("final_paths", Type::integer, "100000");
  add("rbf_centers", Type::integer, "7");
  add("rbf_width", Type::real, "0.75");
  add("rbf_slices", Type::integer, "8");
  add("attainment", Type::flag, "true");
  // density pipeline and verification
  add("schedule", Type::text, "2:0.5:2:6;4:0.25:4:3;6:0.1666666666666667:6:2;8:0.125:8:1");
  add("density", Type::text, "gibbs");
  add("inject_sign_error", Type::flag, "false");
}

void Config::set(const std::string& key, const std::string& value) {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw InvalidInput(fmt::format("unknown configuration key '{}'", key));
  Entry& e = it->second;
  switch (e.type) {
    case Type::text:
      e.value = value;
      return;
    case Type::real: {
      double v;
      if (!parse_real(value, v)) throw InvalidInput(fmt::format("key '{}' needs a finite number, got '{}'", key, value));
      e.value = fmt::format("{:.17g}", v);
      return;
    }
    case Type::integer: {
      std::int64_t v;
      if (!parse_integer(value, v)) throw InvalidInput(fmt::format("key '{}' needs an integer, got '{}'", key, value));
      e.value = std::to_string(v);
      return;
    }
    case Type::flag: {
      bool v;
      if (!parse_flag(value, v)) throw InvalidInput(fmt::format("key '{}' needs true or false, got '{}'", key, value));
      e.value = v ? "true" : "false";
      return;
    }
  }
}

void Config::load(std::istream& in, std::string_view source) {
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    const std::string body = trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw InvalidInput(fmt::format("{}:{}: expected 'key = value'", source, number));
    const std::string key = trim(std::string_view(body).substr(0, eq));
    if (key.empty()) throw InvalidInput(fmt::format("{}:{}: missing key", source, number));
    try {
      set(key, trim(std::string_view(body).substr(eq + 1)));
    } catch (const InvalidInput& e) {
      throw InvalidInput(fmt::format("{}:{}: {}", source, number, e.what()));
    }
  }
}

void Config::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput(fmt::format("cannot open config file '{}'", path));
  load(in, path);
}

void Config::apply_override(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos)
    throw InvalidInput(fmt::format("override '{}' is not of the form key=value", assignment));
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

const Config::Entry& Config::entry(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw InvalidInput(fmt::format("unknown configuration key '{}'", key));
  return it->second;
}

const std::string& Config::str(const std::string& key) const { return entry(key).value; }

double Config::real(const std::string& key) const {
  double v = 0;
  parse_real(entry(key).value, v);
  return v;
}

std::int64_t Config::integer(const std::string& key) const {
  std::int64_t v = 0;
  parse_integer(entry(key).value, v);
  return v;
}

std::size_t Config::count(const std::string& key) const {
  const std::int64_t v = integer(key);
  if (v < 0) throw InvalidInput(fmt::format("key '{}' must be non-negative, got {}", key, v));
  return static_cast<std::size_t>(v);
}

bool Config::flag(const std::string& key) const { return entry(key).value == "true"; }

std::string Config::canonical() const {
  std::string out;
  for (const auto& [key, e] : entries_) out += key + "=" + e.value + "\n";
  return out;
}

std::string Config::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h);
}

CoefficientField make_coefficients(const Config& config) {
  const std::string& name = config.str("coefficients");
  const std::size_t dim = config.count("dim");
  if (dim == 0) throw InvalidInput("dim must be positive");
  if (name == "brownian") return presets::brownian(dim);
  if (name == "constant") return presets::constant(dim, dim, config.real("sigma"), config.real("drift"));
  if (name == "affine")
    return presets::affine(dim, config.real("sigma"), config.real("kappa"), config.real("radius"), config.real("drift"));
  if (name == "sinusoidal") {
    if (dim != 1) throw InvalidInput("the sinusoidal preset is one-dimensional");
    return presets::sinusoidal(config.real("sigma"), config.real("drift"));
  }
  if (name == "degenerate") return presets::degenerate();
  throw InvalidInput(fmt::format(
      "unknown coefficients '{}' (expected brownian, constant, affine, sinusoidal or degenerate)", name));
}

PathFunctional make_functional(const Config& config) {
  const std::string& name = config.str("functional");
  const std::string& comp = config.str("component");
  if (comp != "x" && comp != "beta") throw InvalidInput(fmt::format("component must be x or beta, got '{}'", comp));
  const PathComponent component = comp == "x" ? PathComponent::x : PathComponent::beta;
  const std::size_t index = config.count("index");
  const double lambda = config.real("lambda");
  if (name == "constant") return functionals::constant(config.real("constant"));
  if (name == "terminal_linear") return functionals::terminal_linear(lambda, component, index);
  if (name == "terminal_quadratic") return functionals::terminal_quadratic(lambda, component, index);
  if (name == "running_integral") return functionals::running_integral(lambda, component, index);
  if (name == "expression") return functionals::expression(config.str("expr"));
  throw InvalidInput(fmt::format("unknown functional '{}'", name));
}

ControlFamily make_family(const Config& config, std::size_t m, std::size_t d, const TimeGrid& grid) {
  const std::string& name = config.str("family");
  const double clip = config.real("clip");
  if (!(clip > 0.0)) throw InvalidInput("clip must be positive");
  if (name == "constant") return ControlFamily::constant(d, grid, clip);
  if (name == "piecewise_constant") return ControlFamily::piecewise_constant(d, config.count("segments"), grid, clip);
  if (name == "linear_feedback") return ControlFamily::linear_feedback(m, d, grid, clip);
  if (name == "rbf_feedback") {
    const std::size_t n = config.count("rbf_centers");
    if (n == 0) throw InvalidInput("rbf_centers must be positive");
    // centers spread along the diagonal of [-2, 2]^m
    std::vector<Vector> centers;
    for (std::size_t j = 0; j < n; ++j) {
      const double c = n == 1 ? 0.0 : -2.0 + 4.0 * static_cast<double>(j) / static_cast<double>(n - 1);
      centers.push_back(Vector::Constant(static_cast<Eigen::Index>(m), c));
    }
    return ControlFamily::rbf_feedback(m, d, std::move(centers), config.real("rbf_width"), config.count("rbf_slices"),
                                       grid, clip);
  }
  throw InvalidInput(fmt::format("unknown family '{}'", name));
}

OptimizerOptions make_optimizer_options(const Config& config) {
  OptimizerOptions o;
  o.max_iter = config.count("max_iter");
  o.step = config.real("step");
  o.perturbation = config.real("perturbation");
  o.tol = config.real("tol");
  o.paths_per_iter = config.count("paths_per_iter");
  o.final_paths = config.count("final_paths");
  const std::string& mode = config.str("grad_mode");
  if (mode == "spsa") o.grad_mode = GradientMode::spsa;
  else if (mode == "finite_diff") o.grad_mode = GradientMode::finite_diff;
  else if (mode == "pathwise") o.grad_mode = GradientMode::pathwise;
  else throw InvalidInput(fmt::format("unknown grad_mode '{}'", mode));
  if (o.max_iter == 0) throw InvalidInput("max_iter must be positive");
  if (!(o.step > 0.0) || !(o.perturbation > 0.0)) throw InvalidInput("step and perturbation must be positive");
  if (o.tol < 0.0) throw InvalidInput("tol must be non-negative");
  if (o.paths_per_iter < 2 || o.final_paths < 2) throw InvalidInput("paths_per_iter and final_paths must be >= 2");
  return o;
}

std::vector<ApproximationParams> parse_schedule(std::string_view text) {
  std::vector<ApproximationParams> out;
  std::string_view rest = text;
  while (!rest.empty()) {
    const auto semi = rest.find(';');
    const std::string item = trim(rest.substr(0, semi));
    rest = semi == std::string_view::npos ? std::string_view{} : rest.substr(semi + 1);
    if (item.empty()) continue;
    std::vector<std::string> parts;
    std::stringstream ss(item);
    for (std::string p; std::getline(ss, p, ':');) parts.push_back(trim(p));
    ApproximationParams params;
    std::int64_t eta = 0;
    if (parts.size() != 4 || !parse_real(parts[0], params.n0) || !parse_real(parts[1], params.a) ||
        !parse_real(parts[2], params.n) || !parse_integer(parts[3], eta))
      throw InvalidInput(fmt::format("schedule entry '{}' is not n0:a:n:eta", item));
    if (eta < 1) throw InvalidInput(fmt::format("schedule entry '{}': the delay eta must be at least 1", item));
    params.eta = static_cast<std::size_t>(eta);
    out.push_back(params);
  }
  if (out.empty()) throw InvalidInput("schedule is empty");
  return out;
}

CsvReport::CsvReport(std::string command, const Config& config)
    : command_(std::move(command)), hash_(config.hash()), seed_(config.str("seed")) {
  text_ = "command,config_hash,seed,n_steps,n_paths,quantity,value,std_error,status\n";
}

void CsvReport::set_shape(std::size_t n_steps, std::size_t n_paths) {
  n_steps_ = n_steps;
  n_paths_ = n_paths;
}

void CsvReport::row(const std::string& quantity, double value, double std_error, const std::string& status) {
  text_ += fmt::format("{},{},{},{},{},{},{:.17g},{:.17g},{}\n", command_, hash_, seed_, n_steps_, n_paths_, quantity,
                       value, std_error, status);
  ++rows_;
}

namespace {

struct RunShape {
  TimeGrid grid;
  std::size_t n_paths;
  RandomStream stream;
};

RunShape run_shape(const Config& config) {
  const std::size_t n_steps = config.count("n_steps");
  const std::size_t n_paths = config.count("n_paths");
  if (n_steps == 0) throw InvalidInput("n_steps must be positive");
  if (n_paths < 2) throw InvalidInput("n_paths must be at least 2");
  return {TimeGrid(n_steps), n_paths, RandomStream{static_cast<std::uint64_t>(config.integer("seed")), 0}};
}

int cmd_estimate(const Config& config, CsvReport& report) {
  const auto coeffs = make_coefficients(config);
  const auto f = make_functional(config);
  const auto shape = run_shape(config);
  report.set_shape(shape.grid.n_steps(), shape.n_paths);
  const auto est = estimate_free_energy(f, coeffs, shape.grid, shape.n_paths, shape.stream);
  report.row("free_energy", est.estimate.value, est.estimate.std_error, "ok");
  report.row("log_bias", est.log_bias, 0.0, "ok");
  report.row("rejected", static_cast<double>(est.rejected), 0.0, "ok");
  return kExitOk;
}

int cmd_optimize(const Config& config, CsvReport& report) {
  const auto coeffs = make_coefficients(config);
  const auto f = make_functional(config);
  const auto shape = run_shape(config);
  const auto family = make_family(config, coeffs.m(), coeffs.d(), shape.grid);
  const auto options = make_optimizer_options(config);
  report.set_shape(shape.grid.n_steps(), options.final_paths);
  auto r = optimize(f, coeffs, family, options, shape.stream);
  for (const auto& it : r.trace)
    report.row(fmt::format("trace_objective[{}]", it.iteration), it.objective.value, it.objective.std_error, "trace");
  report.row("direct", r.direct.estimate.value, r.direct.estimate.std_error, "ok");
  report.row("direct_log_bias", r.direct.log_bias, 0.0, "ok");
  report.row("j_star", r.j_star.value, r.j_star.std_error, "ok");
  report.row("j_best_raw", r.j_best_raw.value, r.j_best_raw.std_error, "ok");
  report.row("gap", r.gap, combined_std_error(r.j_star, r.direct.estimate), r.violation ? "violation" : "ok");
  report.row("min_standardized_gap", r.min_standardized_gap, 0.0, r.min_standardized_gap < -3.0 ? "violation" : "ok");
  report.row("iterations", static_cast<double>(r.iterations), 0.0, r.status);
  report.row("clipped_steps", static_cast<double>(r.clipped_steps), 0.0, "ok");
  report.row("invertibility", 0.0, 0.0, r.invertibility);
  for (Eigen::Index i = 0; i < r.best_params.size(); ++i)
    report.row(fmt::format("param[{}]", i), r.best_params(i), 0.0, "ok");
  if (config.flag("attainment")) {
    const auto att = attainment_check(f, coeffs, family, r.best_params, std::max<std::size_t>(options.final_paths / 4, 2),
                                      shape.stream.derive(0xa77a));
    report.row("attainment_max_z", att.statistic, 0.0, att.mode);
  }
  return kExitOk;
}

std::vector<double> random_functional(const TreePathMeasure& tree, const RandomStream& stream) {
  auto engine = stream.engine();
  std::normal_distribution<double> normal(0.0, 2.0);
  std::vector<double> f(tree.path_count());
  for (double& v : f) v = normal(engine);
  return f;
}

int cmd_oracle(const Config& config, CsvReport& report) {
  const std::size_t n_steps = config.count("n_steps");
  const std::size_t dim = config.count("tree_dim");
  if (n_steps == 0 || dim == 0) throw InvalidInput("n_steps and tree_dim must be positive");
  if (dim * n_steps > kMaxTreeBits)
    throw InvalidInput(fmt::format("tree with tree_dim * n_steps = {} exceeds the enumeration guard {}",
                                   dim * n_steps, kMaxTreeBits));
  const TreePathMeasure tree(TimeGrid(n_steps), dim);
  report.set_shape(n_steps, tree.path_count());
  const bool random = config.str("functional") == "random";
  const std::size_t count = random ? config.count("n_functionals") : 1;
  if (count == 0) throw InvalidInput("n_functionals must be positive");
  std::optional<CoefficientField> coeffs;
  std::optional<PathFunctional> functional;
  if (!random) {
    coeffs = make_coefficients(config);
    if (coeffs->d() != dim)
      throw InvalidInput(fmt::format("tree_dim {} must equal the driving dimension {}", dim, coeffs->d()));
    functional = make_functional(config);
  }
  const RandomStream base{static_cast<std::uint64_t>(config.integer("seed")), 0};
  double worst_dp = 0, worst_gibbs = 0;
  std::size_t below = 0;
  for (std::size_t j = 0; j < count; ++j) {
    const auto f = random ? random_functional(tree, base.offset(j)) : evaluate_on_tree(*functional, tree, &*coeffs);
    const auto dp = dp_adapted_infimum(f, tree);
    const auto gibbs = gibbs_check(f, tree, 100, static_cast<std::uint64_t>(config.integer("seed")) + j);
    const double dp_res = std::abs(dp.value - gibbs.free_energy);
    worst_dp = std::max(worst_dp, dp_res);
    worst_gibbs = std::max(worst_gibbs, gibbs.residual);
    below += gibbs.n_below;
    const std::string tag = count == 1 ? "" : fmt::format("[{}]", j);
    report.row("free_energy" + tag, gibbs.free_energy, 0.0, "exact");
    report.row("dp_value" + tag, dp.value, 0.0, "exact");
    report.row("min_perturbed" + tag, gibbs.min_perturbed, 0.0, "exact");
  }
  report.row("max_dp_residual", worst_dp, 0.0, worst_dp <= 1e-10 ? "PASS" : "FAIL");
  report.row("max_gibbs_residual", worst_gibbs, 0.0, worst_gibbs <= 1e-12 ? "PASS" : "FAIL");
  report.row("perturbations_below", static_cast<double>(below), 0.0, below == 0 ? "PASS" : "FAIL");
  return kExitOk;
}

// ---------------------------------------------------------------------------
// verify: the identity battery

struct Battery {
  CsvReport& report;
  bool all_pass = true;
  void check(const std::string& name, double value, double se, bool pass) {
    all_pass = all_pass && pass;
    report.row(name, value, se, pass ? "PASS" : "FAIL");
  }
};

Path simulate(const CoefficientField& coeffs, const TimeGrid& grid, const RandomStream& s, Path& beta) {
  beta = Path::from_increments(grid, brownian_increments(s, grid, coeffs.d()));
  return euler_maruyama(coeffs, grid, beta.increments());
}

void verify_pseudo_inverse(Battery& b, const CoefficientField& coeffs, const RunShape& shape) {
  double worst = 0;
  const std::size_t n = std::min<std::size_t>(shape.n_paths, 200);
  Path beta(shape.grid, coeffs.d());
  for (std::size_t i = 0; i < n; ++i) {
    const Path x = simulate(coeffs, shape.grid, shape.stream.offset(i), beta);
    for (std::size_t k = 0; k <= shape.grid.n_steps(); ++k) {
      const Matrix s = coeffs.sigma(Vector(x.node(k).transpose()));
      const auto pair = theta_eta(s);
      const Matrix st = s * pair.theta, ts = pair.theta * s;
      worst = std::max({worst, (st * s - s).cwiseAbs().maxCoeff(),
                        (ts * pair.theta - pair.theta).cwiseAbs().maxCoeff(),
                        (st.transpose() - st).cwiseAbs().maxCoeff(), (ts.transpose() - ts).cwiseAbs().maxCoeff(),
                        (s * pair.eta).cwiseAbs().maxCoeff()});
    }
  }
  b.check("pseudo_inverse_identities", worst, 0.0, worst <= 1e-9);
}

void verify_reconstruction(Battery& b, const CoefficientField& coeffs, const RunShape& shape) {
  double worst = 0;
  const std::size_t n = std::min<std::size_t>(shape.n_paths, 1000);
  Path beta(shape.grid, coeffs.d());
  for (std::size_t i = 0; i < n; ++i) {
    const Path x = simulate(coeffs, shape.grid, shape.stream.offset(i), beta);
    const Path beta_hat = reconstruct_beta(x, beta, coeffs);
    const Path again = euler_maruyama(coeffs, shape.grid, beta_hat.increments());
    worst = std::max(worst, (again.values() - x.values()).cwiseAbs().maxCoeff());
  }
  b.check("reconstruction_round_trip", worst, 0.0, worst <= 1e-12);
}

void verify_girsanov(Battery& b, const CoefficientField& coeffs, const RunShape& shape, bool flip) {
  const std::size_t d = coeffs.d();
  DeterministicRule constant_shift(CameronMartinShift::constant(shape.grid, Vector::Constant(static_cast<Eigen::Index>(d), 0.5)));
  MarkovFeedbackRule feedback(d, [](double t, const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> out) {
    out.setConstant(-0.5 * std::tanh(x(0)) + 0.25 * t);
  });
  const std::vector<std::pair<std::string, const ShiftRule*>> shifts{{"constant", &constant_shift},
                                                                     {"feedback", &feedback}};
  const std::vector<std::pair<std::string, PathFunctional>> fs{{"linear", functionals::terminal_linear(1.0)},
                                                               {"sine", functionals::expression("sin(x0)")}};
  GirsanovOptions options;
  options.flip_wick_sign = flip;
  std::uint64_t tag = 0;
  for (const auto& [uname, u] : shifts)
    for (const auto& [fname, f] : fs) {
      const auto est = reweighted_expectation(f, coeffs, *u, shape.grid, shape.n_paths, shape.stream.derive(++tag), options);
      const double se = combined_std_error(est.lhs, est.rhs);
      b.check(fmt::format("girsanov_{}_{}", uname, fname), est.rhs.value - est.lhs.value, se, est.agrees(4.0));
      if (fname == "linear")
        b.check(fmt::format("wick_mean_{}", uname), est.weight.value, est.weight.std_error,
                std::abs(est.weight.value - 1.0) <= 4.0 * est.weight.std_error);
    }
}

void verify_composition(Battery& b, const CoefficientField& coeffs, const RunShape& shape) {
  const std::size_t d = coeffs.d();
  const auto de = static_cast<Eigen::Index>(d);
  RowMatrix ramp(static_cast<Eigen::Index>(shape.grid.n_steps()), de);
  for (Eigen::Index k = 0; k < ramp.rows(); ++k) ramp.row(k).setConstant(std::sin(3.0 * shape.grid.node(static_cast<std::size_t>(k))));
  DeterministicRule u(CameronMartinShift::constant(shape.grid, Vector::Constant(de, 0.3)));
  DeterministicRule v(CameronMartinShift(shape.grid, ramp));
  MarkovFeedbackRule fu(d, [](double, const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> out) {
    out.setConstant(std::cos(x(0)));
  });
  MarkovFeedbackRule fv(d, [](double t, const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> out) {
    out.setConstant(-0.5 * x(0) + t);
  });
  const std::size_t n = std::min<std::size_t>(shape.n_paths, 200);
  double det = 0, fb = 0;
  Path beta(shape.grid, d);
  for (std::size_t i = 0; i < n; ++i) {
    const Path x = simulate(coeffs, shape.grid, shape.stream.offset(i), beta);
    det = std::max(det, compose_check(coeffs, u, v, x, beta).max());
    fb = std::max(fb, compose_check(coeffs, fu, fv, x, beta).max());
  }
  b.check("composition_deterministic", det, 0.0, det <= 1e-10);
  b.check("composition_feedback", fb, 0.0, fb <= 1e-10);
}

void verify_entropy(Battery& b, const CoefficientField& coeffs, const RunShape& shape) {
  const auto de = static_cast<Eigen::Index>(coeffs.d());
  DeterministicRule u(CameronMartinShift::constant(shape.grid, Vector::Constant(de, 0.8)));
  const auto mc = entropy_upper_bound_check(u, coeffs, shape.grid, shape.n_paths, shape.stream.derive(99));
  b.check("entropy_bound_deterministic", mc.gap(), combined_std_error(mc.kl, mc.kinetic), mc.holds);
  b.check("entropy_equality_deterministic", mc.gap(), combined_std_error(mc.kl, mc.kinetic),
          std::abs(mc.gap()) <= 4.0 * combined_std_error(mc.kl, mc.kinetic) + 1e-12);
  const TreePathMeasure tree(TimeGrid(std::min<std::size_t>(shape.grid.n_steps(), 12)), 1);
  const auto reflected = entropy_upper_bound_check(reflection_map(), tree);
  b.check("entropy_gap_non_injective", reflected.gap(), 0.0, reflected.holds && reflected.gap() > 0.0);
}

int cmd_verify(const Config& config, CsvReport& report) {
  const auto coeffs = make_coefficients(config);
  const auto shape = run_shape(config);
  report.set_shape(shape.grid.n_steps(), shape.n_paths);
  Battery battery{report};
  verify_pseudo_inverse(battery, coeffs, shape);
  verify_reconstruction(battery, coeffs, shape);
  verify_girsanov(battery, coeffs, shape, config.flag("inject_sign_error"));
  verify_composition(battery, coeffs, shape);
  verify_entropy(battery, coeffs, shape);
  return battery.all_pass ? kExitOk : kExitNumerical;
}

int cmd_approx_density(const Config& config, CsvReport& report) {
  const auto schedule = parse_schedule(config.str("schedule"));
  const std::size_t n_steps = config.count("n_steps");
  if (n_steps == 0) throw InvalidInput("n_steps must be positive");
  if (n_steps > kMaxTreeBits)
    throw InvalidInput(fmt::format("n_steps = {} exceeds the enumeration guard {}", n_steps, kMaxTreeBits));
  for (const auto& p : schedule) p.validate(n_steps);
  const TreePathMeasure tree(TimeGrid(n_steps), 1);
  report.set_shape(n_steps, tree.path_count());

  std::vector<double> L;
  const std::string& density = config.str("density");
  if (density == "one") {
    L.assign(tree.path_count(), 1.0);
  } else if (density == "gibbs") {
    const auto coeffs = make_coefficients(config);
    if (coeffs.d() != 1) throw InvalidInput("the density pipeline runs on one-dimensional trees");
    const auto theta0 = gibbs_measure(evaluate_on_tree(make_functional(config), tree, &coeffs), tree);
    L.resize(theta0.size());
    for (std::size_t p = 0; p < L.size(); ++p) L[p] = theta0[p] / tree.path_probability();
  } else {
    throw InvalidInput(fmt::format("unknown density '{}' (expected gibbs or one)", density));
  }

  for (std::size_t j = 0; j < schedule.size(); ++j) {
    const auto& p = schedule[j];
    const auto result = build_control(L, p, tree);
    const auto& dg = result.diagnostics;
    const std::string tag = fmt::format("[{}:{:g}:{:g}:{:g}:{}]", j, p.n0, p.a, p.n, p.eta);
    std::size_t failures = 0;
    for (std::size_t path = 0; path < tree.path_count(); ++path)
      if (invert_retarded(result.control, tree, apply_retarded_shift(result.control, tree, path)) != path) ++failures;
    report.row("l1_LlogL" + tag, dg.l1_LlogL, 0.0, "exact");
    report.row("l1_logL" + tag, dg.l1_logL, 0.0, "exact");
    report.row("energy_max" + tag, dg.energy, 0.0, dg.energy <= p.n ? "PASS" : "FAIL");
    report.row("mean_density" + tag, dg.mean_density, 0.0, "exact");
    static constexpr const char* stages[4] = {"truncate", "mix", "stop", "retard"};
    for (std::size_t s = 0; s < 4; ++s) report.row(fmt::format("stage_{}{}", stages[s], tag), dg.stage_errors[s], 0.0, "exact");
    report.row("inversion_failures" + tag, static_cast<double>(failures), 0.0, failures == 0 ? "PASS" : "FAIL");
  }
  return kExitOk;
}

}  // namespace

int run_command(const std::string& command, const Config& config, CsvReport& report) {
  if (command == "estimate") return cmd_estimate(config, report);
  if (command == "optimize") return cmd_optimize(config, report);
  if (command == "oracle") return cmd_oracle(config, report);
  if (command == "verify") return cmd_verify(config, report);
  if (command == "approx-density") return cmd_approx_density(config, report);
  throw InvalidInput(fmt::format("unknown command '{}'", command));
}

int main(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Variational free energies and path-space identities for diffusions"};
  app.require_subcommand(1, 1);
  std::string config_path;
  std::vector<std::string> overrides;
  for (const char* name : {"estimate", "optimize", "oracle", "verify", "approx-density"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "key = value configuration file");
    sub->add_option("overrides", overrides, "key=value overrides applied after the file");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInvalid;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    Config config;
    if (!config_path.empty()) config.load_file(config_path);
    for (const auto& o : overrides) config.apply_override(o);
    CsvReport report(command, config);
    const int code = run_command(command, config, report);
    out << report.text();
    out.flush();
    if (code != kExitOk) err << "error: verification battery reported FAIL\n";
    return code;
  } catch (const InvalidInput& e) {
    err << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const NumericalFailure& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  }
}

}  // namespace diffvar::cli
