#ifndef PVM_EXPERIMENT_HPP
#define PVM_EXPERIMENT_HPP

// Experiment runner behind the command-line tool: configuration files,
// dataset and problem assembly, tuner dispatch, reports and plot data.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pvm/baselines.hpp"
#include "pvm/data.hpp"
#include "pvm/error.hpp"
#include "pvm/io.hpp"
#include "pvm/lower_solver.hpp"
#include "pvm/mlp.hpp"
#include "pvm/penalized_solver.hpp"
#include "pvm/ridge.hpp"

namespace pvm {

namespace fs = std::filesystem;

/// Failure during a run, tagged with the configuration fragment that was in
/// effect (for example "method = pvm, samples = 10").
class ExperimentError : public Error {
 public:
  ExperimentError(const std::string& kind, const std::string& message, std::string fragment)
      : Error(kind, message), fragment_(std::move(fragment)) {}

  const std::string& fragment() const noexcept { return fragment_; }

 private:
  std::string fragment_;
};

enum class Method { pvm, grid, random, bayes };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::pvm: return "pvm";
    case Method::grid: return "grid";
    case Method::random: return "random";
    case Method::bayes: return "bayes";
  }
  return "?";
}

struct ExperimentConfig {
  // Dataset
  std::string dataset;  // communities | mnist
  fs::path data_path;   // Communities and Crime CSV
  fs::path train_images, train_labels, test_images, test_labels;
  std::optional<Index> subset;
  std::vector<double> split{0.55, 0.20, 0.25};
  std::uint64_t split_seed = 0;

  // Model and hyperparameter space
  std::string model;  // ridge | mlp
  int hidden = 100;
  Activation activation = Activation::relu;
  int hyperparameters = 1;
  Scale scale = Scale::linear;
  double lower = 0.0;
  double upper = 10.0;

  // Method
  Method method = Method::pvm;
  int samples = 10;  // L
  SamplingScheme sampling = SamplingScheme::uniform_grid;
  int rounds = 4;  // M
  double R0 = 2.0;
  double mu0 = 2.0;
  double eta = 1.5;
  double lambda_rate_scale = 0.1;
  bool posthoc_solve = false;
  std::vector<int> grid{100};
  int draws = 100;
  int bayes_init = 10;
  int bayes_total = 50;
  int smbo_candidates = 1024;
  int smbo_refit_every = 10;
  std::uint64_t seed = 0;  // method randomness: sample designs, draws, SMBO
  SolveBudget budget;      // every lower solve and every AL round
  bool kriging_optimize_p = false;
  int kriging_starts = 8;

  // Output
  fs::path output;
  std::string label;
  int plot_points = 0;          // points per dimension of the phi curve; 0 picks a default
  bool plot_reference = false;  // also solve at every curve point (not counted)

  /// "method = pvm, samples = 10"-style summary used in error records.
  std::string fragment() const {
    std::string s = "method = " + std::string(to_string(method));
    switch (method) {
      case Method::pvm: s += ", samples = " + std::to_string(samples) + ", rounds = " + std::to_string(rounds); break;
      case Method::grid: {
        s += ", grid = ";
        for (std::size_t i = 0; i < grid.size(); ++i) s += (i ? "x" : "") + std::to_string(grid[i]);
        break;
      }
      case Method::random: s += ", draws = " + std::to_string(draws); break;
      case Method::bayes:
        s += ", bayes_init = " + std::to_string(bayes_init) + ", bayes_total = " + std::to_string(bayes_total);
        break;
    }
    return s + ", dataset = " + dataset;
  }

  std::vector<int> grid_levels() const {
    if (grid.size() == 1) return std::vector<int>(static_cast<std::size_t>(hyperparameters), grid[0]);
    return grid;
  }

  HyperSpace space() const { return HyperSpace::uniform(hyperparameters, scale, lower, upper); }

  PvmConfig pvm_config() const {
    PvmConfig c;
    c.rounds = rounds;
    c.R0 = R0;
    c.mu0 = mu0;
    c.eta = eta;
    c.inner_budget = budget;
    c.lambda_rate_scale = lambda_rate_scale;
    c.posthoc_solve = posthoc_solve;
    c.kriging = kriging_options();
    return c;
  }

  KrigingOptions kriging_options() const {
    KrigingOptions k;
    k.optimize_p = kriging_optimize_p;
    k.starts = kriging_starts;
    k.seed = seed;
    return k;
  }

  /// Checks everything that can be checked without loading data. Throws
  /// ConfigError naming the offending key.
  void validate() const {
    auto fail = [](const std::string& key, const std::string& why) {
      throw ConfigError("config key '" + key + "': " + why);
    };
    if (dataset == "communities") {
      if (data_path.empty()) fail("data_path", "required for the communities dataset");
      if (!fs::exists(data_path)) fail("data_path", "no such file: " + data_path.string());
      if (model != "ridge") fail("model", "the communities dataset uses model = ridge");
      if (hyperparameters != 1) fail("hyperparameters", "ridge regression has one hyperparameter");
    } else if (dataset == "mnist") {
      for (const auto& [key, path] : {std::pair{"train_images", &train_images}, {"train_labels", &train_labels}}) {
        if (path->empty()) fail(key, "required for the mnist dataset");
        if (!fs::exists(*path)) fail(key, "no such file: " + path->string());
      }
      if (test_images.empty() != test_labels.empty()) fail("test_images", "give both test files or neither");
      if (!test_images.empty() && !fs::exists(test_images)) fail("test_images", "no such file: " + test_images.string());
      if (!test_labels.empty() && !fs::exists(test_labels)) fail("test_labels", "no such file: " + test_labels.string());
      if (model != "mlp") fail("model", "the mnist dataset uses model = mlp");
      if (hyperparameters != 1 && hyperparameters != 2) fail("hyperparameters", "must be 1 or 2 for the MLP");
      if (hidden < 1) fail("hidden", "must be positive");
    } else {
      fail("dataset", "expected communities or mnist, got '" + dataset + "'");
    }
    if (split.size() != 2 && split.size() != 3) fail("split", "give two or three fractions");
    double total = 0.0;
    for (double f : split) {
      if (!(f > 0.0)) fail("split", "fractions must be positive");
      total += f;
    }
    if (std::abs(total - 1.0) > 1e-9) fail("split", "fractions must sum to 1");
    if (subset && *subset < 2) fail("subset", "must be at least 2");
    if (!(upper > lower)) fail("upper", "must exceed lower");
    if (scale == Scale::linear && lower < 0.0) fail("lower", "linear-scale strengths must be nonnegative");
    if (budget.epochs < 1) fail("epochs", "must be positive");
    if (budget.batch_size < 1) fail("batch_size", "must be positive");
    if (!(budget.learning_rate > 0.0)) fail("learning_rate", "must be positive");
    if (!(budget.lr_decay > 0.0)) fail("lr_decay", "must be positive");
    switch (method) {
      case Method::pvm:
        if (samples < 2) fail("samples", "PVM needs at least two samples");
        if (rounds < 1) fail("rounds", "must be positive");
        if (!(R0 > 0.0)) fail("R0", "must be positive");
        if (!(eta > 1.0)) fail("eta", "must exceed 1");
        if (!(lambda_rate_scale > 0.0)) fail("lambda_rate_scale", "must be positive");
        if (sampling == SamplingScheme::uniform_grid &&
            std::pow(2.0, hyperparameters) > samples) {
          fail("samples", "too few for a uniform grid in this dimension");
        }
        break;
      case Method::grid: {
        const auto levels = grid_levels();
        if (static_cast<int>(levels.size()) != hyperparameters) fail("grid", "one level count per hyperparameter");
        for (int l : levels) {
          if (l < 2) fail("grid", "at least two levels per hyperparameter");
        }
        break;
      }
      case Method::random:
        if (draws < 1) fail("draws", "must be positive");
        break;
      case Method::bayes:
        if (bayes_init < 2) fail("bayes_init", "must be at least 2");
        if (bayes_total <= bayes_init) fail("bayes_total", "must exceed bayes_init");
        if (smbo_candidates < 1) fail("smbo_candidates", "must be positive");
        break;
    }
    if (kriging_starts < 1) fail("kriging_starts", "must be positive");
    if (plot_points < 0) fail("plot_points", "must be nonnegative");
    if (output.empty()) fail("output", "an output directory is required");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  return out;
}

inline double to_double(const std::string& key, const std::string& v) {
  const auto parsed = parse_number(v);
  if (!parsed) throw ConfigError("config key '" + key + "': not a number: '" + v + "'");
  return *parsed;
}

inline long long to_integer(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  if (d != std::floor(d) || std::abs(d) > 9e15) {
    throw ConfigError("config key '" + key + "': not an integer: '" + v + "'");
  }
  return static_cast<long long>(d);
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "yes" || v == "1") return true;
  if (v == "false" || v == "no" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

}  // namespace detail

/// Parses the flat `key = value` format. Blank lines and `#` comments are
/// ignored; relative paths resolve against `base_dir`. Unknown keys and
/// malformed values are errors.
inline ExperimentConfig parse_config(const std::string& text, const fs::path& base_dir = {}) {
  using Setter = std::function<void(ExperimentConfig&, const std::string&, const std::string&)>;
  auto path_of = [&](const std::string& v) {
    fs::path p(v);
    return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
  };
  auto int_of = [](const std::string& k, const std::string& v) { return static_cast<int>(detail::to_integer(k, v)); };
  auto seed_of = [](const std::string& k, const std::string& v) {
    const long long s = detail::to_integer(k, v);
    if (s < 0) throw ConfigError("config key '" + k + "': seeds are nonnegative");
    return static_cast<std::uint64_t>(s);
  };

  const std::map<std::string, Setter> setters{
      {"dataset", [](auto& c, auto&, auto& v) { c.dataset = v; }},
      {"data_path", [&](auto& c, auto&, auto& v) { c.data_path = path_of(v); }},
      {"train_images", [&](auto& c, auto&, auto& v) { c.train_images = path_of(v); }},
      {"train_labels", [&](auto& c, auto&, auto& v) { c.train_labels = path_of(v); }},
      {"test_images", [&](auto& c, auto&, auto& v) { c.test_images = path_of(v); }},
      {"test_labels", [&](auto& c, auto&, auto& v) { c.test_labels = path_of(v); }},
      {"subset", [&](auto& c, auto& k, auto& v) { c.subset = detail::to_integer(k, v); }},
      {"split", [](auto& c, auto& k, auto& v) {
         c.split.clear();
         for (const auto& f : detail::split_list(v, ',')) c.split.push_back(detail::to_double(k, f));
       }},
      {"split_seed", [&](auto& c, auto& k, auto& v) { c.split_seed = seed_of(k, v); }},
      {"model", [](auto& c, auto&, auto& v) { c.model = v; }},
      {"hidden", [&](auto& c, auto& k, auto& v) { c.hidden = int_of(k, v); }},
      {"activation", [](auto& c, auto& k, auto& v) {
         if (v == "relu") c.activation = Activation::relu;
         else if (v == "sigmoid") c.activation = Activation::sigmoid;
         else if (v == "tanh") c.activation = Activation::tanh;
         else throw ConfigError("config key '" + k + "': expected relu, sigmoid or tanh, got '" + v + "'");
       }},
      {"hyperparameters", [&](auto& c, auto& k, auto& v) { c.hyperparameters = int_of(k, v); }},
      {"scale", [](auto& c, auto& k, auto& v) {
         if (v == "linear") c.scale = Scale::linear;
         else if (v == "log") c.scale = Scale::log;
         else throw ConfigError("config key '" + k + "': expected linear or log, got '" + v + "'");
       }},
      {"lower", [](auto& c, auto& k, auto& v) { c.lower = detail::to_double(k, v); }},
      {"upper", [](auto& c, auto& k, auto& v) { c.upper = detail::to_double(k, v); }},
      {"method", [](auto& c, auto& k, auto& v) {
         if (v == "pvm") c.method = Method::pvm;
         else if (v == "grid") c.method = Method::grid;
         else if (v == "random") c.method = Method::random;
         else if (v == "bayes") c.method = Method::bayes;
         else throw ConfigError("config key '" + k + "': unknown method '" + v + "' (expected pvm, grid, random or bayes)");
       }},
      {"samples", [&](auto& c, auto& k, auto& v) { c.samples = int_of(k, v); }},
      {"sampling", [](auto& c, auto& k, auto& v) {
         if (v == "uniform_grid") c.sampling = SamplingScheme::uniform_grid;
         else if (v == "latin_hypercube") c.sampling = SamplingScheme::latin_hypercube;
         else throw ConfigError("config key '" + k + "': expected uniform_grid or latin_hypercube, got '" + v + "'");
       }},
      {"rounds", [&](auto& c, auto& k, auto& v) { c.rounds = int_of(k, v); }},
      {"R0", [](auto& c, auto& k, auto& v) { c.R0 = detail::to_double(k, v); }},
      {"mu0", [](auto& c, auto& k, auto& v) { c.mu0 = detail::to_double(k, v); }},
      {"eta", [](auto& c, auto& k, auto& v) { c.eta = detail::to_double(k, v); }},
      {"lambda_rate_scale", [](auto& c, auto& k, auto& v) { c.lambda_rate_scale = detail::to_double(k, v); }},
      {"posthoc_solve", [](auto& c, auto& k, auto& v) { c.posthoc_solve = detail::to_bool(k, v); }},
      {"grid", [&](auto& c, auto& k, auto& v) {
         c.grid.clear();
         for (const auto& g : detail::split_list(v, 'x')) c.grid.push_back(int_of(k, g));
       }},
      {"draws", [&](auto& c, auto& k, auto& v) { c.draws = int_of(k, v); }},
      {"bayes_init", [&](auto& c, auto& k, auto& v) { c.bayes_init = int_of(k, v); }},
      {"bayes_total", [&](auto& c, auto& k, auto& v) { c.bayes_total = int_of(k, v); }},
      {"smbo_candidates", [&](auto& c, auto& k, auto& v) { c.smbo_candidates = int_of(k, v); }},
      {"smbo_refit_every", [&](auto& c, auto& k, auto& v) { c.smbo_refit_every = int_of(k, v); }},
      {"seed", [&](auto& c, auto& k, auto& v) { c.seed = seed_of(k, v); }},
      {"epochs", [&](auto& c, auto& k, auto& v) { c.budget.epochs = int_of(k, v); }},
      {"batch_size", [&](auto& c, auto& k, auto& v) { c.budget.batch_size = int_of(k, v); }},
      {"learning_rate", [](auto& c, auto& k, auto& v) { c.budget.learning_rate = detail::to_double(k, v); }},
      {"lr_decay", [](auto& c, auto& k, auto& v) { c.budget.lr_decay = detail::to_double(k, v); }},
      {"solve_seed", [&](auto& c, auto& k, auto& v) { c.budget.seed = seed_of(k, v); }},
      {"kriging_optimize_p", [](auto& c, auto& k, auto& v) { c.kriging_optimize_p = detail::to_bool(k, v); }},
      {"kriging_starts", [&](auto& c, auto& k, auto& v) { c.kriging_starts = int_of(k, v); }},
      {"output", [&](auto& c, auto&, auto& v) { c.output = path_of(v); }},
      {"label", [](auto& c, auto&, auto& v) { c.label = v; }},
      {"plot_points", [&](auto& c, auto& k, auto& v) { c.plot_points = int_of(k, v); }},
      {"plot_reference", [](auto& c, auto& k, auto& v) { c.plot_reference = detail::to_bool(k, v); }},
  };

  ExperimentConfig c;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value', got '" + line + "'");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto it = setters.find(key);
    if (it == setters.end()) {
      throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    try {
      it->second(c, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (c.label.empty()) c.label = std::string(to_string(c.method));
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  return parse_config(text.str(), path.parent_path());
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// One row of the results table.
struct ReportRow {
  std::string label;
  std::string dataset;
  std::string method;
  double train_loss = 0.0;
  double validation_loss = 0.0;
  std::optional<double> test_loss;
  Vector lambda;
  long long solve_count = 0;  // instrumented lower-level solves
  int extra_rounds = 0;       // M for PVM, shown as "(+M)"
  std::optional<double> penalized;  // Z at termination (PVM)

  /// xi = ln lambda per component (-inf at lambda = 0).
  Vector xi() const { return lambda.array().log(); }

  std::string solves_label() const {
    std::string s = std::to_string(solve_count);
    if (extra_rounds > 0) s += " (+" + std::to_string(extra_rounds) + ")";
    return s;
  }
};

namespace detail {

inline Json finite_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline std::string csv_number(double v) {
  if (std::isnan(v)) return "";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return format_double(v);
}

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

}  // namespace detail

inline Json report_to_json(const ReportRow& r) {
  Json xi = Json::array();
  for (Index k = 0; k < r.lambda.size(); ++k) xi.push_back(detail::finite_or_null(std::log(r.lambda[k])));
  return Json{{"label", r.label},
              {"dataset", r.dataset},
              {"method", r.method},
              {"train_loss", r.train_loss},
              {"validation_loss", r.validation_loss},
              {"test_loss", r.test_loss ? Json(*r.test_loss) : Json(nullptr)},
              {"lambda", to_json_array(r.lambda)},
              {"xi", xi},
              {"solve_count", r.solve_count},
              {"extra_rounds", r.extra_rounds},
              {"lower_level_optimizations", r.solves_label()},
              {"penalized_value", r.penalized ? Json(*r.penalized) : Json(nullptr)}};
}

inline ReportRow report_from_json(const Json& j) {
  try {
    ReportRow r;
    r.label = j.at("label").get<std::string>();
    r.dataset = j.at("dataset").get<std::string>();
    r.method = j.at("method").get<std::string>();
    r.train_loss = j.at("train_loss").get<double>();
    r.validation_loss = j.at("validation_loss").get<double>();
    if (!j.at("test_loss").is_null()) r.test_loss = j.at("test_loss").get<double>();
    r.lambda = vector_from_json(j.at("lambda"));
    r.solve_count = j.at("solve_count").get<long long>();
    r.extra_rounds = j.at("extra_rounds").get<int>();
    if (!j.at("penalized_value").is_null()) r.penalized = j.at("penalized_value").get<double>();
    return r;
  } catch (const Json::exception& e) {
    throw ParseError(std::string("malformed report: ") + e.what(), 0);
  }
}

inline std::string report_csv_header(int max_dims) {
  std::string h = "Dataset,Method,Label,Training Loss,Validation Loss,Testing Loss";
  for (int k = 0; k < max_dims; ++k) h += ",xi" + std::to_string(k + 1);
  return h + ",Lower Level Optimizations,Penalized Value";
}

inline std::string report_csv_line(const ReportRow& r, int max_dims) {
  std::string s = detail::csv_quote(r.dataset) + "," + detail::csv_quote(r.method) + "," + detail::csv_quote(r.label) +
                  "," + detail::csv_number(r.train_loss) + "," + detail::csv_number(r.validation_loss) + "," +
                  (r.test_loss ? detail::csv_number(*r.test_loss) : std::string());
  const Vector xi = r.xi();
  for (int k = 0; k < max_dims; ++k) s += "," + (k < xi.size() ? detail::csv_number(xi[k]) : std::string());
  return s + "," + r.solves_label() + "," + (r.penalized ? detail::csv_number(*r.penalized) : std::string());
}

// ---------------------------------------------------------------------------
// Problem assembly
// ---------------------------------------------------------------------------

inline SplitSpec split_spec(const ExperimentConfig& c, bool external_test) {
  SplitSpec spec;
  spec.fractions = c.split;
  spec.roles = {Role::train, Role::validation};
  if (c.split.size() == 3) spec.roles.push_back(Role::test);
  if (external_test && c.split.size() == 3) {
    throw ConfigError("config key 'split': use two fractions when test files are given");
  }
  spec.seed = c.split_seed;
  spec.subset = c.subset;
  return spec;
}

inline SupervisedProblem<RidgeModel> build_ridge_problem(const ExperimentConfig& c) {
  const auto table = regression_impute(load_communities_csv(c.data_path));
  auto s = subsample_and_split(table, split_spec(c, false));
  const Index d = s.train.cols();
  return SupervisedProblem(RidgeModel(d), c.space(), std::move(s.train), std::move(s.validation),
                           std::move(s.test));
}

inline SupervisedProblem<MlpModel> build_mlp_problem(const ExperimentConfig& c) {
  const auto train = load_mnist_idx(c.train_images, c.train_labels);
  std::optional<ImageSet> test;
  if (!c.test_images.empty()) test = load_mnist_idx(c.test_images, c.test_labels);
  auto s = subsample_and_split(train, split_spec(c, test.has_value()), test ? &*test : nullptr);
  const Index d = s.train.cols();
  return SupervisedProblem(MlpModel(d, c.hidden, 10, c.activation), c.space(), std::move(s.train),
                           std::move(s.validation), std::move(s.test));
}

/// Builds the configured problem and calls fn(problem).
template <class Fn>
decltype(auto) with_problem(const ExperimentConfig& c, Fn&& fn) {
  if (c.dataset == "communities") {
    const auto problem = build_ridge_problem(c);
    return fn(problem);
  }
  const auto problem = build_mlp_problem(c);
  return fn(problem);
}

// ---------------------------------------------------------------------------
// Plot data
// ---------------------------------------------------------------------------

/// Writes phi_curve.csv: the surrogate on a factorial grid (one row per grid
/// point) and, when `reference` is set, the solved value f* and validation
/// loss at each point. Reference solves are made outside any accounting.
template <BilevelProblem P>
void write_phi_curve(const P& problem, const KrigingModel& surrogate, int points_per_dim, bool reference,
                     const SolveBudget& budget, const fs::path& path) {
  const HyperSpace& space = problem.space();
  const int n = space.dimension();
  const auto coords = factorial_grid(space, std::vector<int>(static_cast<std::size_t>(n), points_per_dim));
  std::vector<ValueSample> solved;
  if (reference) {
    std::vector<HyperVector> sites;
    for (const auto& c : coords) sites.emplace_back(space, c);
    solved = solve_all(problem, sites, budget);
  }
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path.string(), 0);
  for (int k = 0; k < n; ++k) out << "coord" << k << ',';
  for (int k = 0; k < n; ++k) out << "lambda" << k << ',';
  out << "phi_hat,phi_grid,validation_loss\n";
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const HyperVector h(space, coords[i]);
    for (int k = 0; k < n; ++k) out << format_double(h.coords()[k]) << ',';
    for (int k = 0; k < n; ++k) out << format_double(h.lambda(k)) << ',';
    out << format_double(surrogate.predict(h.coords())) << ',';
    if (reference) out << format_double(solved[i].f_star) << ',' << format_double(solved[i].upper_loss);
    else out << ',';
    out << '\n';
  }
}

/// Augmented-Lagrangian series, one row per trace record (M + 1 rows).
inline void write_al_trace_csv(const PvmTrace& trace, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path.string(), 0);
  const Index n = trace.records.empty() ? 0 : trace.records.front().coords.size();
  out << "round";
  for (Index k = 0; k < n; ++k) out << ",coord" << k;
  for (Index k = 0; k < n; ++k) out << ",lambda" << k;
  out << ",validation_loss,lower_value,phi_hat,violation,penalized,penalty_R,multiplier\n";
  for (const auto& r : trace.records) {
    out << r.round;
    for (Index k = 0; k < n; ++k) out << ',' << format_double(r.coords[k]);
    for (Index k = 0; k < n; ++k) out << ',' << format_double(r.lambda[k]);
    out << ',' << format_double(r.upper) << ',' << format_double(r.lower) << ',' << format_double(r.phi_hat)
        << ',' << format_double(r.violation) << ',' << format_double(r.penalized) << ','
        << format_double(r.penalty_R) << ',' << format_double(r.multiplier) << '\n';
  }
}

inline void write_samples_csv(const std::vector<ValueSample>& samples, const fs::path& path) {
  std::vector<HistoryEntry> h;
  for (const auto& s : samples) h.push_back({s.lambda, s.upper_loss, s.f_star, false});
  write_history_csv(h, path);
}

inline int default_plot_points(int dims) { return dims == 1 ? 100 : 25; }

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

struct ExperimentOutcome {
  ReportRow row;
  fs::path directory;
  long long counted_solves = 0;  // counter delta over the tuning stage
};

namespace detail {

template <BilevelProblem P>
ExperimentOutcome run_on(const P& problem, const ExperimentConfig& c) {
  fs::create_directories(c.output);
  ExperimentOutcome out;
  out.directory = c.output;
  ReportRow& row = out.row;
  row.label = c.label;
  row.dataset = c.dataset;
  row.method = to_string(c.method);

  Vector final_weights;
  const SolveCountScope scope;
  if (c.method == Method::pvm) {
    const PvmConfig pc = c.pvm_config();
    SolveBudget sample_budget = c.budget;
    const auto samples = build_value_samples(problem, problem.space(), c.samples, c.sampling, sample_budget);
    const PvmResult result = run_pvm(problem, pc, samples);
    out.counted_solves = scope.count();
    row.solve_count = result.sample_solves + result.posthoc_solves;
    row.extra_rounds = result.rounds;
    row.lambda = result.best.lambda.lambda();
    row.validation_loss = problem.upper_objective(result.best.weights);
    row.penalized = result.final_penalized;
    final_weights = result.best.weights;

    write_json(kriging_to_json(result.surrogate), c.output / "surrogate.json");
    write_trace_jsonl(result.trace, c.output / "trace.jsonl");
    write_al_trace_csv(result.trace, c.output / "al_trace.csv");
    write_samples_csv(samples, c.output / "samples.csv");
    write_phi_curve(problem, result.surrogate,
                    c.plot_points ? c.plot_points : default_plot_points(c.hyperparameters), c.plot_reference,
                    c.budget, c.output / "phi_curve.csv");
  } else {
    TunerResult result;
    switch (c.method) {
      case Method::grid: result = grid_search(problem, c.grid_levels(), c.budget); break;
      case Method::random: result = random_search(problem, c.draws, c.seed, c.budget); break;
      case Method::bayes: {
        SmboOptions options;
        options.candidates = c.smbo_candidates;
        options.refit_every = c.smbo_refit_every;
        options.kriging = c.kriging_options();
        result = bayes_smbo(problem, c.bayes_init, c.bayes_total, c.seed, c.budget, options);
        break;
      }
      case Method::pvm: break;
    }
    out.counted_solves = scope.count();
    row.solve_count = result.solve_count;
    row.lambda = result.best_lambda.lambda();
    row.validation_loss = result.validation_loss;
    final_weights = std::move(result.best_weights);
    write_history_csv(result.history, c.output / "history.csv");
  }
  if (out.counted_solves != row.solve_count) {
    throw Error("accounting", "reported " + std::to_string(row.solve_count) + " lower solves but the counter saw " +
                                  std::to_string(out.counted_solves));
  }

  if constexpr (requires { problem.training_loss(final_weights); }) {
    row.train_loss = problem.training_loss(final_weights);
  }
  if constexpr (HasTestSet<P>) {
    if (problem.has_test()) row.test_loss = problem.test_objective(final_weights);
  }

  write_json(report_to_json(row), c.output / "report.json");
  const int dims = static_cast<int>(row.lambda.size());
  std::ofstream csv(c.output / "report.csv");
  csv << report_csv_header(dims) << '\n' << report_csv_line(row, dims) << '\n';
  return out;
}

}  // namespace detail

/// Validates the configuration, builds the problem and runs the method.
/// Library errors are rethrown as ExperimentError carrying the stage and
/// the configuration fragment.
inline ExperimentOutcome run_experiment(const ExperimentConfig& config) {
  config.validate();
  std::string stage = "loading " + config.dataset + " data";
  try {
    return with_problem(config, [&](const auto& problem) {
      stage = "running " + config.fragment();
      return detail::run_on(problem, config);
    });
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ExperimentError(e.kind(), stage + ": " + e.what(), config.fragment());
  } catch (const fs::filesystem_error& e) {
    throw ExperimentError("io", stage + ": " + e.what(), config.fragment());
  }
}

struct PhiMapOutcome {
  KrigingModel surrogate;
  std::vector<ValueSample> samples;
  long long counted_solves = 0;
};

/// Samples L sites, solves, fits the surrogate and writes surrogate.json,
/// samples.csv and phi_curve.csv. Uses the PVM sampling keys of the config.
inline PhiMapOutcome phi_map(const ExperimentConfig& config) {
  ExperimentConfig c = config;
  c.method = Method::pvm;
  c.validate();
  std::string stage = "loading " + c.dataset + " data";
  try {
    return with_problem(c, [&](const auto& problem) {
      stage = "building the value-function surrogate (samples = " + std::to_string(c.samples) + ")";
      fs::create_directories(c.output);
      PhiMapOutcome out;
      const SolveCountScope scope;
      out.samples = build_value_samples(problem, problem.space(), c.samples, c.sampling, c.budget);
      out.counted_solves = scope.count();
      out.surrogate = fit_value_function(out.samples, c.kriging_options());
      write_json(kriging_to_json(out.surrogate), c.output / "surrogate.json");
      write_samples_csv(out.samples, c.output / "samples.csv");
      write_phi_curve(problem, out.surrogate, c.plot_points ? c.plot_points : default_plot_points(c.hyperparameters),
                      c.plot_reference, c.budget, c.output / "phi_curve.csv");
      return out;
    });
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ExperimentError(e.kind(), stage + ": " + e.what(), c.fragment());
  }
}

/// Collects every report.json below `dir` into table2.csv, ordered by
/// dataset, then method (pvm, grid, random, bayes), then label.
inline std::vector<ReportRow> aggregate_reports(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ParseError("not a directory: " + dir.string(), 0);
  std::vector<ReportRow> rows;
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().filename() == "report.json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) rows.push_back(report_from_json(read_json(f)));
  auto rank = [](const std::string& m) {
    const std::vector<std::string> order{"pvm", "grid", "random", "bayes"};
    return std::find(order.begin(), order.end(), m) - order.begin();
  };
  std::stable_sort(rows.begin(), rows.end(), [&](const ReportRow& a, const ReportRow& b) {
    if (a.dataset != b.dataset) return a.dataset < b.dataset;
    if (rank(a.method) != rank(b.method)) return rank(a.method) < rank(b.method);
    return a.label < b.label;
  });
  int dims = 1;
  for (const auto& r : rows) dims = std::max(dims, static_cast<int>(r.lambda.size()));
  std::ofstream out(dir / "table2.csv");
  if (!out) throw ParseError("cannot write " + (dir / "table2.csv").string(), 0);
  out << report_csv_header(dims) << '\n';
  for (const auto& r : rows) out << report_csv_line(r, dims) << '\n';
  return rows;
}

}  // namespace pvm

#endif  // PVM_EXPERIMENT_HPP
