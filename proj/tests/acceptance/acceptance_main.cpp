// Acceptance checks. Each criterion prints its individual checks followed by
// one summary line "criterion N: PASS|FAIL|SKIP". Exit status is 0 when every
// selected criterion passes, 1 on any failure and 77 when all selected
// criteria were skipped for lack of data.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pvm/experiment.hpp"
#include "synthetic_communities.hpp"
#include "test_util.hpp"
#include "toy_problem.hpp"

namespace {

using namespace pvm;
using Clock = std::chrono::steady_clock;

enum class Verdict { pass, fail, skip };

class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    std::printf("  [%s] %s\n", ok ? "ok" : "FAIL", what.c_str());
    std::fflush(stdout);
    ok_ = ok_ && ok;
  }
  void note(const std::string& what) { std::printf("  note: %s\n", what.c_str()); }
  Verdict verdict() const { return ok_ ? Verdict::pass : Verdict::fail; }

 private:
  bool ok_ = true;
};

std::string fmt(const char* f, double a) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string fmt(const char* f, double a, double b) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "pvm_acceptance" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

struct Context {
  fs::path data_dir;

  std::optional<fs::path> communities() const {
    for (const auto& p : {data_dir / "communities.data", data_dir / "communities" / "communities.data",
                          data_dir / "communities.csv"}) {
      if (fs::exists(p)) return p;
    }
    return std::nullopt;
  }

  std::optional<fs::path> mnist_dir() const {
    const fs::path d = data_dir / "mnist";
    for (const char* f : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte",
                          "t10k-labels-idx1-ubyte"}) {
      if (!fs::exists(d / f)) return std::nullopt;
    }
    return d;
  }
};

std::string communities_config(const fs::path& data, const fs::path& out, const std::string& extra) {
  return "dataset = communities\n"
         "data_path = " + data.string() + "\n"
         "model = ridge\n"
         "split = 0.55, 0.20, 0.25\n"
         "split_seed = 0\n"
         "learning_rate = 0.01\n"
         "output = " + out.string() + "\n" + extra;
}

std::string mnist_config(const fs::path& dir, const fs::path& out, int seed, const std::string& extra) {
  const std::string s = std::to_string(seed);
  return "dataset = mnist\n"
         "train_images = " + (dir / "train-images-idx3-ubyte").string() + "\n"
         "train_labels = " + (dir / "train-labels-idx1-ubyte").string() + "\n"
         "test_images = " + (dir / "t10k-images-idx3-ubyte").string() + "\n"
         "test_labels = " + (dir / "t10k-labels-idx1-ubyte").string() + "\n"
         "model = mlp\nhidden = 100\nsubset = 1000\nsplit = 0.75, 0.25\n"
         "scale = log\nlower = -10\nupper = 0\n"
         "epochs = 30\nbatch_size = 32\nlearning_rate = 0.1\n"
         "split_seed = " + s + "\nsolve_seed = " + s + "\nseed = " + s + "\n"
         "output = " + out.string() + "\n" + extra;
}

// 1. Grid oracle on Communities and Crime.
Verdict criterion_1(const Context& ctx) {
  const auto data = ctx.communities();
  if (!data) return Verdict::skip;
  Checks c;
  const auto t0 = Clock::now();
  const auto grid = run_experiment(
      parse_config(communities_config(*data, scratch("c1"), "lower = 0\nupper = 9.9\nmethod = grid\ngrid = 100\n")));
  const double secs = seconds_since(t0);
  const double lam = grid.row.lambda[0];
  c.expect(std::abs(lam - 8.80) <= 0.1 + 1e-9, fmt("grid argmin lambda = %.2f, expected 8.80 +/- 0.1", lam));
  c.expect(grid.row.solve_count == 100, "100 lower solves");
  c.expect(secs < 30.0, fmt("runtime %.1f s < 30 s", secs));
  return c.verdict();
}

// 2. PVM against the grid oracle on Communities and Crime.
Verdict criterion_2(const Context& ctx) {
  const auto data = ctx.communities();
  if (!data) return Verdict::skip;
  Checks c;
  const auto grid = run_experiment(
      parse_config(communities_config(*data, scratch("c2g"), "lower = 0\nupper = 9.9\nmethod = grid\ngrid = 100\n")));
  const auto t0 = Clock::now();
  const auto pvm = run_experiment(parse_config(communities_config(
      *data, scratch("c2p"), "lower = 0\nupper = 10\nmethod = pvm\nsamples = 10\nsampling = uniform_grid\n"
                             "rounds = 4\nR0 = 2\nmu0 = 2\neta = 1.5\n")));
  const double secs = seconds_since(t0);
  const double lam = pvm.row.lambda[0];
  c.expect(std::abs(lam - grid.row.lambda[0]) <= 0.5,
           fmt("PVM lambda* = %.3f within 0.5 of the grid argmin %.2f", lam, grid.row.lambda[0]));
  c.expect(pvm.row.solves_label() == "10 (+4)", "reported lower solves " + pvm.row.solves_label());
  c.expect(pvm.counted_solves == 10, "instrumented counter saw " + std::to_string(pvm.counted_solves));
  c.expect(secs < 30.0, fmt("runtime %.1f s < 30 s", secs));
  return c.verdict();
}

// 3. Loss parity at lambda = 8.80.
Verdict criterion_3(const Context& ctx) {
  const auto data = ctx.communities();
  if (!data) return Verdict::skip;
  Checks c;
  struct Losses {
    double train, validation, test;
  };
  std::vector<Losses> rows;
  for (const char* method : {"pvm", "grid", "bayes"}) {
    const auto config = parse_config(communities_config(
        *data, scratch(std::string("c3") + method), "lower = 0\nupper = 10\nmethod = " + std::string(method) + "\n"));
    const auto problem = build_ridge_problem(config);
    const auto s = solve_lower(problem, HyperVector(problem.space(), Vector::Constant(1, 8.80)), config.budget);
    rows.push_back({problem.training_loss(s.weights), s.upper_loss, problem.test_objective(s.weights)});
    std::printf("  %-5s train %.6f  validation %.6f  test %.6f\n", method, rows.back().train,
                rows.back().validation, rows.back().test);
  }
  double spread = 0.0;
  for (const auto& r : rows) {
    spread = std::max({spread, std::abs(r.train - rows[0].train), std::abs(r.validation - rows[0].validation),
                       std::abs(r.test - rows[0].test)});
  }
  c.expect(spread <= 1e-6, fmt("largest cross-method difference %.3g <= 1e-6", spread));
  c.expect(std::abs(rows[0].train - 0.0095) <= 0.002, fmt("training loss %.4f within 0.002 of 0.0095", rows[0].train));
  c.expect(std::abs(rows[0].validation - 0.0088) <= 0.002,
           fmt("validation loss %.4f within 0.002 of 0.0088", rows[0].validation));
  c.expect(std::abs(rows[0].test - 0.0088) <= 0.002, fmt("test loss %.4f within 0.002 of 0.0088", rows[0].test));
  return c.verdict();
}

// 4. MNIST 1000, one hyperparameter, five seeds.
Verdict criterion_4(const Context& ctx) {
  const auto dir = ctx.mnist_dir();
  if (!dir) return Verdict::skip;
  Checks c;
  const auto t0 = Clock::now();
  int in_box = 0, competitive = 0, accounted = 0;
  for (int seed = 0; seed < 5; ++seed) {
    const auto grid = run_experiment(
        parse_config(mnist_config(*dir, scratch("c4g" + std::to_string(seed)), seed, "method = grid\ngrid = 100\n")));
    const auto pvm = run_experiment(parse_config(
        mnist_config(*dir, scratch("c4p" + std::to_string(seed)), seed, "method = pvm\nsamples = 10\nrounds = 4\n")));
    const double xi = std::log(pvm.row.lambda[0]);
    std::printf("  seed %d: PVM xi* %.3f test %.4f (%s) | grid xi %.3f test %.4f (%lld)\n", seed, xi,
                *pvm.row.test_loss, pvm.row.solves_label().c_str(), std::log(grid.row.lambda[0]),
                *grid.row.test_loss, grid.row.solve_count);
    std::fflush(stdout);
    in_box += (xi >= -10.0 - 1e-12 && xi <= 1e-12);
    competitive += (*pvm.row.test_loss <= *grid.row.test_loss + 0.05);
    accounted += (pvm.row.solves_label() == "10 (+4)" && pvm.counted_solves == 10 && grid.row.solve_count == 100 &&
                  grid.counted_solves == 100);
  }
  const double secs = seconds_since(t0);
  c.expect(in_box == 5, std::to_string(in_box) + "/5 seeds with xi* in [-10, 0]");
  c.expect(competitive >= 4, std::to_string(competitive) + "/5 seeds with PVM test loss <= grid + 0.05 (need 4)");
  c.expect(accounted == 5, std::to_string(accounted) + "/5 seeds with 10 (+4) PVM and 100 grid solves");
  c.expect(secs < 600.0, fmt("runtime %.1f s < 600 s", secs));
  return c.verdict();
}

// 5. Kriging properties.
Verdict criterion_5(const Context&) {
  Checks c;
  auto quadratic = [](int n) {
    Eigen::MatrixXd x(n, 1);
    Vector y(n);
    for (int i = 0; i < n; ++i) {
      x(i, 0) = 4.0 * i / (n - 1);
      y[i] = x(i, 0) * x(i, 0);
    }
    return std::pair{x, y};
  };

  const auto [x10, y10] = quadratic(10);
  const auto m = fit_kriging(x10, y10);
  double interp = 0.0;
  for (Index i = 0; i < x10.rows(); ++i) interp = std::max(interp, std::abs(m.predict(x10.row(i).transpose()) - y10[i]));
  c.expect(m.nugget() == 0.0, fmt("fitted without a nugget (nugget = %g)", m.nugget()));
  c.expect(interp < 1e-6, fmt("interpolation error at sites %.3g < 1e-6", interp));

  const double far = std::abs(m.predict(Vector::Constant(1, 1e4)) - m.mu_hat());
  c.expect(far < 1e-8, fmt("|predict - mu_hat| far from sites %.3g < 1e-8", far));

  Rng rng(5);
  Eigen::MatrixXd x2(15, 2);
  Vector y2(15);
  for (Index i = 0; i < 15; ++i) {
    x2(i, 0) = rng.uniform(-2.0, 2.0);
    x2(i, 1) = rng.uniform(-2.0, 2.0);
    y2[i] = std::sin(x2(i, 0)) + x2(i, 1) * x2(i, 1);
  }
  const auto m2 = fit_kriging(x2, y2);
  double grad_err = 0.0;
  for (int k = 0; k < 10; ++k) {
    const Vector q = testing::random_vector(2, rng, -1.8, 1.8);
    const Vector fd = testing::central_difference([&](const Vector& v) { return m2.predict(v); }, q, 1e-3);
    grad_err = std::max(grad_err, testing::relative_error(m2.grad_predict(q), fd));
  }
  c.expect(grad_err < 1e-4, fmt("grad_predict vs central differences: worst relative error %.3g < 1e-4", grad_err));

  const KrigingOptions options;
  bool improves = true;
  for (const Vector& start : mle_start_points(options, 1)) {
    Vector theta, p;
    decode_kriging_params(options, 1, start, theta, p);
    improves = improves && m.log_likelihood() >= m.concentrated_log_likelihood(theta, p);
  }
  c.expect(improves, fmt("fitted log-likelihood %.4f >= every multi-start initial value", m.log_likelihood()));

  double loo = 0.0;
  for (int drop = 1; drop <= 3; ++drop) {
    Eigen::MatrixXd x(4, 1);
    Vector y(4);
    for (int i = 0, r = 0; i <= 4; ++i) {
      if (i == drop) continue;
      x(r, 0) = i;
      y[r] = i * i;
      ++r;
    }
    const double pred = fit_kriging(x, y).predict(Vector::Constant(1, drop));
    const double err = std::abs(pred - drop * drop);
    std::printf("  leave-one-out at lambda = %d: predicted %.4f, true %d, error %.4f\n", drop, pred, drop * drop, err);
    loo = std::max(loo, err);
  }
  c.expect(loo < 0.1, fmt("5-site lambda^2 leave-one-out error %.4f < 0.1", loo));
  if (loo >= 0.1) {
    c.note("the lambda = 3 error is the same at the likelihood maximum with p fixed at 2 or free in [1, 2];");
    c.note("with lambda = 3 removed, the nearest right-hand site is two units away");
  }
  return c.verdict();
}

// Small ridge problem for the augmented-Lagrangian identities.
auto small_ridge(std::uint64_t seed) {
  Rng rng(seed);
  auto train = testing::linear_data(60, 4, rng, Role::train, 0.3);
  auto val = testing::linear_data(30, 4, rng, Role::validation, 0.3);
  return SupervisedProblem(RidgeModel(4), HyperSpace::uniform(1, Scale::linear, 0.0, 2.0), std::move(train),
                           std::move(val));
}

// 6. Augmented-Lagrangian invariants.
Verdict criterion_6(const Context&) {
  Checks c;
  const auto problem = small_ridge(3);
  const SolveBudget budget{.epochs = 20, .batch_size = 10, .learning_rate = 0.05};
  const auto samples = build_value_samples(problem, problem.space(), 8, SamplingScheme::uniform_grid, budget);
  const KrigingModel surrogate = fit_value_function(samples);

  Rng rng(17);
  double identity = 0.0;
  double grad_err = 0.0;
  for (int k = 0; k < 50; ++k) {
    const HyperVector lam(problem.space(), Vector::Constant(1, rng.uniform(0.0, 2.0)));
    const Vector w = testing::random_vector(problem.parameter_count(), rng);
    const PenaltyState state{rng.uniform(0.1, 20.0), rng.uniform(-5.0, 5.0), 1.5, 0};
    const double p = constraint_violation(problem, surrogate, lam, w);
    const double lhs = penalized_loss(problem, surrogate, lam, w, state) - problem.upper_objective(w);
    const double rhs = 0.5 * state.penalty_R * p * p + state.multiplier * p;
    identity = std::max(identity, std::abs(lhs - rhs) / std::max(1.0, std::abs(rhs)));

    if (k < 10) {
      const auto g = grad_penalized(problem, surrogate, lam, w, state);
      const double interior = std::clamp(lam.coords()[0], 0.05, 1.95);
      Vector joint(w.size() + 1);
      joint << interior, w;
      const Vector fd = testing::central_difference(
          [&](const Vector& v) {
            return penalized_loss(problem, surrogate, HyperVector(problem.space(), v.head(1)), v.tail(w.size()),
                                  state);
          },
          joint, 1e-5);
      const auto gi = grad_penalized(problem, surrogate, HyperVector(problem.space(), joint.head(1)), w, state);
      Vector analytic(joint.size());
      analytic << gi.coords, gi.weights;
      grad_err = std::max(grad_err, testing::relative_error(analytic, fd));
      (void)g;
    }
  }
  c.expect(identity <= 1e-12, fmt("Z - F = (R/2)P^2 + mu P on 50 random inputs: worst relative gap %.3g", identity));
  c.expect(grad_err < 1e-4, fmt("grad_penalized vs central differences: worst relative error %.3g < 1e-4", grad_err));

  PvmConfig config;
  config.rounds = 6;
  config.inner_budget = budget;
  const auto result = run_pvm(problem, config, samples);
  const auto& rec = result.trace.records;
  bool growth = rec.size() == 7;
  bool recurrence = rec.size() == 7;
  for (std::size_t i = 0; i < rec.size(); ++i) {
    growth = growth && rec[i].penalty_R == 2.0 * std::pow(1.5, static_cast<double>(i));
    if (i > 0) {
      recurrence = recurrence && rec[i].multiplier == rec[i - 1].multiplier + rec[i - 1].penalty_R * rec[i].violation;
    }
  }
  c.expect(growth, "R^i = 2 * 1.5^i exactly over 6 rounds");
  c.expect(recurrence, "mu^i - mu^(i-1) = R^(i-1) P^i exactly over 6 rounds");
  return c.verdict();
}

// 7. Analytic toy bilevel problem.
Verdict criterion_7(const Context&) {
  Checks c;
  const testing::ToyProblem toy;
  double best_lam = 0.0, best_F = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= 20000; ++i) {
    const double lam = 1e-4 * i;
    const double F = toy.upper_objective(toy.solve_exact(HyperVector(toy.space(), Vector::Constant(1, lam))));
    if (F < best_F) {
      best_F = F;
      best_lam = lam;
    }
  }
  PvmConfig config;
  config.inner_budget = SolveBudget{.epochs = 50, .batch_size = 1, .learning_rate = 0.05};
  const auto samples =
      build_value_samples(toy, toy.space(), 20, SamplingScheme::uniform_grid, config.inner_budget);
  const auto result = run_pvm(toy, config, samples);
  const double lam = result.best.lambda.lambda(0);
  c.expect(std::abs(lam - best_lam) <= 0.05,
           fmt("PVM lambda* = %.4f, brute-force optimum %.4f (|difference| <= 0.05)", lam, best_lam));
  double phi_err = 0.0;
  for (int i = 0; i <= 40; ++i) {
    const double l = 0.05 * i;
    phi_err = std::max(phi_err, std::abs(result.surrogate.predict(Vector::Constant(1, l)) - testing::ToyProblem::phi(l)));
  }
  c.expect(phi_err < 1e-3, fmt("surrogate matches the exact value function to %.2g", phi_err));
  c.note("the bilevel optimum lies on the boundary lambda = 2 of the search box");
  return c.verdict();
}

// 8. Accounting audit over every reported configuration.
Verdict criterion_8(const Context& ctx) {
  Checks c;
  const fs::path dir = scratch("c8");
  std::optional<fs::path> table = ctx.communities();
  if (!table) {
    table = dir / "communities_synthetic.csv";
    testing::write_synthetic_communities(*table);
    c.note("Communities and Crime not found; auditing on a synthetic table of the same shape");
  }
  auto audit = [&](const std::string& name, const std::string& config_text, const std::string& expected) {
    const auto t0 = Clock::now();
    const auto out = run_experiment(parse_config(config_text));
    const bool ok = out.row.solves_label() == expected && out.counted_solves == out.row.solve_count;
    c.expect(ok, name + ": reported " + out.row.solves_label() + ", counter " + std::to_string(out.counted_solves) +
                     ", expected " + expected + fmt(" (%.1f s)", seconds_since(t0)));
  };
  const std::string box = "lower = 0\nupper = 10\n";
  audit("PVM L = 10", communities_config(*table, dir / "pvm10", box + "method = pvm\nsamples = 10\nrounds = 4\n"),
        "10 (+4)");
  audit("PVM L = 50", communities_config(*table, dir / "pvm50", box + "method = pvm\nsamples = 50\nrounds = 4\n"),
        "50 (+4)");
  audit("grid 100", communities_config(*table, dir / "grid100", box + "method = grid\ngrid = 100\n"), "100");
  for (int total : {50, 100, 1000}) {
    audit("Bayes " + std::to_string(total),
          communities_config(*table, dir / ("bayes" + std::to_string(total)),
                             box + "method = bayes\nbayes_init = 10\nbayes_total = " + std::to_string(total) + "\n"),
          std::to_string(total));
  }

  // Two-hyperparameter MLP rows, on the bundled digit fixture with a
  // one-epoch budget: the count does not depend on the data.
  const fs::path fixtures = PVM_FIXTURE_DIR;
  const std::string mlp2 = "dataset = mnist\n"
                           "train_images = " + (fixtures / "digits-images-idx3-ubyte").string() + "\n"
                           "train_labels = " + (fixtures / "digits-labels-idx1-ubyte").string() + "\n"
                           "model = mlp\nhidden = 8\nsplit = 0.75, 0.25\nhyperparameters = 2\n"
                           "scale = log\nlower = -10\nupper = 0\nepochs = 1\nbatch_size = 15\n";
  audit("grid 40 x 25 (2 hyperparameters)", mlp2 + "method = grid\ngrid = 40x25\noutput = " + (dir / "grid1000").string() + "\n",
        "1000");
  audit("PVM L = 50 (2 hyperparameters)",
        mlp2 + "method = pvm\nsamples = 50\nrounds = 4\noutput = " + (dir / "pvm50_2hp").string() + "\n", "50 (+4)");
  audit("Bayes 100 (2 hyperparameters)",
        mlp2 + "method = bayes\nbayes_init = 10\nbayes_total = 100\noutput = " + (dir / "bayes100_2hp").string() + "\n",
        "100");
  return c.verdict();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  Context ctx;
  int only = 0;
  std::string data_dir = ".";
  app.add_option("--data-dir", data_dir, "Directory holding communities.data and mnist/");
  app.add_option("--criterion", only, "Run a single criterion (1-8); 0 runs all")->check(CLI::Range(0, 8));
  CLI11_PARSE(app, argc, argv);
  ctx.data_dir = data_dir;

  const std::vector<std::function<Verdict(const Context&)>> criteria{
      criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7, criterion_8};
  int failed = 0, skipped = 0, ran = 0;
  for (int i = 1; i <= 8; ++i) {
    if (only != 0 && i != only) continue;
    ++ran;
    std::printf("criterion %d\n", i);
    std::fflush(stdout);
    Verdict v;
    try {
      v = criteria[static_cast<std::size_t>(i - 1)](ctx);
    } catch (const std::exception& e) {
      std::printf("  [FAIL] unexpected error: %s\n", e.what());
      v = Verdict::fail;
    }
    const char* word = v == Verdict::pass ? "PASS" : v == Verdict::fail ? "FAIL" : "SKIP";
    if (v == Verdict::skip) std::printf("  dataset not found under %s\n", data_dir.c_str());
    std::printf("criterion %d: %s\n", i, word);
    std::fflush(stdout);
    failed += v == Verdict::fail;
    skipped += v == Verdict::skip;
  }
  if (failed > 0) return 1;
  return skipped == ran ? 77 : 0;
}
