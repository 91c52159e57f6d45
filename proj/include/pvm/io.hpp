#ifndef PVM_IO_HPP
#define PVM_IO_HPP

// JSON and CSV serialization of surrogates, traces and tuner output.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pvm/baselines.hpp"
#include "pvm/error.hpp"
#include "pvm/kriging.hpp"
#include "pvm/penalized_solver.hpp"

namespace pvm {

using Json = nlohmann::json;

inline Json to_json_array(const Vector& v) {
  Json a = Json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline Vector vector_from_json(const Json& a) {
  Vector v(static_cast<Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) v[static_cast<Index>(i)] = a[i].get<double>();
  return v;
}

/// {"sites": [[...], ...], "values", "theta", "p", "mu_hat", "sigma2_hat",
///  "nugget", "log_likelihood"}. Sites are in sampling-scale coordinates.
inline Json kriging_to_json(const KrigingModel& m) {
  Json sites = Json::array();
  for (Index i = 0; i < m.size(); ++i) sites.push_back(to_json_array(m.sites().row(i).transpose()));
  return Json{{"sites", sites},
              {"values", to_json_array(m.values())},
              {"theta", to_json_array(m.theta())},
              {"p", to_json_array(m.p())},
              {"mu_hat", m.mu_hat()},
              {"sigma2_hat", m.sigma2_hat()},
              {"nugget", m.nugget()},
              {"log_likelihood", m.log_likelihood()}};
}

/// Rebuilds a model from its JSON form by refactorizing with the stored
/// parameters; no likelihood search is run.
inline KrigingModel kriging_from_json(const Json& j) {
  try {
    const auto& sites = j.at("sites");
    if (sites.empty()) throw ParseError("surrogate has no sites", 0);
    Eigen::MatrixXd x(static_cast<Index>(sites.size()), static_cast<Index>(sites[0].size()));
    for (std::size_t i = 0; i < sites.size(); ++i) x.row(static_cast<Index>(i)) = vector_from_json(sites[i]).transpose();
    auto m = KrigingModel::build(std::move(x), vector_from_json(j.at("values")), vector_from_json(j.at("theta")),
                                 vector_from_json(j.at("p")), j.at("nugget").get<double>());
    if (!m) throw FitError("stored surrogate parameters no longer factorize");
    return *m;
  } catch (const Json::exception& e) {
    throw ParseError(std::string("malformed surrogate JSON: ") + e.what(), 0);
  }
}

inline Json record_to_json(const PvmRecord& r) {
  return Json{{"round", r.round},
              {"coords", to_json_array(r.coords)},
              {"lambda", to_json_array(r.lambda)},
              {"upper", r.upper},
              {"lower", r.lower},
              {"phi_hat", r.phi_hat},
              {"violation", r.violation},
              {"penalized", r.penalized},
              {"penalty_R", r.penalty_R},
              {"multiplier", r.multiplier}};
}

inline PvmRecord record_from_json(const Json& j) {
  PvmRecord r;
  r.round = j.at("round").get<int>();
  r.coords = vector_from_json(j.at("coords"));
  r.lambda = vector_from_json(j.at("lambda"));
  r.upper = j.at("upper").get<double>();
  r.lower = j.at("lower").get<double>();
  r.phi_hat = j.at("phi_hat").get<double>();
  r.violation = j.at("violation").get<double>();
  r.penalized = j.at("penalized").get<double>();
  r.penalty_R = j.at("penalty_R").get<double>();
  r.multiplier = j.at("multiplier").get<double>();
  return r;
}

/// One JSON object per line, round 0 (the start) first.
inline void write_trace_jsonl(const PvmTrace& trace, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path.string(), 0);
  for (const auto& r : trace.records) out << record_to_json(r).dump() << '\n';
}

inline PvmTrace read_trace_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string(), 0);
  PvmTrace t;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      t.records.push_back(record_from_json(Json::parse(line)));
    } catch (const Json::exception& e) {
      throw ParseError("trace line " + std::to_string(line_no) + ": " + e.what(), line_no);
    }
  }
  return t;
}

inline void write_json(const Json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path.string(), 0);
  out << j.dump(2) << '\n';
}

inline Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string(), 0);
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw ParseError(path.string() + ": " + e.what(), 0);
  }
}

/// Shortest decimal text that round-trips the double.
inline std::string format_double(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

/// Tuner history as CSV: index, coords..., lambda..., upper_loss, f_star, fallback.
inline void write_history_csv(const std::vector<HistoryEntry>& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path.string(), 0);
  if (history.empty()) return;
  const int n = history.front().lambda.dimension();
  out << "index";
  for (int k = 0; k < n; ++k) out << ",coord" << k;
  for (int k = 0; k < n; ++k) out << ",lambda" << k;
  out << ",validation_loss,lower_value,fallback\n";
  for (std::size_t i = 0; i < history.size(); ++i) {
    const auto& h = history[i];
    out << i;
    for (int k = 0; k < n; ++k) out << ',' << format_double(h.lambda.coords()[k]);
    for (int k = 0; k < n; ++k) out << ',' << format_double(h.lambda.lambda(k));
    out << ',' << format_double(h.upper_loss) << ',' << format_double(h.f_star) << ','
        << (h.fallback ? 1 : 0) << '\n';
  }
}

}  // namespace pvm

#endif  // PVM_IO_HPP
