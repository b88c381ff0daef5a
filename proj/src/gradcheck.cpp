#include "lkconv/gradcheck.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <nlohmann/json.hpp>

namespace lkc {

namespace {

using Params = std::vector<std::pair<std::string, Tensor<double>>>;

double evaluate(const ScalarGraph& f, const Params& params) {
  ad::Tape<double> tape;
  std::vector<ad::Var<double>> vars;
  for (const auto& [name, value] : params) vars.push_back(tape.constant(value));
  auto loss = f(tape, vars);
  if (loss.value().size() != 1) throw DomainError("gradcheck: f must return a scalar");
  return loss.value()[0];
}

}  // namespace

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const auto& e : entries) w = std::max(w, e.max_rel_error);
  return w;
}

std::string GradCheckReport::to_json() const {
  nlohmann::ordered_json j;
  j["check"] = "gradcheck";
  j["h"] = h;
  j["tol"] = tol;
  j["pass"] = pass;
  j["params"] = nlohmann::ordered_json::array();
  for (const auto& e : entries)
    j["params"].push_back({{"name", e.name}, {"max_rel_error", e.max_rel_error}, {"pass", e.pass}});
  return j.dump();
}

GradCheckReport finite_diff_check(const ScalarGraph& f, const Params& params, double h, double tol,
                                  double floor_fraction) {
  if (!(h > 0.0)) throw DomainError("gradcheck: step h must be positive");
  if (!(tol >= 0.0)) throw DomainError("gradcheck: tolerance must be non-negative");
  if (!(floor_fraction >= 0.0)) throw DomainError("gradcheck: floor fraction must be non-negative");

  const double base1 = evaluate(f, params);
  const double base2 = evaluate(f, params);
  if (std::bit_cast<std::uint64_t>(base1) != std::bit_cast<std::uint64_t>(base2))
    throw DomainError("gradcheck aborted: f is not deterministic (" + std::to_string(base1) + " vs " +
                      std::to_string(base2) + ")");
  if (!std::isfinite(base1)) throw DomainError("gradcheck aborted: f is not finite at the base point");

  ad::Tape<double> tape;
  std::vector<ad::Var<double>> vars;
  for (const auto& [name, value] : params) vars.push_back(tape.parameter(value, name));
  const auto grads = tape.backward(f(tape, vars));
  double largest = 0.0;
  for (std::size_t p = 0; p < grads.size(); ++p) largest = std::max(largest, max_abs(grads.at(p)));
  const double floor = floor_fraction * largest;

  GradCheckReport report;
  report.h = h;
  report.tol = tol;
  report.pass = true;
  Params probe = params;
  for (std::size_t p = 0; p < probe.size(); ++p) {
    auto& x = probe[p].second;
    Tensor<double> numeric(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      x[i] = orig + h;
      const double fp = evaluate(f, probe);
      x[i] = orig - h;
      const double fm = evaluate(f, probe);
      x[i] = orig;
      numeric[i] = (fp - fm) / (2.0 * h);
    }
    GradCheckEntry e;
    e.name = probe[p].first;
    const double scale = std::max({max_abs(grads.at(p)), max_abs(numeric), floor});
    const double diff = max_abs_diff(grads.at(p), numeric);
    e.max_rel_error = scale > 0.0 ? diff / scale : diff;
    e.pass = e.max_rel_error <= tol;
    report.pass = report.pass && e.pass;
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace lkc
