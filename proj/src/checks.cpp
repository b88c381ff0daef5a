#include "lkconv/checks.hpp"

#include <nlohmann/json.hpp>

#include "lkconv/netseg.hpp"
#include "lkconv/ops.hpp"
#include "lkconv/rng.hpp"

namespace lkc {

namespace {

using V = ad::Var<double>;
using Params = std::vector<std::pair<std::string, Tensor<double>>>;

Tensor<double> rand(const Shape& s, std::uint64_t seed, double std = 1.0) {
  Rng rng(seed);
  return Tensor<double>::randn(s, rng, std);
}

// Weighted sum with fixed random weights so every output element matters.
V project(ad::Tape<double>& t, V out, std::uint64_t seed) {
  return ad::sum(ad::mul(out, t.constant(rand(out.shape(), seed))));
}

void add_case(std::vector<NamedGradCheck>& out, const std::string& name, const Params& params, const ScalarGraph& f,
              double h, double tol) {
  out.push_back({name, finite_diff_check(f, params, h, tol)});
}

}  // namespace

std::vector<NamedGradCheck> gradcheck_suite(double h, double tol) {
  std::vector<NamedGradCheck> out;
  const Shape act{2, 3, 4, 4, 4};
  using T = ad::Tape<double>;
  using P = std::vector<V>;
  add_case(out, "add", {{"a", rand({3, 4}, 1)}, {"b", rand({3, 4}, 2)}},
           [](T& t, const P& p) { return project(t, ad::add(p[0], p[1]), 3); }, h, tol);
  add_case(out, "sub", {{"a", rand({3, 4}, 4)}, {"b", rand({3, 4}, 5)}},
           [](T& t, const P& p) { return project(t, ad::sub(p[0], p[1]), 6); }, h, tol);
  add_case(out, "mul", {{"a", rand({3, 4}, 7)}, {"b", rand({3, 4}, 8)}},
           [](T& t, const P& p) { return project(t, ad::mul(p[0], p[1]), 9); }, h, tol);
  add_case(out, "scale", {{"a", rand({5}, 10)}}, [](T& t, const P& p) { return project(t, ad::scale(p[0], 0.3), 11); },
           h, tol);
  add_case(out, "sum", {{"a", rand({2, 3}, 12)}}, [](T&, const P& p) { return ad::scale(ad::sum(p[0]), 1.5); }, h,
           tol);
  add_case(out, "half_sq_norm", {{"a", rand({6}, 13)}}, [](T&, const P& p) { return ad::half_sq_norm(p[0]); }, h, tol);
  add_case(out, "half_sq_error", {{"a", rand({2, 5}, 14)}},
           [](T&, const P& p) { return ad::half_sq_error(p[0], rand({2, 5}, 15)); }, h, tol);
  add_case(out, "scale_by_grid", {{"w", rand({2, 3, 3, 3}, 16)}},
           [](T& t, const P& p) { return project(t, ad::scale_by_grid(p[0], rand({3, 3, 3}, 17)), 18); }, h, tol);
  add_case(out, "dwconv3d", {{"x", rand({2, 2, 5, 4, 3}, 19)}, {"w", rand({2, 3, 3, 3}, 20)}},
           [](T& t, const P& p) { return project(t, ad::dwconv3d(p[0], p[1]), 21); }, h, tol);
  add_case(out, "batch_norm_train", {{"x", rand(act, 22)}, {"gamma", rand({3}, 23)}, {"beta", rand({3}, 24)}},
           [](T& t, const P& p) { return project(t, ad::batch_norm_train(p[0], p[1], p[2], 1e-5), 25); }, h, tol);
  add_case(out, "batch_norm_eval", {{"x", rand(act, 26)}, {"gamma", rand({3}, 27)}, {"beta", rand({3}, 28)}},
           [](T& t, const P& p) {
             auto rv = map(rand({3}, 30), [](double v) { return 0.5 + v * v; });
             return project(t, ad::batch_norm_eval(p[0], p[1], p[2], rand({3}, 29), rv, 1e-5), 31);
           },
           h, tol);
  add_case(out, "gelu", {{"x", rand({4, 5}, 32, 2.0)}}, [](T& t, const P& p) { return project(t, ad::gelu(p[0]), 33); },
           h, tol);
  add_case(out, "pointwise", {{"x", rand(act, 34)}, {"w", rand({5, 3}, 35)}, {"b", rand({5}, 36)}},
           [](T& t, const P& p) { return project(t, ad::pointwise(p[0], p[1], p[2]), 37); }, h, tol);
  add_case(out, "downsample", {{"x", rand(act, 38)}, {"w", rand({4, 3, 2, 2, 2}, 39)}, {"b", rand({4}, 40)}},
           [](T& t, const P& p) { return project(t, ad::downsample(p[0], p[1], p[2]), 41); }, h, tol);
  add_case(out, "upsample2", {{"x", rand({1, 2, 2, 3, 2}, 42)}},
           [](T& t, const P& p) { return project(t, ad::upsample2(p[0]), 43); }, h, tol);
  add_case(out, "concat_channels", {{"a", rand({2, 1, 3, 3, 3}, 44)}, {"b", rand({2, 2, 3, 3, 3}, 45)}},
           [](T& t, const P& p) { return project(t, ad::concat_channels(p[0], p[1]), 46); }, h, tol);
  add_case(out, "soft_dice_loss", {{"z", rand({2, 3, 4, 4, 4}, 47)}},
           [](T&, const P& p) {
             Rng rng(48);
             Tensor<std::uint8_t> labels({2, 4, 4, 4});
             for (auto& l : labels.data()) l = static_cast<std::uint8_t>(rng.below(3));
             return ad::soft_dice_loss(p[0], labels);
           },
           h, tol);
  add_case(out, "center_sum", {{"x", rand({2, 3, 5, 4, 3}, 49)}},
           [](T&, const P& p) { return ad::center_sum(p[0], 1); }, h, tol);

  const auto x = rand({2, 1, 8, 8, 8}, 50);
  for (auto mode : {ConvMode::plain, ConvMode::bfr, ConvMode::csla}) {
    SegNetConfig cfg;
    cfg.channels = {4, 4};
    cfg.kernels = {3, 3};
    cfg.mode = mode;
    const SegNet<double> net(cfg, 51);
    Params params;
    for (const auto& n : net.params().names()) params.emplace_back(n, net.params()[n]);
    const auto names = net.params().names();
    auto f = [&net, &names, &x](T& t, const P& vars) {
      Bound<double> b;
      for (std::size_t i = 0; i < names.size(); ++i) b.emplace(names[i], vars[i]);
      return project(t, net.forward(b, t.constant(x), true), 52);
    };
    add_case(out, std::string("network/") + mode_name(mode), params, f, h, tol);
  }
  return out;
}

bool all_pass(const std::vector<NamedGradCheck>& suite) {
  for (const auto& c : suite)
    if (!c.report.pass) return false;
  return true;
}

std::string suite_json(const std::vector<NamedGradCheck>& suite) {
  nlohmann::ordered_json j;
  j["check"] = "gradcheck";
  j["pass"] = all_pass(suite);
  j["cases"] = nlohmann::ordered_json::array();
  for (const auto& c : suite) {
    auto r = nlohmann::ordered_json::parse(c.report.to_json());
    r.erase("check");
    nlohmann::ordered_json e;
    e["name"] = c.name;
    e["worst"] = c.report.worst();
    for (auto& [k, v] : r.items()) e[k] = v;
    j["cases"].push_back(e);
  }
  return j.dump();
}

}  // namespace lkc
