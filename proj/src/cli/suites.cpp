#include "osm/cli/suites.hpp"

#include <cmath>
#include <algorithm>
#include <functional>
#include <limits>
#include <ostream>

#include "osm/autodiff/gradcheck.hpp"
#include "osm/autodiff/rng.hpp"
#include "osm/baselines/baselines.hpp"
#include "osm/encoder/encoder.hpp"
#include "osm/orthomask/orthomask.hpp"
#include "osm/tasks/tasks.hpp"
#include "osm/train/config.hpp"

namespace osm::cli {

namespace {

using ad::CounterRng;
using ad::Parameter;
using ad::Tape;
using ad::Tensor;
using ad::Var;
using D = double;

constexpr double kGradTolerance = 1e-4;
constexpr double kEps = 1e-5;

Tensor<D> random(CounterRng& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
  Tensor<D> t(r, c);
  for (auto& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

// Values kept at least `gap` away from every kink in `kinks`.
Tensor<D> away_from(CounterRng& rng, std::size_t r, std::size_t c, std::initializer_list<double> kinks,
                    double gap = 1e-2) {
  Tensor<D> t(r, c);
  for (auto& v : t.storage()) {
    for (;;) {
      v = rng.uniform(-1.5, 1.5);
      bool ok = true;
      for (double k : kinks) ok = ok && std::abs(v - k) > gap;
      if (ok) break;
    }
  }
  return t;
}

// Reduces an output to a scalar with fixed random weights so every output
// coordinate contributes.
Var<D> project(Var<D> y, std::uint64_t key) {
  CounterRng rng(key);
  return ad::sum(ad::mul(y, y.tape->constant(random(rng, y.rows(), y.cols()))));
}

struct Case {
  std::string name;
  // Builds fresh parameters for one instance and returns the objective.
  std::function<std::function<Var<D>(Tape<D>&)>(CounterRng&, std::vector<Parameter<D>>&)> make;
};

std::vector<Case> primitive_cases() {
  using Params = std::vector<Parameter<D>>;
  auto unary = [](std::string name, std::function<Tensor<D>(CounterRng&)> gen,
                  std::function<Var<D>(Var<D>)> op) {
    return Case{name, [gen, op](CounterRng& rng, Params& ps) {
                  ps.emplace_back("x", gen(rng));
                  const auto key = rng.next_u64();
                  return std::function<Var<D>(Tape<D>&)>(
                      [&ps, op, key](Tape<D>& t) { return project(op(t.parameter(ps[0])), key); });
                }};
  };
  auto binary = [](std::string name, std::function<Tensor<D>(CounterRng&)> ga,
                   std::function<Tensor<D>(CounterRng&)> gb, std::function<Var<D>(Var<D>, Var<D>)> op) {
    return Case{name, [ga, gb, op](CounterRng& rng, Params& ps) {
                  ps.emplace_back("a", ga(rng));
                  ps.emplace_back("b", gb(rng));
                  const auto key = rng.next_u64();
                  return std::function<Var<D>(Tape<D>&)>([&ps, op, key](Tape<D>& t) {
                    return project(op(t.parameter(ps[0]), t.parameter(ps[1])), key);
                  });
                }};
  };
  auto m34 = [](CounterRng& r) { return random(r, 3, 4); };
  auto m42 = [](CounterRng& r) { return random(r, 4, 2); };
  auto r14 = [](CounterRng& r) { return random(r, 1, 4); };
  auto s11 = [](CounterRng& r) { return random(r, 1, 1); };
  static const int cols_idx[] = {2, -1, 0, 2, 3};
  static const int rows_idx[] = {1, -1, 0, 2, 2};

  std::vector<Case> cases = {
      binary("matmul", m34, m42, [](Var<D> a, Var<D> b) { return ad::matmul(a, b); }),
      unary("transpose", m34, [](Var<D> a) { return ad::transpose(a); }),
      binary("add", m34, m34, [](Var<D> a, Var<D> b) { return ad::add(a, b); }),
      binary("add_row_broadcast", m34, r14, [](Var<D> a, Var<D> b) { return ad::add(a, b); }),
      binary("add_scalar_broadcast", m34, s11, [](Var<D> a, Var<D> b) { return ad::add(a, b); }),
      binary("sub", m34, m34, [](Var<D> a, Var<D> b) { return ad::sub(a, b); }),
      binary("mul", m34, m34, [](Var<D> a, Var<D> b) { return ad::mul(a, b); }),
      binary("mul_row_broadcast", m34, r14, [](Var<D> a, Var<D> b) { return ad::mul(a, b); }),
      unary("scale", m34, [](Var<D> a) { return ad::scale(a, -1.7); }),
      unary("add_scalar", m34, [](Var<D> a) { return ad::add_scalar(a, 0.3); }),
      unary("slice_cols", m34, [](Var<D> a) { return ad::slice_cols(a, 1, 3); }),
      binary("concat_cols", m34, [](CounterRng& r) { return random(r, 3, 2); },
             [](Var<D> a, Var<D> b) { return ad::concat_cols<D>({a, b, a}); }),
      unary("slice_rows", m34, [](Var<D> a) { return ad::slice_rows(a, 1, 3); }),
      binary("concat_rows", m34, r14, [](Var<D> a, Var<D> b) { return ad::concat_rows<D>({a, b, a}); }),
      unary("take_cols", m34, [](Var<D> a) { return ad::take_cols(a, std::span<const int>(cols_idx), 0.5); }),
      unary("gather_rows", m34, [](Var<D> a) { return ad::gather_rows(a, std::span<const int>(rows_idx)); }),
      unary("relu", [](CounterRng& r) { return away_from(r, 3, 4, {0.0}); }, [](Var<D> a) { return ad::relu(a); }),
      unary("sigmoid", m34, [](Var<D> a) { return ad::sigmoid(a); }),
      unary("swish", m34, [](Var<D> a) { return ad::swish(a); }),
      unary("sqrt", [](CounterRng& r) { return random(r, 3, 4, 0.2, 2.0); }, [](Var<D> a) { return ad::sqrt(a); }),
      unary("clamp", [](CounterRng& r) { return away_from(r, 3, 4, {-0.5, 0.5}); },
            [](Var<D> a) { return ad::clamp(a, -0.5, 0.5); }),
      Case{"layer_norm",
           [](CounterRng& rng, Params& ps) {
             ps.emplace_back("x", random(rng, 3, 5));
             ps.emplace_back("g", random(rng, 1, 5, 0.5, 1.5));
             ps.emplace_back("b", random(rng, 1, 5));
             const auto key = rng.next_u64();
             return std::function<Var<D>(Tape<D>&)>([&ps, key](Tape<D>& t) {
               return project(ad::layer_norm(t.parameter(ps[0]), t.parameter(ps[1]), t.parameter(ps[2])), key);
             });
           }},
      unary("dropout", m34, [](Var<D> a) { return ad::dropout(a, 0.3, 12345); }),
      unary("softmax_rows", m34, [](Var<D> a) { return ad::softmax_rows(a, 0.7); }),
      unary("log_softmax_rows", m34, [](Var<D> a) { return ad::log_softmax_rows(a); }),
      unary("logsumexp_axis0", m34, [](Var<D> a) { return ad::logsumexp(a, 0); }),
      unary("logsumexp_axis1", m34, [](Var<D> a) { return ad::logsumexp(a, 1); }),
      unary("sum", m34, [](Var<D> a) { return ad::scale(ad::sum(a), 1.3); }),
      unary("mean", m34, [](Var<D> a) { return ad::scale(ad::mean(a), 1.3); }),
      unary("sum_axis0", m34, [](Var<D> a) { return ad::sum_axis(a, 0); }),
      unary("sum_axis1", m34, [](Var<D> a) { return ad::sum_axis(a, 1); }),
      Case{"depthwise_conv1d",
           [](CounterRng& rng, Params& ps) {
             ps.emplace_back("x", random(rng, 6, 3));
             ps.emplace_back("w", random(rng, 3, 3));
             ps.emplace_back("b", random(rng, 1, 3));
             const auto key = rng.next_u64();
             return std::function<Var<D>(Tape<D>&)>([&ps, key](Tape<D>& t) {
               return project(ad::depthwise_conv1d(t.parameter(ps[0]), t.parameter(ps[1]), t.parameter(ps[2])),
                              key);
             });
           }},
  };
  return cases;
}

std::vector<Case> model_cases() {
  using Params = std::vector<Parameter<D>>;
  std::vector<Case> cases;
  cases.push_back({"ortho_loss", [](CounterRng& rng, Params& ps) {
                     ps.emplace_back("S", random(rng, 6, 6, -2.0, 2.0));
                     const int k = 2 + static_cast<int>(rng.below(4));
                     return std::function<Var<D>(Tape<D>&)>([&ps, k](Tape<D>& t) {
                       return orthomask::ortho_loss(orthomask::weights(t.parameter(ps[0]), 1.0), k);
                     });
                   }});
  cases.push_back({"hc_sample", [](CounterRng& rng, Params& ps) {
                     // Keep the stretched sigmoid inside (0, 1) so the clamp is inactive.
                     Tensor<D> u(1, 5), la(1, 5);
                     for (std::size_t j = 0; j < 5; ++j) {
                       for (;;) {
                         u[j] = rng.uniform();
                         la[j] = rng.uniform(-2.0, 2.0);
                         const double g = baselines::hc_sample(la[j], u[j]);
                         if (g > 0.02 && g < 0.98) break;
                       }
                     }
                     ps.emplace_back("log_alpha", la);
                     const auto key = rng.next_u64();
                     return std::function<Var<D>(Tape<D>&)>([&ps, u, key](Tape<D>& t) {
                       return project(baselines::hc_sample(t.parameter(ps[0]), u), key);
                     });
                   }});
  cases.push_back({"ctc_loss", [](CounterRng& rng, Params& ps) {
                     const std::size_t frames = 3 + rng.below(5);
                     const std::size_t classes = 3 + rng.below(3);
                     ps.emplace_back("logits", random(rng, frames, classes, -2.0, 2.0));
                     std::vector<int> labels;
                     const std::size_t len = 1 + rng.below(3);
                     for (std::size_t i = 0; i < len; ++i) {
                       labels.push_back(1 + static_cast<int>(rng.below(classes - 1)));
                       if (tasks::ctc_min_frames(labels) > frames) labels.pop_back();
                     }
                     return std::function<Var<D>(Tape<D>&)>([&ps, labels](Tape<D>& t) {
                       return tasks::ctc_loss(ad::log_softmax_rows(t.parameter(ps[0])), labels);
                     });
                   }});
  return cases;
}

// Step 1 objective on a two-block encoder: supernet CTC, focal-weighted
// subnet CTC with gates from the score matrix, and the orthogonality term.
struct CompositeFixture {
  encoder::Encoder<D> enc;
  Parameter<D> scores;
  Tensor<D> x;
  std::vector<int> labels;
  costs::CostVector cost;
  double tau = 0.0;
  double lambda = 0.0;
  double beta = 0.7;

  Var<D> loss(Tape<D>& t) {
    Var<D> w = orthomask::weights(t.parameter(scores), 0.8);
    const int k = orthomask::select_k(w.value(), cost.per_group, tau);
    encoder::ForwardOptions<D> sub;
    sub.gates = orthomask::assemble_mask(w, k);
    Var<D> sup_loss = tasks::ctc_loss(encoder::forward(t, enc, x), labels);
    Var<D> sub_loss = tasks::ctc_loss(encoder::forward(t, enc, x, sub), labels);
    return ad::add(ad::add(sup_loss, ad::scale(sub_loss, lambda)),
                   ad::scale(orthomask::ortho_loss(w, k), beta));
  }
};

}  // namespace

std::vector<SuiteResult> gradient_suite(int instances, std::uint64_t seed) {
  std::vector<SuiteResult> out;
  auto run_case = [&](const Case& c) {
    SuiteResult r{c.name, 0, 0.0, kGradTolerance, true};
    for (int i = 0; i < instances; ++i) {
      CounterRng rng(ad::derive_key({seed, ad::fnv1a(c.name), static_cast<std::uint64_t>(i)}));
      std::vector<Parameter<D>> ps;
      ps.reserve(4);
      auto f = c.make(rng, ps);
      std::vector<Parameter<D>*> ptrs;
      for (auto& p : ps) ptrs.push_back(&p);
      const auto rep = ad::grad_check(ptrs, f, kEps, 200, seed + static_cast<std::uint64_t>(i));
      r.worst = std::max(r.worst, rep.max_rel_error);
      ++r.instances;
    }
    r.passed = r.worst <= r.tolerance;
    out.push_back(r);
  };
  for (const auto& c : primitive_cases()) run_case(c);
  for (const auto& c : model_cases()) run_case(c);

  SuiteResult comp{"step1_composite_loss", 0, 0.0, kGradTolerance, true};
  const int composite_instances = std::max(1, instances / 4);
  for (int i = 0; i < composite_instances; ++i) {
    const auto s = ad::derive_key({seed, ad::fnv1a("composite"), static_cast<std::uint64_t>(i)});
    encoder::EncoderConfig cfg;
    cfg.num_blocks = 2;
    cfg.d_model = 8;
    cfg.d_in = 4;
    cfg.vocab_size = 3;
    cfg.conv_kernel = 3;
    cfg.max_frames = 8;
    cfg.ffn_mult = 2;
    CompositeFixture fx{encoder::Encoder<D>::build(cfg, s), {}, {}, {}, {}, 0.0, 0.0};
    CounterRng rng(s);
    const std::size_t n = fx.enc.registry().size();
    fx.scores = Parameter<D>("scores", random(rng, n, n, -1.0, 1.0));
    fx.x = random(rng, 10, 4);
    fx.labels = {1, 2, 1};
    fx.cost = costs::flops_cost(fx.enc.registry(), cfg, 10);
    fx.tau = 0.6 * fx.cost.maskable_total();
    {
      // Focal weight from the unperturbed subnet loss, held fixed.
      Tape<D> t;
      Var<D> w = orthomask::weights(t.parameter(fx.scores), 0.8);
      encoder::ForwardOptions<D> sub;
      sub.gates = orthomask::assemble_mask(w, orthomask::select_k(w.value(), fx.cost.per_group, fx.tau));
      fx.lambda = train::focal_scale(tasks::ctc_loss(encoder::forward(t, fx.enc, fx.x, sub), fx.labels).value().item(), 1.0);
    }
    // Key biases shift every score of a query row equally, so their exact
    // gradient is zero and the check would only measure round-off.
    std::vector<Parameter<D>*> ptrs;
    for (auto* p : fx.enc.parameters())
      if (!p->name.ends_with("/bk")) ptrs.push_back(p);
    ptrs.push_back(&fx.scores);
    const auto rep = ad::grad_check(ptrs, [&fx](Tape<D>& t) { return fx.loss(t); }, kEps, 200, s);
    comp.worst = std::max(comp.worst, rep.max_rel_error);
    ++comp.instances;
  }
  comp.passed = comp.worst <= comp.tolerance;
  out.push_back(comp);
  return out;
}

namespace {

int prefix_scan(const Tensor<D>& w, const std::vector<double>& c, double tau) {
  int best = 0;
  for (std::size_t k = 1; k <= w.rows(); ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < w.cols(); ++j) s += w(i, j) * c[j];
    if (s < tau) best = static_cast<int>(k);
    else break;
  }
  return best;
}

// sqrt(sum_i (D_ii - 1)^2 + sum_{i<j} D_ij^2) over the top-k rows, D = W W^T.
double direct_ortho(const Tensor<D>& w, int k) {
  double acc = 0.0;
  for (int i = 0; i < k; ++i) {
    for (int j = i; j < k; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < w.cols(); ++c) dot += w(i, c) * w(j, c);
      if (i == j) dot -= 1.0;
      acc += dot * dot;
    }
  }
  return std::sqrt(acc);
}

}  // namespace

std::vector<SuiteResult> oracle_suite(std::uint64_t seed) {
  std::vector<SuiteResult> out;
  {
    SuiteResult r{"select_k_vs_prefix_scan", 0, 0.0, 0.0, true};
    CounterRng rng(ad::derive_key({seed, 1}));
    for (int i = 0; i < 200; ++i) {
      const std::size_t n = 1 + rng.below(20);
      Tensor<D> w = orthomask::weights(random(rng, n, n, -3.0, 3.0), rng.uniform(0.1, 1.0));
      std::vector<double> c(n);
      double total = 0.0;
      for (auto& v : c) total += (v = rng.uniform(0.1, 5.0));
      const double tau = rng.uniform(0.0, 1.2) * total;
      const int got = orthomask::select_k(w, c, tau);
      const int want = prefix_scan(w, c, tau);
      r.worst = std::max(r.worst, static_cast<double>(std::abs(got - want)));
      ++r.instances;
    }
    r.passed = r.worst == 0.0;
    out.push_back(r);
  }
  {
    SuiteResult r{"ortho_loss_closed_form", 0, 0.0, 1e-12, true};
    CounterRng rng(ad::derive_key({seed, 2}));
    for (int i = 0; i < 100; ++i) {
      const std::size_t n = 2 + rng.below(10);
      Tensor<D> w = orthomask::weights(random(rng, n, n, -3.0, 3.0), 1.0);
      const int k = 1 + static_cast<int>(rng.below(n));
      Tape<D> t;
      const double taped = orthomask::ortho_loss(t.constant(w), k).value().item();
      const double want = direct_ortho(w, k);
      r.worst = std::max({r.worst, std::abs(taped - want), std::abs(orthomask::ortho_loss(w, k) - want)});
      ++r.instances;
    }
    Tensor<D> uniform = Tensor<D>::from_rows({{0.5, 0.5}, {0.5, 0.5}});
    r.worst = std::max(r.worst, std::abs(orthomask::ortho_loss(uniform, 2) - std::sqrt(0.75)));
    Tensor<D> onehot = Tensor<D>::from_rows({{0, 1, 0}, {1, 0, 0}, {0, 0, 1}});
    const bool exact_zero = orthomask::ortho_loss(onehot, 3) == 0.0;
    r.instances += 2;
    r.passed = r.worst <= r.tolerance && exact_zero;
    out.push_back(r);
  }
  {
    SuiteResult r{"ctc_vs_brute_force", 0, 0.0, 1e-9, true};
    CounterRng rng(ad::derive_key({seed, 3}));
    for (int i = 0; i < 100; ++i) {
      const std::size_t frames = 1 + rng.below(6);
      const std::size_t classes = 2 + rng.below(4);  // blank + up to 4 labels
      Tape<D> t;
      Var<D> lp = ad::log_softmax_rows(t.constant(random(rng, frames, classes, -2.0, 2.0)));
      std::vector<int> labels;
      const std::size_t len = rng.below(4);
      for (std::size_t j = 0; j < len; ++j) {
        labels.push_back(1 + static_cast<int>(rng.below(classes - 1)));
        if (tasks::ctc_min_frames(labels) > frames) labels.pop_back();
      }
      const double dp = tasks::ctc_loss(lp, labels).value().item();
      const double bf = tasks::ctc_brute_force(lp.value(), labels);
      r.worst = std::max(r.worst, std::abs(dp - bf));
      ++r.instances;
    }
    r.passed = r.worst <= r.tolerance;
    out.push_back(r);
  }
  {
    SuiteResult r{"ctc_hand_cases", 3, 0.0, 5e-6, true};
    const double half = std::log(0.5);
    auto loss = [](Tensor<D> lp, std::vector<int> labels) {
      Tape<D> t;
      return tasks::ctc_loss(t.constant(std::move(lp)), labels).value().item();
    };
    r.worst = std::max(r.worst, std::abs(loss(Tensor<D>::from_rows({{half, half}}), {1}) + std::log(0.5)));
    r.worst = std::max(r.worst,
                       std::abs(loss(Tensor<D>::from_rows({{half, half}, {half, half}}), {1}) + std::log(0.75)));
    r.worst = std::max(r.worst, std::abs(loss(Tensor<D>::from_rows({{half, half}, {half, half}}), {}) - std::log(4.0)));
    r.passed = r.worst <= r.tolerance;
    out.push_back(r);
  }
  return out;
}

bool print_results(std::ostream& os, const std::vector<SuiteResult>& results) {
  bool all = true;
  for (const auto& r : results) {
    os << (r.passed ? "PASS " : "FAIL ") << r.name << " instances=" << r.instances << " worst=" << r.worst
       << " tol=" << r.tolerance << '\n';
    all = all && r.passed;
  }
  return all;
}

}  // namespace osm::cli
