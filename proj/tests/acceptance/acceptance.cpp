// Acceptance checks. Usage: osm_acceptance [criterion ...] (default: all).
// Prints one PASS/FAIL line per criterion; exits non-zero if any failed.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "osm/autodiff/rng.hpp"
#include "osm/baselines/baselines.hpp"
#include "osm/cli/config_file.hpp"
#include "osm/cli/suites.hpp"
#include "osm/costs/costs.hpp"
#include "osm/encoder/encoder.hpp"
#include "osm/orthomask/learner.hpp"
#include "osm/orthomask/orthomask.hpp"
#include "osm/tasks/tasks.hpp"
#include "osm/train/pipeline.hpp"
#include "osm/train/standalone.hpp"
#include "osm/train/trainer.hpp"

namespace fs = std::filesystem;
using namespace osm;
using ad::Tensor;
using encoder::MaskVector;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

train::RunConfig toy_config() { return cli::load_run_config(fs::path(OSM_SOURCE_DIR) / "configs" / "toy.ini"); }

void set_subnets(train::RunConfig& c, std::vector<double> fractions) {
  c.subnets.clear();
  for (double f : fractions) c.subnets.push_back({costs::Criterion::flops, costs::Budget::Kind::fraction, f});
}

Tensor<double> random_matrix(ad::CounterRng& rng, std::size_t r, std::size_t c, double scale) {
  Tensor<double> t(r, c);
  for (auto& v : t.storage()) v = rng.uniform(-scale, scale);
  return t;
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  const double start = cpu_seconds();
  const auto results = cli::gradient_suite(20, 7);
  const double used = cpu_seconds() - start;
  double worst = 0.0;
  bool ok = true;
  std::string failing;
  for (const auto& r : results) {
    worst = std::max(worst, r.worst);
    if (!r.passed || r.instances < 5) {
      ok = false;
      failing += " " + r.name;
    }
  }
  ok = ok && worst <= 1e-4 && used < 120.0;
  return {ok, std::to_string(results.size()) + " suites, worst rel err " + fmt("%.3g", worst) + ", cpu " +
                  fmt("%.1f", used) + "s" + (failing.empty() ? "" : ", failing:" + failing)};
}

Outcome select_k_oracle() {
  ad::CounterRng rng(ad::derive_key({2026, 4}));
  int mismatches = 0;
  for (int i = 0; i < 200; ++i) {
    const std::size_t n = 1 + rng.below(20);
    const Tensor<double> w = orthomask::weights(random_matrix(rng, n, n, 3.0), rng.uniform(0.1, 1.0));
    std::vector<double> c(n);
    double total = 0.0;
    for (auto& v : c) total += (v = std::floor(rng.uniform(1.0, 50.0)));
    const double tau = rng.uniform(0.0, 1.2) * total;
    // Exhaustive: every prefix length, keep the largest admissible one among
    // those whose shorter prefixes are admissible too.
    int want = 0;
    for (std::size_t k = 1; k <= n; ++k) {
      double s = 0.0;
      for (std::size_t r = 0; r < k; ++r)
        for (std::size_t j = 0; j < n; ++j) s += w(r, j) * c[j];
      if (!(s < tau)) break;
      want = static_cast<int>(k);
    }
    mismatches += orthomask::select_k(w, c, tau) != want ? 1 : 0;
  }
  return {mismatches == 0, "200 triples, " + std::to_string(mismatches) + " mismatches"};
}

double direct_ortho(const Tensor<double>& w, int k) {
  double diag = 0.0, off = 0.0;
  for (int i = 0; i < k; ++i) {
    for (int j = i; j < k; ++j) {
      double d = 0.0;
      for (std::size_t c = 0; c < w.cols(); ++c) d += w(i, c) * w(j, c);
      if (i == j) diag += (d - 1.0) * (d - 1.0);
      else off += d * d;
    }
  }
  return std::sqrt(diag + off);
}

Outcome ortho_closed_form() {
  ad::CounterRng rng(ad::derive_key({2026, 5}));
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 2 + rng.below(12);
    const Tensor<double> w = orthomask::weights(random_matrix(rng, n, n, 3.0), 1.0);
    const int k = 1 + static_cast<int>(rng.below(n));
    ad::Tape<double> tape;
    const double taped = orthomask::ortho_loss(tape.constant(w), k).value().item();
    worst = std::max({worst, std::abs(taped - direct_ortho(w, k)), std::abs(orthomask::ortho_loss(w, k) - direct_ortho(w, k))});
  }
  const auto onehot = Tensor<double>::from_rows({{0, 0, 1, 0}, {1, 0, 0, 0}, {0, 0, 0, 1}});
  ad::Tape<double> tape;
  const bool zero = orthomask::ortho_loss(onehot, 3) == 0.0 &&
                    orthomask::ortho_loss(tape.constant(onehot), 3).value().item() == 0.0;
  const double uniform = orthomask::ortho_loss(Tensor<double>::from_rows({{0.5, 0.5}, {0.5, 0.5}}), 2);
  const double uni_err = std::abs(uniform - std::sqrt(0.75));
  return {worst <= 1e-12 && zero && uni_err <= 1e-12,
          "worst |diff| " + fmt("%.3g", worst) + ", one-hot exact zero " + (zero ? "yes" : "no") + ", uniform 2x2 err " +
              fmt("%.3g", uni_err)};
}

// Sum over every length-T path whose collapse equals the labels.
double enumerate_ctc(const Tensor<double>& lp, const std::vector<int>& labels) {
  const std::size_t frames = lp.rows(), classes = lp.cols();
  std::vector<int> path(frames, 0);
  double total = 0.0;
  for (;;) {
    std::vector<int> collapsed;
    int prev = -1;
    for (int s : path) {
      if (s != prev && s != 0) collapsed.push_back(s);
      prev = s;
    }
    if (collapsed == labels) {
      double logp = 0.0;
      for (std::size_t t = 0; t < frames; ++t) logp += lp(t, static_cast<std::size_t>(path[t]));
      total += std::exp(logp);
    }
    std::size_t pos = 0;
    while (pos < frames && ++path[pos] == static_cast<int>(classes)) path[pos++] = 0;
    if (pos == frames) break;
  }
  return -std::log(total);
}

Outcome ctc_oracle() {
  ad::CounterRng rng(ad::derive_key({2026, 6}));
  double worst = 0.0;
  int done = 0;
  while (done < 100) {
    const std::size_t frames = 1 + rng.below(6);
    const std::size_t vocab = 1 + rng.below(4);
    std::vector<int> labels(rng.below(4));
    for (auto& l : labels) l = 1 + static_cast<int>(rng.below(vocab));
    if (tasks::ctc_min_frames(labels) > frames) continue;
    ad::Tape<double> tape;
    auto lp = ad::log_softmax_rows(tape.constant(random_matrix(rng, frames, vocab + 1, 2.0)));
    worst = std::max(worst, std::abs(tasks::ctc_loss(lp, labels).value().item() - enumerate_ctc(lp.value(), labels)));
    ++done;
  }
  const double h = std::log(0.5);
  auto dp = [](Tensor<double> lp, std::vector<int> y) {
    ad::Tape<double> tape;
    return tasks::ctc_loss(tape.constant(std::move(lp)), y).value().item();
  };
  const double c1 = dp(Tensor<double>::from_rows({{h, h}}), {1});
  const double c2 = dp(Tensor<double>::from_rows({{h, h}, {h, h}}), {1});
  const double c3 = dp(Tensor<double>::from_rows({{h, h}, {h, h}}), {});
  auto five = [](double a, double b) { return std::abs(a - b) < 5e-6; };
  const bool hand = five(c1, 0.69315) && five(c2, 0.28768) && five(c3, 1.38629);
  return {worst <= 1e-9 && hand, "100 instances worst |diff| " + fmt("%.3g", worst) + ", hand cases " +
                                     fmt("%.5f", c1) + " " + fmt("%.5f", c2) + " " + fmt("%.5f", c3)};
}

Outcome convergence() {
  const double start = cpu_seconds();
  auto config = toy_config();
  set_subnets(config, {0.4, 0.7});
  cli::refresh_identity(config);
  const auto corpus = tasks::generate(config.task);
  train::Trainer<float> trainer(config, corpus);
  while (trainer.step() < trainer.step1_steps()) trainer.advance();
  const long updates = trainer.step();
  trainer.transition();
  auto* learner = dynamic_cast<orthomask::OrthoSoftmaxLearner*>(&trainer.learner());
  if (!learner) return {false, "toy config does not use the orthosoftmax learner"};
  const Tensor<double> w = learner->weights_at(updates - 1);
  const auto& plans = trainer.plans();
  int k = 0;
  for (const auto& p : plans) k = std::max(k, p.k);

  double linf = 0.0, dot_max = 0.0;
  for (int i = 0; i < k; ++i) {
    const auto row = static_cast<std::size_t>(i);
    std::size_t arg = 0;
    for (std::size_t j = 1; j < w.cols(); ++j)
      if (w(row, j) > w(row, arg)) arg = j;
    for (std::size_t j = 0; j < w.cols(); ++j) linf = std::max(linf, std::abs(w(row, j) - (j == arg ? 1.0 : 0.0)));
    for (int r = i + 1; r < k; ++r) {
      double d = 0.0;
      for (std::size_t j = 0; j < w.cols(); ++j) d += w(row, j) * w(static_cast<std::size_t>(r), j);
      dot_max = std::max(dot_max, d);
    }
  }
  bool verified = true;
  for (const auto& p : plans) verified = verified && costs::verify(p.mask, trainer.cost(), p.tau);
  bool nested = true;
  for (std::size_t j = 0; j < plans[0].mask.size(); ++j)
    nested = nested && (plans[0].mask.values[j] == 0.0 || plans[1].mask.values[j] == 1.0);
  const double used = cpu_seconds() - start;
  const bool ok = updates >= 8000 && linf <= 0.05 && dot_max <= 1e-2 && verified && nested && used < 600.0;
  return {ok, std::to_string(updates) + " Step 1 updates, top-" + std::to_string(k) + " rows L-inf to one-hot " +
                  fmt("%.3g", linf) + ", max pairwise dot " + fmt("%.3g", dot_max) + ", verify " +
                  (verified ? "ok" : "FAILED") + ", nested " + (nested ? "yes" : "no") + ", cpu " + fmt("%.0f", used) +
                  "s"};
}

Outcome end_to_end() {
  const double start = cpu_seconds();
  double joint_super = 0, joint_sub = 0, solo_super = 0, solo_sub = 0;
  std::ostringstream per_seed;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto config = toy_config();
    set_subnets(config, {0.5, 0.7});
    config.train.seed = seed;
    cli::refresh_identity(config);
    const auto corpus = tasks::generate(config.task);
    train::Trainer<float> joint(config, corpus);
    while (!joint.done()) joint.advance();
    const double js = joint.evaluate_dev(-1);
    const double jm = joint.evaluate_dev(0);
    const MaskVector arch = joint.plans()[0].mask;

    const auto sup = train::train_standalone<float>(config, corpus);
    const double ss = train::evaluate<float>(sup, nullptr, std::nullopt, corpus.dev);
    const auto sub = train::train_standalone<float>(config, corpus, &arch);
    const double sm = train::evaluate<float>(sub, nullptr, std::nullopt, corpus.dev);
    per_seed << " [seed " << seed << ": joint " << fmt("%.2f", js) << "/" << fmt("%.2f", jm) << ", solo "
             << fmt("%.2f", ss) << "/" << fmt("%.2f", sm) << "]";
    joint_super += js / 3;
    joint_sub += jm / 3;
    solo_super += ss / 3;
    solo_sub += sm / 3;
  }
  const double used = cpu_seconds() - start;
  const bool ok = joint_super <= solo_super + 1.0 && joint_sub <= solo_sub + 2.0 && used < 1800.0;
  return {ok, "mean LER supernet joint " + fmt("%.2f", joint_super) + " vs standalone " + fmt("%.2f", solo_super) +
                  ", 50% subnet joint " + fmt("%.2f", joint_sub) + " vs separate " + fmt("%.2f", solo_sub) + ", cpu " +
                  fmt("%.0f", used) + "s;" + per_seed.str()};
}

Outcome cost_exactness() {
  auto cfg = toy_config().model;
  const auto reg = encoder::GroupRegistry::build(cfg);
  const int frames = 50;
  const auto cost = costs::flops_cost(reg, cfg, frames);
  const auto enc64 = encoder::Encoder<double>::build(cfg, 3);
  auto enc32 = encoder::Encoder<float>::build(cfg, 3);
  ad::CounterRng rng(ad::derive_key({2026, 7}));
  int flop_mismatch = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    MaskVector mask = MaskVector::zeros(reg.size());
    for (auto& v : mask.values) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
    Tensor<double> x(2 * frames, static_cast<std::size_t>(cfg.d_in));
    for (auto& v : x.storage()) v = rng.normal();
    const auto measured = costs::measured_flops(enc64, mask, x);
    flop_mismatch += static_cast<double>(measured) != cost.base + cost.selected(mask) ? 1 : 0;

    const Tensor<float> xf = x.cast<float>();
    ad::Tape<float> t1, t2;
    encoder::ForwardOptions<float> opts;
    opts.gates = t1.constant(Tensor<float>::row(std::vector<float>(mask.values.begin(), mask.values.end())));
    const auto masked = encoder::forward(t1, enc32, xf, opts).value();
    auto pruned = encoder::structural_prune(enc32, mask);
    worst = std::max(worst, static_cast<double>(ad::max_abs_diff(masked, encoder::forward(t2, pruned, xf).value())));
  }
  return {flop_mismatch == 0 && worst <= 1e-5, "20 masks, " + std::to_string(flop_mismatch) +
                                                    " MAC mismatches, prune/mask f32 max diff " + fmt("%.3g", worst)};
}

Outcome schedules() {
  std::vector<std::string> failed;
  auto check = [&](bool ok, const std::string& what) {
    std::cout << "  " << (ok ? "ok   " : "FAIL ") << what << '\n';
    if (!ok) failed.push_back(what);
  };
  check(orthomask::temperature(0) == 1.0, "temperature(0) = 1");
  const double t100k = orthomask::temperature(100000);
  check(std::abs(t100k - std::exp(-0.8)) <= 1e-6,
        "temperature(100000) = e^-0.8 +- 1e-6 (got " + fmt("%.9f", t100k) + ", e^-0.8 = " + fmt("%.9f", std::exp(-0.8)) +
            ", diff " + fmt("%.3g", t100k - std::exp(-0.8)) + ")");
  check(std::abs(t100k - std::pow(0.999992, 100000)) <= 1e-15, "temperature(100000) = 0.999992^100000");
  const long floor_step = static_cast<long>(std::ceil(std::log(0.1) / std::log(0.999992)));
  bool held = orthomask::temperature(floor_step) == 0.1 && orthomask::temperature(floor_step - 1) > 0.1;
  for (long s : {floor_step + 1, floor_step * 2, floor_step * 10}) held = held && orthomask::temperature(s) == 0.1;
  check(held, "floor 0.1 reached at step " + std::to_string(floor_step) + " and held");
  train::TrainConfig tc;
  tc.total_steps = 13400;
  check(train::beta_at(tc, 0) == 0.0, "beta(0) = 0");
  check(train::beta_at(tc, tc.step1_steps() - 1) == 1.0, "beta(step1 end) = 1");
  check(train::focal_scale_from_prob(0.75, 1.0) == 0.25, "focal lambda(p = 0.75) = 0.25");
  std::string detail = std::to_string(7 - failed.size()) + "/7 checks";
  for (const auto& f : failed) detail += "; failed: " + f;
  return {failed.empty(), detail};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<std::string> rows_from(const std::string& csv, long step) {
  std::vector<std::string> out;
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line))
    if (!line.empty() && std::stol(line.substr(0, line.find(','))) >= step) out.push_back(line);
  return out;
}

Outcome determinism() {
  auto config = toy_config();
  config.train.total_steps = 120;
  config.train.precision = train::Precision::f64;
  config.task.train_size = 300;
  config.task.dev_size = 50;
  cli::refresh_identity(config);
  const auto corpus = tasks::generate(config.task, 1);
  const fs::path root = fs::temp_directory_path() / "osm_acceptance_determinism";
  fs::remove_all(root);
  auto run = [&](const std::string& name, long stop, std::optional<fs::path> resume) {
    train::RunOptions opt;
    opt.out_dir = root / name;
    opt.stop_at = stop;
    opt.resume = resume;
    return train::run_training(config, corpus, opt);
  };
  run("a", -1, std::nullopt);
  run("b", -1, std::nullopt);
  const bool same_metrics = slurp(root / "a" / "metrics.csv") == slurp(root / "b" / "metrics.csv");
  const bool same_masks = slurp(root / "a" / "masks.json") == slurp(root / "b" / "masks.json");

  // Interrupt once inside Step 1 and once inside Step 2.
  const long s1 = config.train.step1_steps();
  bool resumed = true;
  for (long cut : {s1 / 2, s1 + 10}) {
    const std::string name = "cut" + std::to_string(cut);
    run(name, cut, std::nullopt);
    fs::copy_file(root / name / "checkpoint.orsm", root / (name + ".orsm"));
    run(name, -1, root / (name + ".orsm"));
    const auto full = slurp(root / "a" / "metrics.csv");
    const auto again = slurp(root / name / "metrics.csv");
    resumed = resumed && rows_from(full, cut) == rows_from(again, cut) && full == again &&
              slurp(root / "a" / "masks.json") == slurp(root / name / "masks.json");
  }
  fs::remove_all(root);
  return {same_metrics && same_masks && resumed,
          std::string("metrics ") + (same_metrics ? "identical" : "DIFFER") + ", masks " +
              (same_masks ? "identical" : "DIFFER") + ", resume at Step 1 and Step 2 " + (resumed ? "exact" : "DIVERGED")};
}

Outcome baseline_smoke() {
  std::ostringstream detail;
  bool ok = true;
  for (auto kind : {train::LearnerKind::topk_ste, train::LearnerKind::l0, train::LearnerKind::aux}) {
    auto config = toy_config();
    config.learner.kind = kind;
    config.train.total_steps = 1500;
    // One of two blocks is exactly half the maskable cost, so a bottom-split
    // subnet under a strict 40% budget needs a deeper stack.
    if (kind == train::LearnerKind::aux) config.model.num_blocks = 4;
    set_subnets(config, {0.4, 0.7});
    cli::refresh_identity(config);
    const auto corpus = tasks::generate(config.task);
    train::Trainer<float> trainer(config, corpus);
    while (!trainer.done()) trainer.advance();
    bool verified = trainer.phase() == train::Phase::step2;
    for (const auto& p : trainer.plans()) verified = verified && costs::verify(p.mask, trainer.cost(), p.tau);
    bool nested = true;
    if (kind == train::LearnerKind::aux) {
      const auto& a = trainer.plans()[0].mask.values;
      const auto& b = trainer.plans()[1].mask.values;
      for (std::size_t j = 0; j < a.size(); ++j) nested = nested && (a[j] == 0.0 || b[j] == 1.0);
    }
    const double ler = trainer.evaluate_dev(0);
    ok = ok && verified && nested && std::isfinite(ler);
    detail << train::to_string(kind) << ": verify " << (verified ? "ok" : "FAILED")
           << (kind == train::LearnerKind::aux ? std::string(", nested ") + (nested ? "yes" : "no") : "")
           << ", subnet0 LER " << fmt("%.1f", ler) << "; ";
  }
  // Bottom-k-of-12 splits on a 12-block registry: mask is every group of the
  // first `split` blocks, and smaller splits nest inside larger ones.
  encoder::EncoderConfig big;
  big.num_blocks = 12;
  big.d_model = 64;
  const auto reg = encoder::GroupRegistry::build(big);
  const auto m3 = baselines::aux_bottom_mask(reg, 3);
  const auto m6 = baselines::aux_bottom_mask(reg, 6);
  bool documented = true;
  for (std::size_t j = 0; j < reg.size(); ++j) {
    documented = documented && m6.values[j] == (reg[j].block < 6 ? 1.0 : 0.0);
    documented = documented && (m3.values[j] == 0.0 || m6.values[j] == 1.0);
  }
  documented = documented && m6.selected().size() == 6 * 10;
  ok = ok && documented;
  detail << "bottom-6-of-12 mask " << (documented ? "as documented and nested" : "WRONG");
  return {ok, detail.str()};
}

}  // namespace

int main(int argc, char** argv) {
  const std::map<int, std::pair<std::string, std::function<Outcome()>>> criteria = {
      {1, {"gradient suite", gradient_suite}},
      {2, {"select_k prefix oracle", select_k_oracle}},
      {3, {"orthogonality closed form", ortho_closed_form}},
      {4, {"CTC brute-force oracle", ctc_oracle}},
      {5, {"Step 1 convergence", convergence}},
      {6, {"end-to-end quality", end_to_end}},
      {7, {"cost exactness", cost_exactness}},
      {8, {"schedules", schedules}},
      {9, {"determinism and resume", determinism}},
      {10, {"baseline smoke", baseline_smoke}},
  };
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::stoi(argv[i]));
  if (selected.empty())
    for (const auto& [id, _] : criteria) selected.push_back(id);

  int failures = 0;
  for (int id : selected) {
    const auto it = criteria.find(id);
    if (it == criteria.end()) {
      std::cout << "FAIL criterion " << id << ": unknown\n";
      ++failures;
      continue;
    }
    Outcome o;
    try {
      o = it->second.second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (o.passed ? "PASS" : "FAIL") << " criterion " << id << " (" << it->second.first << "): " << o.detail
              << std::endl;
    failures += o.passed ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
