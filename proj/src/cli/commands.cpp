#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "osm/cli/app.hpp"
#include "osm/cli/config_file.hpp"
#include "osm/cli/suites.hpp"
#include "osm/costs/costs.hpp"
#include "osm/encoder/encoder.hpp"
#include "osm/errors.hpp"
#include "osm/tasks/tasks.hpp"
#include "osm/train/pipeline.hpp"
#include "osm/train/trainer.hpp"

namespace osm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Raised when a verification check fails; maps to kExitVerify.
class VerificationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Session {
  train::RunConfig config;
  train::Checkpoint checkpoint;
};

Session open_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: " + path.string());
  Session s;
  s.checkpoint = train::read_checkpoint(path);
  const auto& meta = s.checkpoint.meta;
  if (!meta.contains("config_text")) throw FormatError("checkpoint has no embedded config");
  s.config = parse_run_config(meta.at("config_text").get<std::string>(), path.string() + "#config");
  if (s.config.hash != meta.at("config_hash").get<std::uint64_t>()) {
    throw FormatError("embedded config does not match the recorded config hash");
  }
  return s;
}

tasks::Corpus corpus_for(const train::RunConfig& config, const std::optional<fs::path>& path,
                         bool allow_mismatch, int threads) {
  if (!path) return tasks::generate(config.task, threads);
  try {
    return tasks::load_corpus(*path, config.task, !allow_mismatch);
  } catch (const FormatError& e) {
    throw FormatError(std::string(e.what()) + " (pass --allow-hash-mismatch to override)");
  }
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

bool is_rounded(const json& masks) {
  const auto& subs = masks.at("subnets");
  return !subs.empty() && std::all_of(subs.begin(), subs.end(), [](const json& s) {
    return s.value("rounded", false);
  });
}

bool nested_learner(train::LearnerKind k) {
  return k == train::LearnerKind::orthosoftmax || k == train::LearnerKind::aux;
}

// ---- train ---------------------------------------------------------------

struct TrainArgs {
  std::string config, out, resume;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  long stop_at = -1;
  long checkpoint_every = 0;
  int log_every = 0;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  auto config = load_run_config(a.config);
  if (a.seed) {
    config.train.seed = *a.seed;
    refresh_identity(config);
  }
  const fs::path dir = a.out;
  fs::create_directories(dir);
  const fs::path cache = dir / "corpus.bin";
  tasks::Corpus corpus;
  if (fs::exists(cache)) {
    corpus = tasks::load_corpus(cache, config.task);
  } else {
    corpus = tasks::generate(config.task, a.threads);
    tasks::save_corpus(corpus, cache);
  }
  train::RunOptions opt;
  opt.out_dir = dir;
  if (!a.resume.empty()) opt.resume = fs::path(a.resume);
  opt.stop_at = a.stop_at;
  opt.checkpoint_every = a.checkpoint_every;
  if (a.log_every > 0) {
    opt.on_row = [&out, every = a.log_every](const train::MetricsRow& r) {
      if ((r.step + 1) % every == 0) {
        out << "step " << r.step + 1 << " " << train::to_string(r.phase) << " sup=" << r.loss_super
            << " sub=" << r.loss_sub << " orth=" << r.loss_orthog << '\n';
      }
    };
  }
  const auto summary = train::run_training(config, corpus, opt);
  out << "trained to step " << summary.step << " (" << train::to_string(summary.phase) << "), config hash "
      << config.hash << '\n';
  return kExitOk;
}

// ---- eval ----------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, subnet = "super", corpus, out;
  bool allow_mismatch = false;
  int threads = 1;
};

template <typename T>
json evaluate_checkpoint(const Session& s, const tasks::Corpus& corpus, const std::string& which) {
  train::Trainer<T> tr(s.config, corpus);
  tr.restore(s.checkpoint);
  const auto registry = tr.encoder().registry();
  const auto pcost = costs::param_cost(registry, tr.config().model);
  const auto fcost = costs::flops_cost(registry, tr.config().model, tr.config().train.flops_reference_frames);

  json doc;
  doc["config_hash"] = s.config.hash;
  doc["corpus_hash"] = corpus.config.hash();
  doc["step"] = tr.step();
  doc["split"] = "dev";
  encoder::MaskVector mask = encoder::present_groups(tr.encoder());
  std::optional<int> aux;
  if (which == "super") {
    doc["subnet"] = "super";
    doc["ler"] = train::evaluate<T>(tr.encoder(), nullptr, std::nullopt, corpus.dev);
  } else {
    const int count = static_cast<int>(tr.plans().size());
    int id = -1;
    try {
      std::size_t used = 0;
      id = std::stoi(which, &used);
      if (used != which.size()) id = -1;
    } catch (const std::exception&) {
      id = -1;
    }
    if (id < 0 || id >= count) {
      std::string valid = "super";
      for (int m = 0; m < count; ++m) valid += ", " + std::to_string(m);
      throw ConfigError("unknown subnet '" + which + "'; valid: " + valid);
    }
    if (tr.phase() != train::Phase::step2) {
      throw StateError("subnet " + which + " requested but the checkpoint has no rounded masks (step " +
                       std::to_string(tr.step()) + ", Step 1)");
    }
    mask = tr.plans()[static_cast<std::size_t>(id)].mask;
    aux = tr.aux_split(id);
    doc["subnet"] = id;
    if (aux) doc["aux_split"] = *aux;
    doc["ler"] = train::evaluate<T>(tr.encoder(), &mask, aux, corpus.dev);
  }
  doc["params"] = encoder::structural_prune(tr.encoder(), mask).parameter_count();
  doc["flops"] = fcost.base + fcost.selected(mask);
  doc["params_model"] = pcost.base + pcost.selected(mask);
  doc["flops_reference_frames"] = tr.config().train.flops_reference_frames;
  return doc;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const auto s = open_checkpoint(a.checkpoint);
  const auto corpus = corpus_for(s.config, a.corpus.empty() ? std::nullopt : std::optional<fs::path>(a.corpus),
                                 a.allow_mismatch, a.threads);
  const json doc = s.config.train.precision == train::Precision::f64
                       ? evaluate_checkpoint<double>(s, corpus, a.subnet)
                       : evaluate_checkpoint<float>(s, corpus, a.subnet);
  const fs::path dest = a.out.empty() ? fs::path(a.checkpoint).parent_path() / "eval.json" : fs::path(a.out);
  write_file(dest, doc.dump(2) + "\n");
  out << "LER " << doc.at("ler").get<double>() << " params " << doc.at("params") << " flops "
      << doc.at("flops") << '\n';
  return kExitOk;
}

// ---- report --------------------------------------------------------------

std::string remaining_ratio_csv(const train::RunConfig& config, const json& masks) {
  const auto registry = encoder::GroupRegistry::build(config.model);
  std::ostringstream os;
  os << "subnet,block,kind,ratio\n";
  for (const auto& sub : masks.at("subnets")) {
    std::vector<int> kept(static_cast<std::size_t>(registry.num_blocks()) * 4, 0);
    for (int id : sub.at("group_ids").get<std::vector<int>>()) {
      if (id < 0 || static_cast<std::size_t>(id) >= registry.size()) {
        throw FormatError("group id " + std::to_string(id) + " out of range");
      }
      const auto& g = registry[static_cast<std::size_t>(id)];
      ++kept[static_cast<std::size_t>(g.block * 4 + static_cast<int>(g.kind))];
    }
    for (int b = 0; b < registry.num_blocks(); ++b) {
      for (auto kind : encoder::kModuleKinds) {
        const double ratio = static_cast<double>(kept[static_cast<std::size_t>(b * 4 + static_cast<int>(kind))]) /
                             registry.groups_per_block(kind);
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.17g", ratio);
        os << sub.at("subnet").get<int>() << ',' << b << ',' << encoder::to_string(kind) << ',' << buf << '\n';
      }
    }
  }
  return os.str();
}

int cmd_report(const std::string& checkpoint, const std::string& out_path, std::ostream& out) {
  const auto s = open_checkpoint(checkpoint);
  const auto& masks = s.checkpoint.meta.at("masks");
  if (!is_rounded(masks)) throw StateError("checkpoint has no rounded masks; report needs a finished Step 1");
  const fs::path dest =
      out_path.empty() ? fs::path(checkpoint).parent_path() / "remaining_ratio.csv" : fs::path(out_path);
  write_file(dest, remaining_ratio_csv(s.config, masks));
  out << "wrote " << dest.string() << '\n';
  return kExitOk;
}

// ---- verify --------------------------------------------------------------

template <typename T>
std::vector<std::string> verify_checkpoint(const Session& s, const tasks::Corpus& corpus, std::ostream& out) {
  train::Trainer<T> tr(s.config, corpus);
  tr.restore(s.checkpoint);
  if (tr.phase() != train::Phase::step2) throw StateError("checkpoint has no rounded masks to verify");
  std::vector<std::string> failures;
  auto report = [&](bool ok, const std::string& what) {
    out << (ok ? "PASS " : "FAIL ") << what << '\n';
    if (!ok) failures.push_back(what);
  };
  const auto& plans = tr.plans();
  const auto& cost = tr.cost();
  for (std::size_t m = 0; m < plans.size(); ++m) {
    const double tau = costs::resolve_budget(plans[m].budget, cost);
    const auto& mask = plans[m].mask;
    bool ok = mask.size() == cost.per_group.size() && mask.is_binary();
    ok = ok && costs::verify(mask, cost, tau);
    std::ostringstream what;
    what.precision(17);
    what << "budget subnet " << m << " cost=" << (ok || mask.is_binary() ? cost.selected(mask) : -1.0)
         << " tau=" << tau;
    report(ok, what.str());
  }
  if (nested_learner(s.config.learner.kind)) {
    for (std::size_t m = 0; m + 1 < plans.size(); ++m) {
      const auto& small = plans[m].mask.values;
      const auto& large = plans[m + 1].mask.values;
      bool ok = true;
      for (std::size_t j = 0; j < small.size(); ++j) ok = ok && (small[j] == 0.0 || large[j] != 0.0);
      report(ok, "nesting subnet " + std::to_string(m) + " within subnet " + std::to_string(m + 1));
    }
  } else {
    out << "SKIP nesting (" << train::to_string(s.config.learner.kind) << " masks are not nested by construction)\n";
  }

  const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-10;
  const std::size_t probes = std::min<std::size_t>(2, corpus.dev.size());
  for (std::size_t m = 0; m < plans.size(); ++m) {
    const auto& mask = plans[m].mask;
    if (!mask.is_binary() || mask.size() != cost.per_group.size()) continue;
    const auto pruned = encoder::structural_prune(tr.encoder(), mask);
    const auto aux = tr.aux_split(static_cast<int>(m));
    double worst = 0.0;
    for (std::size_t i = 0; i < probes; ++i) {
      const ad::Tensor<T> x = corpus.dev[i].features.template cast<T>();
      ad::Tape<T> t1, t2;
      encoder::ForwardOptions<T> opts;
      ad::Tensor<T> gates(1, mask.size());
      for (std::size_t j = 0; j < mask.size(); ++j) gates[j] = static_cast<T>(mask.values[j]);
      opts.gates = t1.constant(gates);
      auto& full = tr.encoder();
      auto& small = const_cast<encoder::Encoder<T>&>(pruned);
      const auto a = aux ? encoder::aux_head_forward(t1, full, x, *aux, opts) : encoder::forward(t1, full, x, opts);
      const auto b = aux ? encoder::aux_head_forward(t2, small, x, *aux) : encoder::forward(t2, small, x);
      worst = std::max(worst, static_cast<double>(ad::max_abs_diff(a.value(), b.value())));
    }
    std::ostringstream what;
    what << "prune/mask equivalence subnet " << m << " max_abs_diff=" << worst << " tol=" << tol;
    report(worst <= tol, what.str());
  }
  return failures;
}

int cmd_verify(const std::string& checkpoint, std::ostream& out) {
  const auto s = open_checkpoint(checkpoint);
  const auto corpus = tasks::generate(s.config.task, 1);
  const auto failures = s.config.train.precision == train::Precision::f64
                            ? verify_checkpoint<double>(s, corpus, out)
                            : verify_checkpoint<float>(s, corpus, out);
  if (!failures.empty()) throw VerificationFailure("verification failed: " + failures.front());
  return kExitOk;
}

// ---- cost / masks --------------------------------------------------------

int cmd_cost(const std::string& config_path, const std::string& out_path, std::ostream& out) {
  const auto config = load_run_config(config_path);
  const auto registry = encoder::GroupRegistry::build(config.model);
  const auto pcost = costs::param_cost(registry, config.model);
  const auto fcost = costs::flops_cost(registry, config.model, config.train.flops_reference_frames);
  std::ostringstream os;
  os << "group_id,block,kind,sub,params,flops\n";
  for (const auto& g : registry.groups()) {
    const auto id = static_cast<std::size_t>(g.id);
    os << g.id << ',' << g.block << ',' << encoder::to_string(g.kind) << ',' << g.sub << ','
       << static_cast<long long>(pcost.per_group[id]) << ',' << static_cast<long long>(fcost.per_group[id]) << '\n';
  }
  if (out_path.empty()) {
    out << os.str();
  } else {
    write_file(out_path, os.str());
  }
  return kExitOk;
}

int cmd_masks(const std::string& checkpoint, const std::string& out_path, std::ostream& out) {
  const auto s = open_checkpoint(checkpoint);
  const std::string text = s.checkpoint.meta.at("masks").dump(2) + "\n";
  if (out_path.empty()) {
    out << text;
  } else {
    write_file(out_path, text);
  }
  return kExitOk;
}

int cmd_suite(const std::vector<SuiteResult>& results, std::ostream& out) {
  if (!print_results(out, results)) throw VerificationFailure("self-check suite failed");
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"OrthoSoftmax supernet trainer"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a supernet and its subnets");
  train->add_option("--config", ta.config, "Run configuration")->required();
  train->add_option("--out", ta.out, "Output directory")->required();
  train->add_option("--seed", ta.seed, "Override train.seed");
  train->add_option("--threads", ta.threads, "Threads for data generation")->check(CLI::PositiveNumber);
  train->add_option("--resume", ta.resume, "Checkpoint to resume from");
  train->add_option("--stop-at", ta.stop_at, "Stop before this update");
  train->add_option("--checkpoint-every", ta.checkpoint_every, "Write numbered checkpoints");
  train->add_option("--log-every", ta.log_every, "Print losses every N updates");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate the supernet or a subnet on the dev split");
  eval->add_option("--checkpoint", ea.checkpoint)->required();
  eval->add_option("--subnet", ea.subnet, "'super' or a subnet id");
  eval->add_option("--corpus", ea.corpus, "Corpus cache (default: regenerate)");
  eval->add_flag("--allow-hash-mismatch", ea.allow_mismatch, "Accept a corpus built from another config");
  eval->add_option("--threads", ea.threads)->check(CLI::PositiveNumber);
  eval->add_option("--out", ea.out, "eval.json path");

  std::string ckpt, out_path, config_path;
  auto* report = app.add_subcommand("report", "Write remaining_ratio.csv");
  report->add_option("--checkpoint", ckpt)->required();
  report->add_option("--out", out_path);

  auto* verify = app.add_subcommand("verify", "Check budgets, nesting and prune/mask equivalence");
  verify->add_option("--checkpoint", ckpt)->required();

  auto* cost = app.add_subcommand("cost", "Per-group parameter and MAC costs as CSV");
  cost->add_option("--config", config_path)->required();
  cost->add_option("--out", out_path);

  auto* masks = app.add_subcommand("masks", "Emit masks.json from a checkpoint");
  masks->add_option("--checkpoint", ckpt)->required();
  masks->add_option("--out", out_path);

  int instances = 20;
  std::uint64_t seed = 7;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gradcheck->add_option("--instances", instances)->check(CLI::PositiveNumber);
  gradcheck->add_option("--seed", seed);

  auto* oracle = app.add_subcommand("oracle", "Exhaustive-oracle equivalence suite");
  oracle->add_option("--seed", seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*train) return cmd_train(ta, out);
    if (*eval) return cmd_eval(ea, out);
    if (*report) return cmd_report(ckpt, out_path, out);
    if (*verify) return cmd_verify(ckpt, out);
    if (*cost) return cmd_cost(config_path, out_path, out);
    if (*masks) return cmd_masks(ckpt, out_path, out);
    if (*gradcheck) return cmd_suite(gradient_suite(instances, seed), out);
    if (*oracle) return cmd_suite(oracle_suite(seed), out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const VerificationFailure& e) {
    err << e.what() << '\n';
    return kExitVerify;
  } catch (const DivergenceError& e) {
    err << "diverged: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitRuntime;
}

}  // namespace osm::cli
