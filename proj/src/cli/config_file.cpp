#include "osm/cli/config_file.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "osm/autodiff/rng.hpp"
#include "osm/errors.hpp"

namespace osm::cli {

using train::RunConfig;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> words(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Line {
  int number;
  std::string origin;
  [[noreturn]] void fail(const std::string& msg) const {
    throw ConfigError(origin + ":" + std::to_string(number) + ": " + msg);
  }
};

long to_long(const std::string& v, const Line& at) {
  long out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) at.fail("expected an integer, got '" + v + "'");
  return out;
}

int to_int(const std::string& v, const Line& at) { return static_cast<int>(to_long(v, at)); }

double to_double(const std::string& v, const Line& at) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) at.fail("expected a number, got '" + v + "'");
    return d;
  } catch (const std::logic_error&) {
    at.fail("expected a number, got '" + v + "'");
  }
}

template <typename E>
E choose(const std::string& v, std::initializer_list<std::pair<const char*, E>> options, const Line& at) {
  std::string names;
  for (const auto& [name, value] : options) {
    if (v == name) return value;
    names += names.empty() ? name : std::string(", ") + name;
  }
  at.fail("'" + v + "' is not one of: " + names);
}

using Setter = std::function<void(RunConfig&, const std::string&, const Line&)>;

const std::map<std::string, std::map<std::string, Setter>>& schema() {
  using namespace train;
  static const std::map<std::string, std::map<std::string, Setter>> s = {
      {"model",
       {
           {"num_blocks", [](RunConfig& c, const std::string& v, const Line& l) { c.model.num_blocks = to_int(v, l); }},
           {"d_model", [](RunConfig& c, const std::string& v, const Line& l) { c.model.d_model = to_int(v, l); }},
           {"ffn_mult", [](RunConfig& c, const std::string& v, const Line& l) { c.model.ffn_mult = to_int(v, l); }},
           {"conv_kernel", [](RunConfig& c, const std::string& v, const Line& l) { c.model.conv_kernel = to_int(v, l); }},
           {"max_frames", [](RunConfig& c, const std::string& v, const Line& l) { c.model.max_frames = to_int(v, l); }},
           {"dropout_base", [](RunConfig& c, const std::string& v, const Line& l) { c.model.dropout_base = to_double(v, l); }},
           {"granularity",
            [](RunConfig& c, const std::string& v, const Line& l) {
              c.model.granularity = choose<encoder::Granularity>(
                  v, {{"layer", encoder::Granularity::layer}, {"component", encoder::Granularity::component}}, l);
            }},
           {"aux_splits",
            [](RunConfig& c, const std::string& v, const Line& l) {
              c.model.aux_splits.clear();
              std::string item;
              std::istringstream is(v);
              while (std::getline(is, item, ',')) {
                const auto t = trim(item);
                if (!t.empty()) c.model.aux_splits.push_back(to_int(t, l));
              }
            }},
       }},
      {"task",
       {
           {"vocab_size", [](RunConfig& c, const std::string& v, const Line& l) { c.task.vocab_size = to_int(v, l); }},
           {"d_in", [](RunConfig& c, const std::string& v, const Line& l) { c.task.d_in = to_int(v, l); }},
           {"min_label_len", [](RunConfig& c, const std::string& v, const Line& l) { c.task.min_label_len = to_int(v, l); }},
           {"max_label_len", [](RunConfig& c, const std::string& v, const Line& l) { c.task.max_label_len = to_int(v, l); }},
           {"min_frames_per_label",
            [](RunConfig& c, const std::string& v, const Line& l) { c.task.min_frames_per_label = to_int(v, l); }},
           {"max_frames_per_label",
            [](RunConfig& c, const std::string& v, const Line& l) { c.task.max_frames_per_label = to_int(v, l); }},
           {"noise", [](RunConfig& c, const std::string& v, const Line& l) { c.task.noise = to_double(v, l); }},
           {"train_size", [](RunConfig& c, const std::string& v, const Line& l) { c.task.train_size = to_int(v, l); }},
           {"dev_size", [](RunConfig& c, const std::string& v, const Line& l) { c.task.dev_size = to_int(v, l); }},
           {"seed",
            [](RunConfig& c, const std::string& v, const Line& l) {
              c.task.seed = static_cast<std::uint64_t>(to_long(v, l));
            }},
       }},
      {"train",
       {
           {"total_steps", [](RunConfig& c, const std::string& v, const Line& l) { c.train.total_steps = to_long(v, l); }},
           {"step1_fraction", [](RunConfig& c, const std::string& v, const Line& l) { c.train.step1_fraction = to_double(v, l); }},
           {"batch_size", [](RunConfig& c, const std::string& v, const Line& l) { c.train.batch_size = to_int(v, l); }},
           {"lr", [](RunConfig& c, const std::string& v, const Line& l) { c.train.lr = to_double(v, l); }},
           {"warmup_fraction", [](RunConfig& c, const std::string& v, const Line& l) { c.train.warmup_fraction = to_double(v, l); }},
           {"decay_start_fraction",
            [](RunConfig& c, const std::string& v, const Line& l) { c.train.decay_start_fraction = to_double(v, l); }},
           {"adam_beta1", [](RunConfig& c, const std::string& v, const Line& l) { c.train.adam_beta1 = to_double(v, l); }},
           {"adam_beta2", [](RunConfig& c, const std::string& v, const Line& l) { c.train.adam_beta2 = to_double(v, l); }},
           {"adam_eps", [](RunConfig& c, const std::string& v, const Line& l) { c.train.adam_eps = to_double(v, l); }},
           {"weight_decay", [](RunConfig& c, const std::string& v, const Line& l) { c.train.weight_decay = to_double(v, l); }},
           {"mask_lr", [](RunConfig& c, const std::string& v, const Line& l) { c.train.mask_lr = to_double(v, l); }},
           {"grad_clip", [](RunConfig& c, const std::string& v, const Line& l) { c.train.grad_clip = to_double(v, l); }},
           {"lambda",
            [](RunConfig& c, const std::string& v, const Line& l) {
              const auto w = words(v);
              if (w.size() == 1 && w[0] == "adaptive") {
                c.train.lambda_mode = LambdaMode::adaptive;
              } else if (w.size() == 2 && w[0] == "constant") {
                c.train.lambda_mode = LambdaMode::constant;
                c.train.lambda_value = to_double(w[1], l);
              } else {
                l.fail("lambda must be 'adaptive' or 'constant <value>'");
              }
            }},
           {"beta",
            [](RunConfig& c, const std::string& v, const Line& l) {
              const auto w = words(v);
              if (w.size() == 1 && w[0] == "linear") {
                c.train.beta_mode = BetaMode::linear;
              } else if (w.size() == 2 && w[0] == "constant") {
                c.train.beta_mode = BetaMode::constant;
                c.train.beta_value = to_double(w[1], l);
              } else {
                l.fail("beta must be 'linear' or 'constant <value>'");
              }
            }},
           {"beta_focal", [](RunConfig& c, const std::string& v, const Line& l) { c.train.beta_focal = to_double(v, l); }},
           {"layer_drop_p", [](RunConfig& c, const std::string& v, const Line& l) { c.train.layer_drop_p = to_double(v, l); }},
           {"layer_drop_scope",
            [](RunConfig& c, const std::string& v, const Line& l) {
              c.train.layer_drop_scope =
                  choose<LayerDropScope>(v, {{"supernet", LayerDropScope::supernet}, {"all", LayerDropScope::all}}, l);
            }},
           {"largest",
            [](RunConfig& c, const std::string& v, const Line& l) {
              c.train.largest = choose<LargestMode>(
                  v, {{"supernet", LargestMode::supernet}, {"largest_subnet", LargestMode::largest_subnet}}, l);
            }},
           {"flops_reference_frames",
            [](RunConfig& c, const std::string& v, const Line& l) { c.train.flops_reference_frames = to_int(v, l); }},
           {"precision",
            [](RunConfig& c, const std::string& v, const Line& l) {
              c.train.precision = choose<Precision>(v, {{"f32", Precision::f32}, {"f64", Precision::f64}}, l);
            }},
           {"seed",
            [](RunConfig& c, const std::string& v, const Line& l) {
              c.train.seed = static_cast<std::uint64_t>(to_long(v, l));
            }},
       }},
      {"subnets",
       {
           {"subnet",
            [](RunConfig& c, const std::string& v, const Line& l) {
              const auto w = words(v);
              costs::Budget b;
              try {
                if (w.size() == 2) {
                  b.criterion = costs::parse_criterion(w[0]);
                  b.kind = costs::Budget::Kind::fraction;
                  b.value = to_double(w[1], l);
                } else if (w.size() == 3 && w[1] == "abs") {
                  b.criterion = costs::parse_criterion(w[0]);
                  b.kind = costs::Budget::Kind::absolute;
                  b.value = to_double(w[2], l);
                } else {
                  l.fail("subnet must be '<criterion> <fraction>' or '<criterion> abs <value>'");
                }
              } catch (const ConfigError& e) {
                if (std::string(e.what()).starts_with(l.origin)) throw;
                l.fail(e.what());
              }
              c.subnets.push_back(b);
            }},
       }},
      {"mask_learner",
       {
           {"mask_learner",
            [](RunConfig& c, const std::string& v, const Line& l) {
              try {
                c.learner.kind = parse_learner(v);
              } catch (const ConfigError& e) {
                l.fail(e.what());
              }
            }},
           {"score_init_noise",
            [](RunConfig& c, const std::string& v, const Line& l) { c.learner.score_init_noise = to_double(v, l); }},
           {"temperature_initial",
            [](RunConfig& c, const std::string& v, const Line& l) { c.learner.temperature.initial = to_double(v, l); }},
           {"temperature_floor",
            [](RunConfig& c, const std::string& v, const Line& l) { c.learner.temperature.floor = to_double(v, l); }},
           {"temperature_decay",
            [](RunConfig& c, const std::string& v, const Line& l) { c.learner.temperature.decay = to_double(v, l); }},
           {"l0_penalty", [](RunConfig& c, const std::string& v, const Line& l) { c.learner.l0_penalty = to_double(v, l); }},
           {"l0_init_log_alpha",
            [](RunConfig& c, const std::string& v, const Line& l) { c.learner.l0_init_log_alpha = to_double(v, l); }},
       }},
  };
  return s;
}

const char* kSectionOrder[] = {"model", "task", "train", "subnets", "mask_learner"};

}  // namespace

RunConfig parse_run_config(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  const auto& sch = schema();
  std::set<std::string> seen_sections;
  std::set<std::pair<std::string, std::string>> seen_keys;
  std::string section;
  std::istringstream is(text);
  std::string raw;
  int number = 0;
  while (std::getline(is, raw)) {
    ++number;
    const Line at{number, origin};
    std::string line = raw;
    if (const auto hash = line.find_first_of("#;"); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') at.fail("malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      if (!sch.contains(section)) at.fail("unknown section [" + section + "]");
      if (!seen_sections.insert(section).second) at.fail("duplicate section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) at.fail("expected 'key = value'");
    if (section.empty()) at.fail("key outside of any section");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto& keys = sch.at(section);
    const auto it = keys.find(key);
    if (it == keys.end()) at.fail("unknown key '" + key + "' in [" + section + "]");
    if (value.empty()) at.fail("empty value for '" + key + "'");
    if (key != "subnet" && !seen_keys.insert({section, key}).second) at.fail("duplicate key '" + key + "'");
    it->second(cfg, value, at);
  }
  for (const char* s : kSectionOrder) {
    if (!seen_sections.contains(s)) throw ConfigError(origin + ": missing section [" + s + "]");
  }
  if (cfg.subnets.empty()) throw ConfigError(origin + ": missing key 'subnet' in [subnets]");
  cfg.model.d_in = cfg.task.d_in;
  cfg.model.vocab_size = cfg.task.vocab_size;
  cfg.validate();
  refresh_identity(cfg);
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str(), path.filename().string());
}

std::string render_run_config(const RunConfig& c) {
  using namespace train;
  std::ostringstream os;
  os << "[model]\n"
     << "num_blocks = " << c.model.num_blocks << "\n"
     << "d_model = " << c.model.d_model << "\n"
     << "ffn_mult = " << c.model.ffn_mult << "\n"
     << "conv_kernel = " << c.model.conv_kernel << "\n"
     << "max_frames = " << c.model.max_frames << "\n"
     << "dropout_base = " << fmt(c.model.dropout_base) << "\n"
     << "granularity = " << encoder::to_string(c.model.granularity) << "\n";
  if (!c.model.aux_splits.empty()) {
    os << "aux_splits = ";
    for (std::size_t i = 0; i < c.model.aux_splits.size(); ++i) os << (i ? "," : "") << c.model.aux_splits[i];
    os << "\n";
  }
  os << "\n[task]\n"
     << "vocab_size = " << c.task.vocab_size << "\n"
     << "d_in = " << c.task.d_in << "\n"
     << "min_label_len = " << c.task.min_label_len << "\n"
     << "max_label_len = " << c.task.max_label_len << "\n"
     << "min_frames_per_label = " << c.task.min_frames_per_label << "\n"
     << "max_frames_per_label = " << c.task.max_frames_per_label << "\n"
     << "noise = " << fmt(c.task.noise) << "\n"
     << "train_size = " << c.task.train_size << "\n"
     << "dev_size = " << c.task.dev_size << "\n"
     << "seed = " << c.task.seed << "\n";
  const auto& t = c.train;
  os << "\n[train]\n"
     << "total_steps = " << t.total_steps << "\n"
     << "step1_fraction = " << fmt(t.step1_fraction) << "\n"
     << "batch_size = " << t.batch_size << "\n"
     << "lr = " << fmt(t.lr) << "\n"
     << "warmup_fraction = " << fmt(t.warmup_fraction) << "\n"
     << "decay_start_fraction = " << fmt(t.decay_start_fraction) << "\n"
     << "adam_beta1 = " << fmt(t.adam_beta1) << "\n"
     << "adam_beta2 = " << fmt(t.adam_beta2) << "\n"
     << "adam_eps = " << fmt(t.adam_eps) << "\n"
     << "weight_decay = " << fmt(t.weight_decay) << "\n"
     << "mask_lr = " << fmt(t.mask_lr) << "\n"
     << "grad_clip = " << fmt(t.grad_clip) << "\n"
     << "lambda = "
     << (t.lambda_mode == LambdaMode::adaptive ? std::string("adaptive") : "constant " + fmt(t.lambda_value)) << "\n"
     << "beta = " << (t.beta_mode == BetaMode::linear ? std::string("linear") : "constant " + fmt(t.beta_value))
     << "\n"
     << "beta_focal = " << fmt(t.beta_focal) << "\n"
     << "layer_drop_p = " << fmt(t.layer_drop_p) << "\n"
     << "layer_drop_scope = " << (t.layer_drop_scope == LayerDropScope::all ? "all" : "supernet") << "\n"
     << "largest = " << (t.largest == LargestMode::largest_subnet ? "largest_subnet" : "supernet") << "\n"
     << "flops_reference_frames = " << t.flops_reference_frames << "\n"
     << "precision = " << to_string(t.precision) << "\n"
     << "seed = " << t.seed << "\n";
  os << "\n[subnets]\n";
  for (const auto& b : c.subnets) {
    os << "subnet = " << costs::to_string(b.criterion) << " "
       << (b.kind == costs::Budget::Kind::absolute ? "abs " : "") << fmt(b.value) << "\n";
  }
  const auto& l = c.learner;
  os << "\n[mask_learner]\n"
     << "mask_learner = " << to_string(l.kind) << "\n"
     << "score_init_noise = " << fmt(l.score_init_noise) << "\n"
     << "temperature_initial = " << fmt(l.temperature.initial) << "\n"
     << "temperature_floor = " << fmt(l.temperature.floor) << "\n"
     << "temperature_decay = " << fmt(l.temperature.decay) << "\n"
     << "l0_penalty = " << fmt(l.l0_penalty) << "\n"
     << "l0_init_log_alpha = " << fmt(l.l0_init_log_alpha) << "\n";
  return os.str();
}

void refresh_identity(RunConfig& config) {
  config.source = render_run_config(config);
  config.hash = ad::fnv1a(config.source);
}

}  // namespace osm::cli
