#include "osm/train/pipeline.hpp"

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "osm/errors.hpp"

namespace osm::train {

namespace fs = std::filesystem;

namespace {

// Keeps the header and rows whose step is below `step`.
void truncate_metrics(const fs::path& path, long step) {
  std::ifstream is(path);
  if (!is) return;
  std::vector<std::string> kept;
  std::string line;
  bool header = true;
  while (std::getline(is, line)) {
    if (header) {
      kept.push_back(line);
      header = false;
      continue;
    }
    if (line.empty()) continue;
    if (std::stol(line.substr(0, line.find(','))) < step) kept.push_back(line);
  }
  is.close();
  std::ofstream os(path, std::ios::trunc);
  for (const auto& l : kept) os << l << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    os << text;
  }
  fs::rename(tmp, path);
}

template <typename T>
RunSummary run(const RunConfig& config, const tasks::Corpus& corpus, const RunOptions& opt) {
  fs::create_directories(opt.out_dir);
  Trainer<T> trainer(config, corpus);
  RunSummary out;
  out.metrics = opt.out_dir / "metrics.csv";
  out.masks = opt.out_dir / "masks.json";
  out.checkpoint = opt.out_dir / "checkpoint.orsm";
  if (opt.resume) {
    trainer.restore(read_checkpoint(*opt.resume));
    truncate_metrics(out.metrics, trainer.step());
  }
  if (!opt.resume || !fs::exists(out.metrics)) {
    std::ofstream os(out.metrics, std::ios::trunc);
    os << metrics_header() << '\n';
  }
  write_text(opt.out_dir / "config.ini", config.source);
  const long stop = opt.stop_at < 0 ? trainer.total_steps() : std::min(opt.stop_at, trainer.total_steps());
  {
    std::ofstream metrics(out.metrics, std::ios::app);
    while (trainer.step() < stop) {
      const MetricsRow row = trainer.advance();
      metrics << format_metrics(row) << '\n';
      if (opt.on_row) opt.on_row(row);
      if (opt.checkpoint_every > 0 && trainer.step() % opt.checkpoint_every == 0) {
        metrics.flush();
        write_checkpoint(trainer.checkpoint(),
                         opt.out_dir / ("checkpoint_" + std::to_string(trainer.step()) + ".orsm"));
      }
    }
  }
  // A run that used up its Step 1 budget rounds the masks even if it stops
  // exactly at the boundary.
  if (trainer.phase() == Phase::step1 && trainer.step() >= trainer.step1_steps()) trainer.transition();
  write_checkpoint(trainer.checkpoint(), out.checkpoint);
  write_text(out.masks, masks_document(trainer.config(), trainer.cost(), trainer.plans()).dump(2) + "\n");
  out.step = trainer.step();
  out.phase = trainer.phase();
  return out;
}

}  // namespace

RunSummary run_training(const RunConfig& config, const tasks::Corpus& corpus, const RunOptions& options) {
  return config.train.precision == Precision::f64 ? run<double>(config, corpus, options)
                                                  : run<float>(config, corpus, options);
}

}  // namespace osm::train
