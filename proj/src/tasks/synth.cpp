#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <string>
#include <thread>

#include "osm/autodiff/rng.hpp"
#include "osm/errors.hpp"
#include "osm/tasks/tasks.hpp"

namespace osm::tasks {

using ad::CounterRng;
using ad::derive_key;
using ad::fnv1a;

void SynthConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("task config: " + m); };
  if (vocab_size < 2) fail("vocab_size must be >= 2");
  if (d_in < 1) fail("d_in must be >= 1");
  if (min_label_len < 1) fail("min_label_len must be >= 1");
  if (max_label_len < min_label_len) fail("max_label_len must be >= min_label_len");
  if (min_frames_per_label < 1 || max_frames_per_label < min_frames_per_label) {
    fail("frames per label must satisfy 1 <= min <= max");
  }
  // Every label sequence, including one of equal labels, must admit a
  // feasible frame allocation.
  const auto lmax = static_cast<std::size_t>(max_label_len);
  if (frames_after_frontend(static_cast<std::size_t>(max_frames_per_label) * lmax) < 2 * lmax - 1) {
    fail("max_frames_per_label too small for CTC feasibility after subsampling");
  }
  if (noise < 0.0) fail("noise must be >= 0");
  if (train_size < 0 || dev_size < 0) fail("corpus sizes must be >= 0");
}

std::uint64_t SynthConfig::hash() const {
  const std::string canon =
      "V=" + std::to_string(vocab_size) + ";d_in=" + std::to_string(d_in) +
      ";len=" + std::to_string(min_label_len) + "-" + std::to_string(max_label_len) +
      ";fpl=" + std::to_string(min_frames_per_label) + "-" + std::to_string(max_frames_per_label) +
      ";noise=" + std::to_string(noise) + ";train=" + std::to_string(train_size) +
      ";dev=" + std::to_string(dev_size) + ";seed=" + std::to_string(seed);
  return fnv1a(canon);
}

std::size_t ctc_min_frames(std::span<const int> labels) {
  std::size_t n = labels.size();
  for (std::size_t i = 1; i < labels.size(); ++i)
    if (labels[i] == labels[i - 1]) ++n;
  return n;
}

namespace {

constexpr std::uint64_t kTrainTag = 1, kDevTag = 2;
constexpr int kMaxAttempts = 1000;

Sample make_sample(const SynthConfig& c, const Tensor<float>& protos, std::uint64_t split,
                   std::uint64_t index) {
  CounterRng rng(derive_key({c.seed, fnv1a("sample"), split, index}));
  Sample s;
  const auto span_len = static_cast<std::uint64_t>(c.max_label_len - c.min_label_len + 1);
  const int len = c.min_label_len + static_cast<int>(rng.below(span_len));
  for (int i = 0; i < len; ++i)
    s.labels.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(c.vocab_size))));

  const std::size_t need = ctc_min_frames(s.labels);
  const auto fspan = static_cast<std::uint64_t>(c.max_frames_per_label - c.min_frames_per_label + 1);
  std::vector<int> frames(static_cast<std::size_t>(len));
  for (int attempt = 0;; ++attempt) {
    std::size_t total = 0;
    for (auto& f : frames) {
      f = attempt < kMaxAttempts ? c.min_frames_per_label + static_cast<int>(rng.below(fspan))
                                 : c.max_frames_per_label;
      total += static_cast<std::size_t>(f);
    }
    if (frames_after_frontend(total) >= need) break;
    if (attempt >= kMaxAttempts) {
      throw ConfigError("cannot draw CTC-feasible frame counts for a sample");
    }
  }
  std::size_t total = 0;
  for (int f : frames) total += static_cast<std::size_t>(f);
  const auto d = static_cast<std::size_t>(c.d_in);
  s.features = Tensor<float>(total, d);
  std::size_t t = 0;
  for (std::size_t i = 0; i < s.labels.size(); ++i) {
    const auto row = static_cast<std::size_t>(s.labels[i] - 1);
    for (int r = 0; r < frames[i]; ++r, ++t) {
      for (std::size_t j = 0; j < d; ++j) {
        const double v = protos(row, j) + (c.noise > 0.0 ? c.noise * rng.normal() : 0.0);
        s.features(t, j) = static_cast<float>(v);
      }
    }
  }
  return s;
}

void fill(std::vector<Sample>& out, const SynthConfig& c, const Tensor<float>& protos,
          std::uint64_t split, int threads) {
  const std::size_t n = out.size();
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) out[i] = make_sample(c, protos, split, i);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) out[i] = make_sample(c, protos, split, i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

Corpus generate(const SynthConfig& config, int threads) {
  config.validate();
  Corpus corpus;
  corpus.config = config;
  const auto v = static_cast<std::size_t>(config.vocab_size);
  const auto d = static_cast<std::size_t>(config.d_in);
  corpus.prototypes = Tensor<float>(v, d);
  CounterRng rng(derive_key({config.seed, fnv1a("prototypes")}));
  for (auto& x : corpus.prototypes.storage()) x = static_cast<float>(rng.normal());
  corpus.train.resize(static_cast<std::size_t>(config.train_size));
  corpus.dev.resize(static_cast<std::size_t>(config.dev_size));
  fill(corpus.train, config, corpus.prototypes, kTrainTag, threads);
  fill(corpus.dev, config, corpus.prototypes, kDevTag, threads);
  return corpus;
}

namespace {

static_assert(std::endian::native == std::endian::little, "cache IO assumes a little-endian host");

constexpr char kMagic[4] = {'O', 'S', 'M', 'C'};
constexpr std::uint32_t kVersion = 1;

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename V>
V get(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw FormatError("corpus cache truncated");
  return v;
}

void put_samples(std::ostream& os, const std::vector<Sample>& samples) {
  for (const auto& s : samples) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(s.features.rows()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(s.labels.size()));
    for (int l : s.labels) put<std::int32_t>(os, l);
    os.write(reinterpret_cast<const char*>(s.features.data()),
             static_cast<std::streamsize>(s.features.size() * sizeof(float)));
  }
}

void get_samples(std::istream& is, std::vector<Sample>& samples, std::size_t d) {
  for (auto& s : samples) {
    const auto frames = get<std::uint32_t>(is);
    const auto len = get<std::uint32_t>(is);
    s.labels.resize(len);
    for (auto& l : s.labels) l = get<std::int32_t>(is);
    s.features = Tensor<float>(frames, d);
    is.read(reinterpret_cast<char*>(s.features.data()),
            static_cast<std::streamsize>(s.features.size() * sizeof(float)));
    if (!is) throw FormatError("corpus cache truncated");
  }
}

}  // namespace

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write corpus cache " + tmp);
    os.write(kMagic, 4);
    put(os, kVersion);
    put(os, corpus.config.hash());
    put<std::uint32_t>(os, static_cast<std::uint32_t>(corpus.train.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(corpus.dev.size()));
    os.write(reinterpret_cast<const char*>(corpus.prototypes.data()),
             static_cast<std::streamsize>(corpus.prototypes.size() * sizeof(float)));
    put_samples(os, corpus.train);
    put_samples(os, corpus.dev);
    if (!os) throw std::runtime_error("failed writing corpus cache " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Corpus load_corpus(const std::filesystem::path& path, const SynthConfig& config, bool check_hash) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open corpus cache " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a corpus cache: " + path.string());
  if (get<std::uint32_t>(is) != kVersion) throw FormatError("unsupported corpus cache version");
  if (get<std::uint64_t>(is) != config.hash() && check_hash) {
    throw FormatError("corpus cache " + path.string() + " was built from a different task config");
  }
  Corpus c;
  c.config = config;
  c.train.resize(get<std::uint32_t>(is));
  c.dev.resize(get<std::uint32_t>(is));
  const auto d = static_cast<std::size_t>(config.d_in);
  c.prototypes = Tensor<float>(static_cast<std::size_t>(config.vocab_size), d);
  is.read(reinterpret_cast<char*>(c.prototypes.data()),
          static_cast<std::streamsize>(c.prototypes.size() * sizeof(float)));
  get_samples(is, c.train, d);
  get_samples(is, c.dev, d);
  return c;
}

}  // namespace osm::tasks
