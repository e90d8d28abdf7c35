#include <cmath>
#include <limits>
#include <string>

#include "osm/errors.hpp"
#include "osm/tasks/tasks.hpp"

namespace osm::tasks {

namespace {

void check_labels(std::span<const int> labels, std::size_t classes) {
  for (int l : labels) {
    if (l < 1 || static_cast<std::size_t>(l) >= classes) {
      throw ContractError("label " + std::to_string(l) + " outside 1.." + std::to_string(classes - 1));
    }
  }
}

void check_feasible(std::size_t frames, std::span<const int> labels) {
  const std::size_t need = ctc_min_frames(labels);
  if (frames < need) {
    throw FeasibilityError("CTC needs at least " + std::to_string(need) + " frames for " +
                           std::to_string(labels.size()) + " labels, got " + std::to_string(frames));
  }
}

}  // namespace

template <typename T>
Var<T> ctc_loss(Var<T> log_probs, std::span<const int> labels) {
  const std::size_t frames = log_probs.rows();
  const std::size_t classes = log_probs.cols();
  if (frames == 0) throw DimensionError("ctc_loss on an empty sequence");
  check_labels(labels, classes);
  check_feasible(frames, labels);
  constexpr T ninf = -std::numeric_limits<T>::infinity();

  // Blank-augmented target: blank, l1, blank, l2, ..., blank.
  const std::size_t states = 2 * labels.size() + 1;
  std::vector<int> ext(states, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) ext[2 * i + 1] = labels[i];
  std::vector<int> from1(states, -1), from2(states, -1), init(states, -1);
  for (std::size_t s = 0; s < states; ++s) {
    if (s >= 1) from1[s] = static_cast<int>(s - 1);
    if (s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2]) from2[s] = static_cast<int>(s - 2);
    if (s < 2) init[s] = static_cast<int>(s);
  }

  Var<T> emit = ad::take_cols(log_probs, std::span<const int>(ext), T(0));
  Var<T> alpha = ad::take_cols(ad::slice_rows(emit, 0, 1), std::span<const int>(init), ninf);
  for (std::size_t t = 1; t < frames; ++t) {
    Var<T> stay = alpha;
    Var<T> step = ad::take_cols(alpha, std::span<const int>(from1), ninf);
    Var<T> skip = ad::take_cols(alpha, std::span<const int>(from2), ninf);
    alpha = ad::add(ad::logsumexp(ad::concat_rows<T>({stay, step, skip}), 0),
                    ad::slice_rows(emit, t, t + 1));
  }
  std::vector<int> last = {static_cast<int>(states - 1)};
  if (states > 1) last.push_back(static_cast<int>(states - 2));
  Var<T> total = ad::logsumexp(ad::take_cols(alpha, std::span<const int>(last), ninf), 1);
  return ad::scale(total, T(-1));
}

double ctc_brute_force(const Tensor<double>& log_probs, std::span<const int> labels) {
  const std::size_t frames = log_probs.rows();
  const std::size_t classes = log_probs.cols();
  if (frames > 8 || classes > 5) {
    throw OracleSizeError("brute-force CTC limited to T <= 8 and V <= 4, got T = " +
                          std::to_string(frames) + ", V = " + std::to_string(classes - 1));
  }
  check_labels(labels, classes);
  std::vector<std::size_t> path(frames, 0);
  double total = 0.0;
  std::vector<int> collapsed;
  while (true) {
    collapsed.clear();
    double lp = 0.0;
    std::size_t prev = 0;
    for (std::size_t t = 0; t < frames; ++t) {
      const std::size_t c = path[t];
      lp += log_probs(t, c);
      if (c != 0 && (t == 0 || c != prev)) collapsed.push_back(static_cast<int>(c));
      prev = c;
    }
    if (collapsed.size() == labels.size() && std::equal(collapsed.begin(), collapsed.end(), labels.begin())) {
      total += std::exp(lp);
    }
    std::size_t t = 0;
    while (t < frames && ++path[t] == classes) path[t++] = 0;
    if (t == frames) break;
  }
  return total > 0.0 ? -std::log(total) : std::numeric_limits<double>::infinity();
}

template <typename T>
std::vector<int> greedy_decode(const Tensor<T>& log_probs) {
  std::vector<int> out;
  int prev = -1;
  for (std::size_t t = 0; t < log_probs.rows(); ++t) {
    int best = 0;
    for (std::size_t c = 1; c < log_probs.cols(); ++c)
      if (log_probs(t, c) > log_probs(t, static_cast<std::size_t>(best))) best = static_cast<int>(c);
    if (best != 0 && best != prev) out.push_back(best);
    prev = best;
  }
  return out;
}

std::size_t edit_distance(std::span<const int> a, std::span<const int> b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

double label_error_rate(const std::vector<std::vector<int>>& hyps,
                        const std::vector<std::vector<int>>& refs) {
  if (hyps.size() != refs.size()) throw ContractError("hypothesis and reference counts differ");
  std::size_t errors = 0, length = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    errors += edit_distance(hyps[i], refs[i]);
    length += refs[i].size();
  }
  if (length == 0) return errors == 0 ? 0.0 : 100.0;
  return 100.0 * static_cast<double>(errors) / static_cast<double>(length);
}

template Var<float> ctc_loss(Var<float>, std::span<const int>);
template Var<double> ctc_loss(Var<double>, std::span<const int>);
template std::vector<int> greedy_decode(const Tensor<float>&);
template std::vector<int> greedy_decode(const Tensor<double>&);

}  // namespace osm::tasks
