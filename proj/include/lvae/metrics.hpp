#pragma once

// Disentanglement measures over an encoded table of (codes, factor labels):
// beta-VAE, FactorVAE, explicitness, IRS, MIG and SAP, plus the small probes
// they need (softmax regression, majority vote, binned mutual information).
// Everything here is a pure function of the table and an explicit seed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lvae/data.hpp"
#include "lvae/nets.hpp"
#include "lvae/rng.hpp"

namespace lvae {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RepresentationTable {
  std::size_t rows = 0;
  std::size_t dims = 0;
  std::size_t factors = 0;
  std::vector<double> codes;          // rows x dims
  std::vector<std::uint32_t> labels;  // rows x factors
  std::vector<double> stddev;         // per code dimension (population)

  static RepresentationTable make(std::vector<double> codes, std::size_t dims, std::vector<std::uint32_t> labels,
                                  std::size_t factors) {
    if (dims == 0 || factors == 0) throw MetricError("representation table: empty dimensions");
    if (codes.size() % dims != 0 || labels.size() % factors != 0 || codes.size() / dims != labels.size() / factors)
      throw MetricError("representation table: code and factor row counts differ");
    RepresentationTable t;
    t.rows = codes.size() / dims;
    t.dims = dims;
    t.factors = factors;
    t.codes = std::move(codes);
    t.labels = std::move(labels);
    t.stddev.assign(dims, 0.0);
    for (std::size_t j = 0; j < dims; ++j) {
      double m = 0.0;
      for (std::size_t r = 0; r < t.rows; ++r) m += t.code(r, j);
      m /= static_cast<double>(t.rows);
      double v = 0.0;
      for (std::size_t r = 0; r < t.rows; ++r) v += (t.code(r, j) - m) * (t.code(r, j) - m);
      t.stddev[j] = std::sqrt(v / static_cast<double>(t.rows));
    }
    return t;
  }

  double code(std::size_t r, std::size_t j) const { return codes[r * dims + j]; }
  std::uint32_t label(std::size_t r, std::size_t k) const { return labels[r * factors + k]; }
  FactorTableView factor_view() const { return {rows, factors, labels}; }
};

struct MetricConfig {
  std::size_t betavae_votes = 800;     // training votes; half as many are held out
  std::size_t betavae_pairs = 64;
  std::size_t factorvae_votes = 800;   // training votes; half as many are held out
  std::size_t factorvae_batch = 64;
  std::size_t bins = 20;
  double probe_train_fraction = 0.8;   // explicitness and SAP row split
  std::size_t probe_iters = 500;
  double probe_lr = 1.0;
  double probe_tolerance = 1e-6;
  double collapsed_std = 1e-6;
  double irs_quantile = 0.99;
  std::size_t max_rows = 0;            // 0 = use every row
  std::uint64_t seed = 0;
};

struct MetricReport {
  double recon = 0.0;
  double betavae = 0.0;
  double factorvae = 0.0;
  double explicitness = 0.0;
  double irs = 0.0;
  double mig = 0.0;
  double sap = 0.0;
};

// Column order of the metric reports.
inline const char* metric_csv_header() { return "recon,betavae,factorvae,explicitness,irs,mig,sap"; }

inline std::string metric_csv_values(const MetricReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f", r.recon, r.betavae, r.factorvae,
                r.explicitness, r.irs, r.mig, r.sap);
  return buf;
}

// ---------------------------------------------------------------------------
// Probes.

namespace detail {

struct Standardizer {
  std::vector<double> mean, scale;

  static Standardizer fit(std::span<const double> x, std::size_t n, std::size_t d) {
    Standardizer s{std::vector<double>(d, 0.0), std::vector<double>(d, 1.0)};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) s.mean[j] += x[i * d + j];
    for (auto& m : s.mean) m /= static_cast<double>(n);
    std::vector<double> var(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) var[j] += (x[i * d + j] - s.mean[j]) * (x[i * d + j] - s.mean[j]);
    for (std::size_t j = 0; j < d; ++j) {
      const double sd = std::sqrt(var[j] / static_cast<double>(n));
      s.scale[j] = sd > 1e-12 ? sd : 1.0;
    }
    return s;
  }

  std::vector<double> apply(std::span<const double> x, std::size_t d) const {
    std::vector<double> out(x.begin(), x.end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (out[i] - mean[i % d]) / scale[i % d];
    return out;
  }
};

// Multinomial logistic regression by full-batch gradient descent with a
// small L2 penalty; stops once the largest gradient entry drops below tol.
class SoftmaxProbe {
 public:
  void fit(std::span<const double> x, std::size_t n, std::size_t d, std::span<const std::size_t> y,
           std::size_t classes, std::size_t iters, double lr, double tol) {
    d_ = d;
    classes_ = classes;
    w_.assign(classes * (d + 1), 0.0);
    std::vector<double> grad(w_.size()), p(classes);
    const double l2 = 1e-4;
    for (std::size_t it = 0; it < iters; ++it) {
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        logits(x.subspan(i * d, d), p);
        softmax(p);
        p[y[i]] -= 1.0;
        for (std::size_t c = 0; c < classes; ++c) {
          double* gc = grad.data() + c * (d + 1);
          for (std::size_t j = 0; j < d; ++j) gc[j] += p[c] * x[i * d + j];
          gc[d] += p[c];
        }
      }
      double gmax = 0.0;
      for (std::size_t q = 0; q < w_.size(); ++q) {
        grad[q] = grad[q] / static_cast<double>(n) + l2 * w_[q];
        gmax = std::max(gmax, std::abs(grad[q]));
      }
      if (gmax < tol) break;
      for (std::size_t q = 0; q < w_.size(); ++q) w_[q] -= lr * grad[q];
    }
  }

  void logits(std::span<const double> row, std::vector<double>& out) const {
    out.resize(classes_);
    for (std::size_t c = 0; c < classes_; ++c) {
      const double* wc = w_.data() + c * (d_ + 1);
      double s = wc[d_];
      for (std::size_t j = 0; j < d_; ++j) s += wc[j] * row[j];
      out[c] = s;
    }
  }

  std::size_t predict(std::span<const double> row) const {
    std::vector<double> l;
    logits(row, l);
    return static_cast<std::size_t>(std::max_element(l.begin(), l.end()) - l.begin());
  }

 private:
  static void softmax(std::vector<double>& v) {
    const double m = *std::max_element(v.begin(), v.end());
    double s = 0.0;
    for (auto& e : v) s += (e = std::exp(e - m));
    for (auto& e : v) e /= s;
  }

  std::size_t d_ = 0, classes_ = 0;
  std::vector<double> w_;
};

// Mann-Whitney AUC with average ranks for ties.
inline double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t q = i; q <= j; ++q) rank[order[q]] = avg;
    i = j + 1;
  }
  double pos = 0.0, rsum = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (positive[i]) {
      pos += 1.0;
      rsum += rank[i];
    }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0.0 || neg == 0.0) return 0.5;
  return (rsum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

// Equal-occupancy bins; tied values always share a bin.
inline std::vector<std::size_t> discretize(std::span<const double> v, std::size_t bins) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<std::size_t> out(n);
  std::size_t below = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const std::size_t b = std::min(bins - 1, below * bins / n);
    for (std::size_t q = i; q <= j; ++q) out[order[q]] = b;
    below += j - i + 1;
    i = j + 1;
  }
  return out;
}

inline double entropy(std::span<const std::size_t> a) {
  const std::size_t m = a.empty() ? 0 : *std::max_element(a.begin(), a.end()) + 1;
  std::vector<double> c(m, 0.0);
  for (auto x : a) c[x] += 1.0;
  double h = 0.0;
  const double n = static_cast<double>(a.size());
  for (double x : c)
    if (x > 0) h -= x / n * std::log(x / n);
  return h;
}

inline double mutual_information(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  const std::size_t ma = *std::max_element(a.begin(), a.end()) + 1;
  const std::size_t mb = *std::max_element(b.begin(), b.end()) + 1;
  std::vector<double> joint(ma * mb, 0.0), pa(ma, 0.0), pb(mb, 0.0);
  const double n = static_cast<double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[a[i] * mb + b[i]] += 1.0;
    pa[a[i]] += 1.0;
    pb[b[i]] += 1.0;
  }
  double mi = 0.0;
  for (std::size_t i = 0; i < ma; ++i)
    for (std::size_t j = 0; j < mb; ++j) {
      const double c = joint[i * mb + j];
      if (c > 0) mi += c / n * std::log(c * n / (pa[i] * pb[j]));
    }
  return std::max(0.0, mi);
}

// Linear-interpolated quantile (the common "type 7" definition).
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline std::vector<std::size_t> factor_column(const RepresentationTable& t, std::size_t k) {
  std::vector<std::size_t> out(t.rows);
  for (std::size_t r = 0; r < t.rows; ++r) out[r] = t.label(r, k);
  return out;
}

inline std::vector<double> code_column(const RepresentationTable& t, std::size_t j) {
  std::vector<double> out(t.rows);
  for (std::size_t r = 0; r < t.rows; ++r) out[r] = t.code(r, j);
  return out;
}

// Factors with at least two observed values.
inline std::vector<std::size_t> varying_factors(const FactorIndex& idx) {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < idx.factors(); ++k)
    if (idx.distinct(k) >= 2) out.push_back(k);
  return out;
}

// Seeded row permutation split into (train, test).
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> row_split(std::size_t n, double train_fraction,
                                                                               Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto cut = std::clamp<std::size_t>(static_cast<std::size_t>(std::floor(train_fraction * n)), 1, n - 1);
  return {std::vector<std::size_t>(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(cut)),
          std::vector<std::size_t>(idx.begin() + static_cast<std::ptrdiff_t>(cut), idx.end())};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Measures.

// Higgins et al.: for each vote fix one factor, average |z_i - z_j| over B
// pairs sharing it, and predict the fixed factor from that vector with a
// linear classifier. Returns held-out accuracy.
inline double betavae_score(const RepresentationTable& t, const MetricConfig& cfg) {
  FactorIndex idx(t.factor_view());
  const auto candidates = detail::varying_factors(idx);
  if (candidates.empty()) throw MetricError("betavae_score: every factor has a single value");
  Rng rng = make_rng(cfg.seed, Stream::metrics, 1);
  const std::size_t train_votes = std::max<std::size_t>(cfg.betavae_votes, 2);
  const std::size_t eval_votes = std::max<std::size_t>(train_votes / 2, 1);
  const std::size_t total = train_votes + eval_votes, L = t.dims;
  std::vector<double> feats(total * L, 0.0);
  std::vector<std::size_t> labels(total);
  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  for (std::size_t v = 0; v < total; ++v) {
    const std::size_t c = pick(rng);
    labels[v] = c;
    for (auto [i, j] : idx.sample_pairs(candidates[c], cfg.betavae_pairs, rng))
      for (std::size_t d = 0; d < L; ++d) feats[v * L + d] += std::abs(t.code(i, d) - t.code(j, d));
    for (std::size_t d = 0; d < L; ++d) feats[v * L + d] /= static_cast<double>(cfg.betavae_pairs);
  }
  std::span<const double> train(feats.data(), train_votes * L);
  auto scaler = detail::Standardizer::fit(train, train_votes, L);
  auto x = scaler.apply(feats, L);
  detail::SoftmaxProbe probe;
  probe.fit(std::span<const double>(x.data(), train_votes * L), train_votes, L,
            std::span<const std::size_t>(labels.data(), train_votes), candidates.size(), cfg.probe_iters * 4,
            cfg.probe_lr, cfg.probe_tolerance);
  std::size_t correct = 0;
  for (std::size_t v = train_votes; v < total; ++v)
    correct += probe.predict(std::span<const double>(x.data() + v * L, L)) == labels[v];
  return static_cast<double>(correct) / static_cast<double>(eval_votes);
}

// Kim & Mnih: per vote fix a factor, take the dimension with the smallest
// variance of std-normalised codes across the batch, and score a majority
// vote classifier (dimension -> factor) on held-out votes.
inline double factorvae_score(const RepresentationTable& t, const MetricConfig& cfg) {
  std::vector<std::size_t> active;
  for (std::size_t j = 0; j < t.dims; ++j)
    if (t.stddev[j] >= cfg.collapsed_std) active.push_back(j);
  if (active.empty()) throw MetricError("factorvae_score: all code dimensions collapsed");
  FactorIndex idx(t.factor_view());
  const auto candidates = detail::varying_factors(idx);
  if (candidates.empty()) throw MetricError("factorvae_score: every factor has a single value");
  Rng rng = make_rng(cfg.seed, Stream::metrics, 2);
  const std::size_t train_votes = std::max<std::size_t>(cfg.factorvae_votes, 2);
  const std::size_t eval_votes = std::max<std::size_t>(train_votes / 2, 1);
  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  const std::size_t B = std::max<std::size_t>(cfg.factorvae_batch, 2);

  auto vote = [&](std::size_t& factor_slot) {
    const std::size_t c = pick(rng);
    factor_slot = c;
    const auto rows = idx.sample_group(candidates[c], B, rng);
    std::size_t best = active[0];
    double best_var = INFINITY;
    for (std::size_t j : active) {
      double m = 0.0;
      for (auto r : rows) m += t.code(r, j) / t.stddev[j];
      m /= static_cast<double>(B);
      double var = 0.0;
      for (auto r : rows) {
        const double z = t.code(r, j) / t.stddev[j] - m;
        var += z * z;
      }
      var /= static_cast<double>(B - 1);
      if (var < best_var) {
        best_var = var;
        best = j;
      }
    }
    return best;
  };

  const std::size_t C = candidates.size();
  std::vector<std::size_t> counts(t.dims * C, 0);
  for (std::size_t v = 0; v < train_votes; ++v) {
    std::size_t c = 0;
    const std::size_t d = vote(c);
    counts[d * C + c] += 1;
  }
  std::vector<std::size_t> assign(t.dims, 0);
  for (std::size_t d = 0; d < t.dims; ++d)
    assign[d] = static_cast<std::size_t>(std::max_element(counts.begin() + static_cast<std::ptrdiff_t>(d * C),
                                                          counts.begin() + static_cast<std::ptrdiff_t>((d + 1) * C)) -
                                         (counts.begin() + static_cast<std::ptrdiff_t>(d * C)));
  std::size_t correct = 0;
  for (std::size_t v = 0; v < eval_votes; ++v) {
    std::size_t c = 0;
    const std::size_t d = vote(c);
    correct += assign[d] == c;
  }
  return static_cast<double>(correct) / static_cast<double>(eval_votes);
}

// Discrete MI matrix (dims x factors) over equal-occupancy bins, and the
// factor entropies.
struct MutualInfo {
  std::vector<double> mi;  // dims x factors
  std::vector<double> factor_entropy;
  std::size_t dims = 0, factors = 0;
  double at(std::size_t j, std::size_t k) const { return mi[j * factors + k]; }
};

inline MutualInfo mutual_info_matrix(const RepresentationTable& t, std::size_t bins) {
  if (bins < 2) throw MetricError("mutual information: need at least 2 bins");
  MutualInfo m;
  m.dims = t.dims;
  m.factors = t.factors;
  m.mi.assign(t.dims * t.factors, 0.0);
  std::vector<std::vector<std::size_t>> f(t.factors);
  for (std::size_t k = 0; k < t.factors; ++k) {
    f[k] = detail::factor_column(t, k);
    m.factor_entropy.push_back(detail::entropy(f[k]));
  }
  for (std::size_t j = 0; j < t.dims; ++j) {
    const auto z = detail::discretize(detail::code_column(t, j), bins);
    for (std::size_t k = 0; k < t.factors; ++k) m.mi[j * t.factors + k] = detail::mutual_information(z, f[k]);
  }
  return m;
}

// Mean over factors of (largest - second largest MI) / H(factor);
// zero-entropy factors are left out.
inline double mig(const RepresentationTable& t, std::size_t bins = 20) {
  const MutualInfo m = mutual_info_matrix(t, bins);
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t k = 0; k < t.factors; ++k) {
    const double h = m.factor_entropy[k];
    if (h <= 1e-12) continue;
    std::vector<double> col(t.dims);
    for (std::size_t j = 0; j < t.dims; ++j) col[j] = m.at(j, k);
    std::sort(col.begin(), col.end(), std::greater<>());
    const double second = col.size() > 1 ? col[1] : 0.0;
    total += std::clamp((col[0] - second) / h, 0.0, 1.0);
    ++used;
  }
  if (used == 0) throw MetricError("mig: every factor has zero entropy");
  return total / static_cast<double>(used);
}

// Separated attribute predictability. Each (dimension, factor) score is the
// chance-corrected balanced accuracy of a one-dimensional nearest-centroid
// (interval threshold) classifier on held-out rows; SAP averages the gap
// between the two best dimensions per factor.
inline double sap(const RepresentationTable& t, const MetricConfig& cfg = {}) {
  FactorIndex idx(t.factor_view());
  if (detail::varying_factors(idx).empty()) throw MetricError("sap: every factor has zero entropy");
  if (t.rows < 2) throw MetricError("sap: need at least two rows");
  Rng rng = make_rng(cfg.seed, Stream::metrics, 3);
  const auto [train, test] = detail::row_split(t.rows, cfg.probe_train_fraction, rng);
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t k = 0; k < t.factors; ++k) {
    if (idx.distinct(k) < 2) continue;
    std::uint32_t classes = 0;
    for (std::size_t r = 0; r < t.rows; ++r) classes = std::max(classes, t.label(r, k) + 1);
    std::vector<double> scores;
    for (std::size_t j = 0; j < t.dims; ++j) {
      std::vector<double> sum(classes, 0.0), cnt(classes, 0.0);
      for (auto r : train) {
        sum[t.label(r, k)] += t.code(r, j);
        cnt[t.label(r, k)] += 1.0;
      }
      std::vector<std::uint32_t> present;
      for (std::uint32_t c = 0; c < classes; ++c)
        if (cnt[c] > 0) present.push_back(c);
      std::vector<double> hit(classes, 0.0), seen(classes, 0.0);
      for (auto r : test) {
        const double z = t.code(r, j);
        std::uint32_t best = present[0];
        double bd = INFINITY;
        for (auto c : present) {
          const double dist = std::abs(z - sum[c] / cnt[c]);
          if (dist < bd) {
            bd = dist;
            best = c;
          }
        }
        const auto y = t.label(r, k);
        seen[y] += 1.0;
        hit[y] += best == y;
      }
      double bacc = 0.0;
      std::size_t nc = 0;
      for (std::uint32_t c = 0; c < classes; ++c)
        if (seen[c] > 0) {
          bacc += hit[c] / seen[c];
          ++nc;
        }
      if (nc < 2) {
        scores.push_back(0.0);
        continue;
      }
      bacc /= static_cast<double>(nc);
      const double chance = 1.0 / static_cast<double>(nc);
      scores.push_back(std::clamp((bacc - chance) / (1.0 - chance), 0.0, 1.0));
    }
    std::sort(scores.begin(), scores.end(), std::greater<>());
    total += scores[0] - (scores.size() > 1 ? scores[1] : 0.0);
    ++used;
  }
  if (used == 0) throw MetricError("sap: no factor has two classes in the held-out rows");
  return total / static_cast<double>(used);
}

// Recoverability of each factor from the whole code: one-vs-rest logistic
// probes on standardised codes and their squares, ROC-AUC on held-out rows,
// averaged over classes and factors and mapped from [0.5, 1] to [0, 1].
inline double explicitness(const RepresentationTable& t, const MetricConfig& cfg = {},
                           std::vector<std::string>* warnings = nullptr) {
  if (t.rows < 4) throw MetricError("explicitness: need at least four rows");
  Rng rng = make_rng(cfg.seed, Stream::metrics, 4);
  const auto [train, test] = detail::row_split(t.rows, cfg.probe_train_fraction, rng);
  const std::size_t L = t.dims, D = 2 * L;
  auto features = [&](const std::vector<std::size_t>& rows) {
    std::vector<double> raw(rows.size() * L);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < L; ++j) raw[i * L + j] = t.code(rows[i], j);
    return raw;
  };
  auto raw_train = features(train);
  auto raw_test = features(test);
  const auto s1 = detail::Standardizer::fit(raw_train, train.size(), L);
  auto expand = [&](const std::vector<double>& raw, std::size_t n) {
    auto z = s1.apply(raw, L);
    std::vector<double> out(n * D);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < L; ++j) {
        out[i * D + j] = z[i * L + j];
        out[i * D + L + j] = z[i * L + j] * z[i * L + j];
      }
    return out;
  };
  auto x_train_raw = expand(raw_train, train.size());
  auto x_test_raw = expand(raw_test, test.size());
  const auto s2 = detail::Standardizer::fit(x_train_raw, train.size(), D);
  const auto x_train = s2.apply(x_train_raw, D);
  const auto x_test = s2.apply(x_test_raw, D);

  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t k = 0; k < t.factors; ++k) {
    std::uint32_t classes = 0;
    for (std::size_t r = 0; r < t.rows; ++r) classes = std::max(classes, t.label(r, k) + 1);
    double fsum = 0.0;
    std::size_t fused = 0;
    for (std::uint32_t c = 0; c < classes; ++c) {
      std::vector<std::size_t> y(train.size());
      std::size_t pos = 0;
      for (std::size_t i = 0; i < train.size(); ++i) pos += (y[i] = t.label(train[i], k) == c);
      std::vector<std::uint8_t> truth(test.size());
      std::size_t tpos = 0;
      for (std::size_t i = 0; i < test.size(); ++i) tpos += (truth[i] = t.label(test[i], k) == c);
      if (pos == 0 || pos == train.size() || tpos == 0 || tpos == test.size()) continue;
      detail::SoftmaxProbe probe;
      probe.fit(x_train, train.size(), D, y, 2, cfg.probe_iters, cfg.probe_lr, cfg.probe_tolerance);
      std::vector<double> score(test.size()), l;
      for (std::size_t i = 0; i < test.size(); ++i) {
        probe.logits(std::span<const double>(x_test.data() + i * D, D), l);
        score[i] = l[1] - l[0];
      }
      fsum += detail::roc_auc(score, truth);
      ++fused;
    }
    if (fused == 0) {
      if (warnings) warnings->push_back("explicitness: factor " + std::to_string(k) + " has a single class; skipped");
      continue;
    }
    total += fsum / static_cast<double>(fused);
    ++used;
  }
  if (used == 0) throw MetricError("explicitness: no factor has two classes");
  const double auc = total / static_cast<double>(used);
  return std::clamp((auc - 0.5) / 0.5, 0.0, 1.0);
}

// Interventional robustness. Each dimension is attributed to its max-MI
// factor; with that factor held at each of its values (everything else
// varying), the q-quantile of |z - E[z | factor value]| measures how far the
// other factors still move the dimension. Normalised by the dimension's
// largest deviation from its mean, 1 - that ratio is the per-dimension
// score; scores are averaged with the largest deviation as weight.
inline double irs(const RepresentationTable& t, std::size_t bins = 20, double q = 0.99) {
  const MutualInfo m = mutual_info_matrix(t, bins);
  FactorIndex idx(t.factor_view());
  if (detail::varying_factors(idx).empty()) throw MetricError("irs: every factor has zero entropy");
  double num = 0.0, den = 0.0;
  for (std::size_t j = 0; j < t.dims; ++j) {
    const auto z = detail::code_column(t, j);
    const double mean = std::accumulate(z.begin(), z.end(), 0.0) / static_cast<double>(z.size());
    double max_dev = 0.0;
    for (double v : z) max_dev = std::max(max_dev, std::abs(v - mean));
    if (max_dev <= 1e-12) continue;
    std::size_t parent = 0;
    for (std::size_t k = 1; k < t.factors; ++k)
      if (m.at(j, k) > m.at(j, parent)) parent = k;
    double dev = 0.0;
    std::size_t groups = 0;
    std::uint32_t classes = 0;
    for (std::size_t r = 0; r < t.rows; ++r) classes = std::max(classes, t.label(r, parent) + 1);
    for (std::uint32_t c = 0; c < classes; ++c) {
      const auto& rows = idx.rows_with(parent, c);
      if (rows.empty()) continue;
      double e = 0.0;
      for (auto r : rows) e += z[r];
      e /= static_cast<double>(rows.size());
      std::vector<double> diffs;
      diffs.reserve(rows.size());
      for (auto r : rows) diffs.push_back(std::abs(z[r] - e));
      dev += detail::quantile(std::move(diffs), q);
      ++groups;
    }
    dev /= static_cast<double>(groups);
    const double score = std::clamp(1.0 - dev / max_dev, 0.0, 1.0);
    num += max_dev * score;
    den += max_dev;
  }
  return den > 0.0 ? num / den : 0.0;
}

// ---------------------------------------------------------------------------
// Model-facing entry points.

inline RepresentationTable encode_dataset(const VaeModel& model, const FactorDataset& ds,
                                          std::span<const std::size_t> indices, std::size_t chunk = 256) {
  if (model.dims.height != ds.height || model.dims.width != ds.width || model.dims.channels != ds.channels)
    throw MetricError("encode_dataset: model expects " + std::to_string(model.dims.height) + "x" +
                      std::to_string(model.dims.width) + "x" + std::to_string(model.dims.channels) +
                      " images, dataset has " + std::to_string(ds.height) + "x" + std::to_string(ds.width) + "x" +
                      std::to_string(ds.channels));
  if (indices.empty()) throw MetricError("encode_dataset: no rows");
  const std::size_t K = ds.spec.size(), L = model.latent;
  std::vector<double> codes;
  codes.reserve(indices.size() * L);
  std::vector<std::uint32_t> labels;
  labels.reserve(indices.size() * K);
  for (std::size_t off = 0; off < indices.size(); off += chunk) {
    auto part = indices.subspan(off, std::min(chunk, indices.size() - off));
    const Tensor mu = encode_mean(model, to_batch(ds, part));
    codes.insert(codes.end(), mu.data().begin(), mu.data().end());
    for (auto i : part)
      labels.insert(labels.end(), ds.factors.begin() + static_cast<std::ptrdiff_t>(i * K),
                    ds.factors.begin() + static_cast<std::ptrdiff_t>((i + 1) * K));
  }
  return RepresentationTable::make(std::move(codes), L, std::move(labels), K);
}

// Batch-mean per-sample squared error, decoding the encoder mean.
inline double reconstruction_error(const VaeModel& model, const FactorDataset& ds, std::span<const std::size_t> indices,
                                   std::size_t chunk = 256) {
  double total = 0.0;
  for (std::size_t off = 0; off < indices.size(); off += chunk) {
    auto part = indices.subspan(off, std::min(chunk, indices.size() - off));
    const Tensor x = to_batch(ds, part);
    const Tensor xr = decode_values(model, encode_mean(model, x));
    for (std::size_t i = 0; i < x.numel(); ++i) total += (x[i] - xr[i]) * (x[i] - xr[i]);
  }
  return total / static_cast<double>(indices.size());
}

inline MetricReport score_table(const RepresentationTable& t, const MetricConfig& cfg) {
  MetricReport r;
  r.betavae = betavae_score(t, cfg);
  r.factorvae = factorvae_score(t, cfg);
  r.explicitness = explicitness(t, cfg);
  r.irs = irs(t, cfg.bins, cfg.irs_quantile);
  r.mig = mig(t, cfg.bins);
  r.sap = sap(t, cfg);
  return r;
}

// Reconstruction error and all six measures on the given rows (capped at
// cfg.max_rows when set).
inline MetricReport evaluate_all(const VaeModel& model, const FactorDataset& ds, std::span<const std::size_t> indices,
                                 const MetricConfig& cfg) {
  std::vector<std::size_t> rows(indices.begin(), indices.end());
  if (cfg.max_rows > 0 && rows.size() > cfg.max_rows) rows.resize(cfg.max_rows);
  const RepresentationTable t = encode_dataset(model, ds, rows);
  MetricReport r = score_table(t, cfg);
  r.recon = reconstruction_error(model, ds, rows);
  return r;
}

}  // namespace lvae
