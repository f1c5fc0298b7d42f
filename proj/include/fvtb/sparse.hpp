#pragma once

// L1-constrained sparse coding by homotopy on the lasso path, and dictionary
// learning by alternating coding with block coordinate atom updates.

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "fvtb/errors.hpp"
#include "fvtb/log.hpp"
#include "fvtb/parallel.hpp"

namespace fvtb {

/// Columns are atoms with Euclidean norm <= 1.
struct Dictionary {
  Eigen::MatrixXd matrix;

  Dictionary() = default;
  explicit Dictionary(Eigen::MatrixXd m) : matrix(std::move(m)) {}

  Eigen::Index dim() const { return matrix.rows(); }
  Eigen::Index atoms() const { return matrix.cols(); }
};

struct SparseCode {
  Eigen::VectorXd coefficients;
  double l1_norm = 0;
  double objective = 0;  // ||D alpha - y||^2
  int steps = 0;         // homotopy segments taken
};

namespace detail {

// Lower Cholesky factor of the active Gram block, grown one column at a time.
class ActiveCholesky {
 public:
  void reset(Eigen::Index capacity) {
    L_.setZero(capacity, capacity);
    n_ = 0;
  }
  Eigen::Index size() const { return n_; }

  // Appends a column given its Gram entries against the current set (g) and
  // itself (gjj). Returns false if the new column is numerically dependent.
  bool append(const Eigen::VectorXd& g, double gjj) {
    if (n_ == L_.rows()) grow();
    Eigen::VectorXd l = g;
    if (n_ > 0) L_.topLeftCorner(n_, n_).triangularView<Eigen::Lower>().solveInPlace(l);
    const double d2 = gjj - (n_ > 0 ? l.squaredNorm() : 0.0);
    if (!(d2 > 1e-10 * std::max(gjj, 1e-300))) return false;
    if (n_ > 0) L_.row(n_).head(n_) = l.transpose();
    L_(n_, n_) = std::sqrt(d2);
    ++n_;
    return true;
  }

  Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const {
    Eigen::VectorXd x = rhs;
    auto L = L_.topLeftCorner(n_, n_);
    L.triangularView<Eigen::Lower>().solveInPlace(x);
    L.transpose().triangularView<Eigen::Upper>().solveInPlace(x);
    return x;
  }

 private:
  void grow() {
    const Eigen::Index cap = std::max<Eigen::Index>(8, 2 * L_.rows());
    Eigen::MatrixXd next = Eigen::MatrixXd::Zero(cap, cap);
    next.topLeftCorner(n_, n_) = L_.topLeftCorner(n_, n_);
    L_.swap(next);
  }

  Eigen::MatrixXd L_;
  Eigen::Index n_ = 0;
};

}  // namespace detail

/// Solves min ||D a - y||^2 s.t. ||a||_1 <= lambda given only the Gram matrix
/// G = D^T D, the correlations c = D^T y and yy = y^T y.
///
/// Follows the lasso regularization path from the largest penalty downwards
/// (LARS with sign-violation drops) and stops exactly where the path's L1
/// norm reaches lambda, or where the penalty reaches zero if the
/// unconstrained least-squares fit is feasible.
inline SparseCode sparse_code_gram(const Eigen::MatrixXd& G, const Eigen::VectorXd& c, double yy,
                                   double lambda) {
  const Eigen::Index K = G.rows();
  if (!(lambda > 0)) throw ConfigError("sparse_code: lambda must be positive");
  if (!c.allFinite() || !std::isfinite(yy)) throw NumericalError("sparse_code: non-finite signal");

  SparseCode out;
  out.coefficients = Eigen::VectorXd::Zero(K);
  Eigen::VectorXd& beta = out.coefficients;

  Eigen::Index jmax = 0;
  double cmax = K > 0 ? c.cwiseAbs().maxCoeff(&jmax) : 0.0;
  const double scale = std::max(cmax, 1e-300);
  if (K == 0 || cmax <= 1e-14 * std::max(1.0, std::sqrt(yy))) {
    out.objective = std::max(yy, 0.0);
    return out;
  }

  std::vector<Eigen::Index> active;
  std::vector<double> sign;
  std::vector<char> in_active(K, 0), excluded(K, 0);
  detail::ActiveCholesky chol;
  chol.reset(std::min<Eigen::Index>(K, 64));

  auto add = [&](Eigen::Index j, double s) {
    Eigen::VectorXd g(static_cast<Eigen::Index>(active.size()));
    for (std::size_t i = 0; i < active.size(); ++i) g(i) = G(active[i], j);
    if (!chol.append(g, G(j, j))) {
      excluded[j] = 1;
      return false;
    }
    active.push_back(j);
    sign.push_back(s);
    in_active[j] = 1;
    return true;
  };
  auto rebuild = [&]() {
    chol.reset(std::max<Eigen::Index>(8, static_cast<Eigen::Index>(active.size())));
    auto a = active;
    auto s = sign;
    active.clear();
    sign.clear();
    std::fill(in_active.begin(), in_active.end(), 0);
    for (std::size_t i = 0; i < a.size(); ++i) add(a[i], s[i]);
  };

  add(jmax, c(jmax) > 0 ? 1.0 : -1.0);
  Eigen::VectorXd corr = c;
  double l1 = 0;
  Eigen::Index just_dropped = -1;
  const int max_steps = static_cast<int>(8 * K + 64);
  const double tiny = 1e-13 * scale;

  for (int step = 0; step < max_steps && !active.empty(); ++step) {
    out.steps = step + 1;
    const auto na = static_cast<Eigen::Index>(active.size());
    Eigen::VectorXd s(na);
    for (Eigen::Index i = 0; i < na; ++i) s(i) = sign[i];
    const Eigen::VectorXd d = chol.solve(s);
    Eigen::VectorXd a = Eigen::VectorXd::Zero(K);
    for (Eigen::Index i = 0; i < na; ++i) a.noalias() += G.col(active[i]) * d(i);
    const double slope = s.dot(d);

    enum class Event { end, cap, add, drop } ev = Event::end;
    double gamma = cmax;
    if (slope > 0) {
      const double g_cap = (lambda - l1) / slope;
      if (g_cap <= gamma) {
        gamma = std::max(g_cap, 0.0);
        ev = Event::cap;
      }
    }
    Eigen::Index who = -1;
    double who_sign = 0;
    for (Eigen::Index j = 0; j < K; ++j) {
      if (in_active[j] || excluded[j] || j == just_dropped) continue;
      if (1 - a(j) > 1e-12) {
        const double g = (cmax - corr(j)) / (1 - a(j));
        if (g > tiny && g < gamma) {
          gamma = g;
          ev = Event::add;
          who = j;
          who_sign = 1;
        }
      }
      if (1 + a(j) > 1e-12) {
        const double g = (cmax + corr(j)) / (1 + a(j));
        if (g > tiny && g < gamma) {
          gamma = g;
          ev = Event::add;
          who = j;
          who_sign = -1;
        }
      }
    }
    for (Eigen::Index i = 0; i < na; ++i) {
      const double b = beta(active[i]);
      if (d(i) != 0 && b != 0 && (b > 0) != (d(i) > 0)) {
        const double g = -b / d(i);
        if (g > 0 && g < gamma) {
          gamma = g;
          ev = Event::drop;
          who = i;
        }
      }
    }

    for (Eigen::Index i = 0; i < na; ++i) beta(active[i]) += gamma * d(i);
    cmax -= gamma;
    just_dropped = -1;
    if (ev == Event::drop) {
      const Eigen::Index j = active[who];
      beta(j) = 0;
      active.erase(active.begin() + who);
      sign.erase(sign.begin() + who);
      rebuild();
      just_dropped = j;
    }
    l1 = beta.cwiseAbs().sum();
    if (ev == Event::drop || step % 32 == 31) {
      corr = c;
      for (Eigen::Index i = 0; i < K; ++i)
        if (beta(i) != 0) corr.noalias() -= G.col(i) * beta(i);
    } else {
      corr.noalias() -= gamma * a;
    }

    if (ev == Event::end || ev == Event::cap || cmax <= tiny) break;
    if (ev == Event::add) add(who, who_sign);
  }

  // The cap step is linear in the path so it lands on the constraint up to
  // rounding; rescale if rounding overshot.
  l1 = beta.cwiseAbs().sum();
  if (l1 > lambda) beta *= lambda / l1;
  out.l1_norm = beta.cwiseAbs().sum();
  out.objective = std::max(yy - 2 * beta.dot(c) + beta.dot(G * beta), 0.0);
  return out;
}

/// Sparse code of one signal. Reports the residual computed directly from D.
inline SparseCode sparse_code(const Dictionary& dict, const Eigen::VectorXd& signal, double lambda) {
  if (signal.size() != dict.dim())
    throw DimensionError("sparse_code: signal dim " + std::to_string(signal.size()) +
                         " != dictionary dim " + std::to_string(dict.dim()));
  if (!signal.allFinite() || !dict.matrix.allFinite())
    throw NumericalError("sparse_code: non-finite input");
  const Eigen::MatrixXd G = dict.matrix.transpose() * dict.matrix;
  const Eigen::VectorXd c = dict.matrix.transpose() * signal;
  SparseCode code = sparse_code_gram(G, c, signal.squaredNorm(), lambda);
  code.objective = (dict.matrix * code.coefficients - signal).squaredNorm();
  return code;
}

/// Reusable coder: caches the Gram matrix of a fixed dictionary.
class SparseCoder {
 public:
  SparseCoder() = default;
  explicit SparseCoder(const Dictionary& dict)
      : D_(dict.matrix), G_(dict.matrix.transpose() * dict.matrix) {}

  const Eigen::MatrixXd& gram() const { return G_; }

  SparseCode code(const Eigen::VectorXd& signal, double lambda) const {
    if (signal.size() != D_.rows()) throw DimensionError("SparseCoder: signal dimension mismatch");
    if (!signal.allFinite()) throw NumericalError("SparseCoder: non-finite signal");
    return sparse_code_gram(G_, D_.transpose() * signal, signal.squaredNorm(), lambda);
  }

 private:
  Eigen::MatrixXd D_;
  Eigen::MatrixXd G_;
};

struct DictionaryLearningResult {
  Dictionary dictionary;
  std::vector<double> objectives;  // sum of squared residuals after each epoch
};

/// Alternating minimization of sum_i ||x_i - D a_i||^2 s.t. ||a_i||_1 <= lambda,
/// ||d_j|| <= 1. Initial atoms are k distinct normalized samples chosen by
/// `seed`; when k exceeds the usable samples the rest are seeded Gaussian
/// noise.
inline DictionaryLearningResult learn_dictionary(const Eigen::MatrixXd& samples, Eigen::Index k,
                                                 double lambda, int epochs, std::uint64_t seed,
                                                 int threads = 1) {
  const Eigen::Index dim = samples.rows();
  const Eigen::Index n = samples.cols();
  if (n < 1 || k < 1 || dim < 1) throw DimensionError("learn_dictionary: need N >= 1, k >= 1");
  if (!(lambda > 0)) throw ConfigError("learn_dictionary: lambda must be positive");
  if (epochs < 0) throw ConfigError("learn_dictionary: epochs must be >= 0");
  if (!samples.allFinite()) throw NumericalError("learn_dictionary: non-finite samples");

  std::mt19937_64 rng(seed);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  for (Eigen::Index i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<Eigen::Index> pick(0, i);
    std::swap(order[i], order[pick(rng)]);
  }
  Eigen::MatrixXd D(dim, k);
  Eigen::Index filled = 0;
  for (Eigen::Index i = 0; i < n && filled < k; ++i) {
    const auto col = samples.col(order[i]);
    const double nrm = col.norm();
    if (nrm <= 1e-12) continue;
    D.col(filled++) = col / nrm;
  }
  if (filled < k) {
    log::warn("learn_dictionary: only " + std::to_string(filled) + " usable samples for " +
              std::to_string(k) + " atoms; filling the rest with noise");
    std::normal_distribution<double> normal;
    for (; filled < k; ++filled) {
      Eigen::VectorXd v(dim);
      for (auto& x : v) x = normal(rng);
      D.col(filled) = v / v.norm();
    }
  }

  Eigen::VectorXd yy(n);
  for (Eigen::Index i = 0; i < n; ++i) yy(i) = samples.col(i).squaredNorm();
  const double total_yy = yy.sum();

  DictionaryLearningResult result;
  std::vector<Eigen::VectorXd> codes(static_cast<std::size_t>(n));
  bool have_codes = false;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    const Eigen::MatrixXd G = D.transpose() * D;
    const Eigen::MatrixXd C0 = D.transpose() * samples;
    parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t i) {
      const auto ii = static_cast<Eigen::Index>(i);
      SparseCode sc = sparse_code_gram(G, C0.col(ii), yy(ii), lambda);
      if (have_codes) {
        const Eigen::VectorXd& old = codes[i];
        const double old_obj = yy(ii) - 2 * old.dot(C0.col(ii)) + old.dot(G * old);
        if (old_obj <= sc.objective) return;
      }
      codes[i] = std::move(sc.coefficients);
    });
    have_codes = true;

    std::vector<Eigen::Triplet<double>> trips;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < k; ++j)
        if (codes[i](j) != 0) trips.emplace_back(j, i, codes[i](j));
    Eigen::SparseMatrix<double> A(k, n);
    A.setFromTriplets(trips.begin(), trips.end());
    const Eigen::MatrixXd B = samples * A.transpose();                 // dim x k
    const Eigen::MatrixXd C = Eigen::MatrixXd(A * A.transpose());      // k x k

    for (Eigen::Index j = 0; j < k; ++j) {
      const double cjj = C(j, j);
      if (cjj <= 0) continue;
      Eigen::VectorXd u = (B.col(j) - D * C.col(j)) / cjj + D.col(j);
      const double nrm = u.norm();
      if (nrm > 1) u /= nrm;
      D.col(j) = u;
    }

    const Eigen::MatrixXd Gn = D.transpose() * D;
    double obj = total_yy - 2 * (D.array() * B.array()).sum() + (Gn.array() * C.array()).sum();
    result.objectives.push_back(std::max(obj, 0.0));
    log::debug("learn_dictionary epoch " + std::to_string(epoch) + " objective " +
               std::to_string(obj));
  }
  result.dictionary = Dictionary(std::move(D));
  return result;
}

}  // namespace fvtb
