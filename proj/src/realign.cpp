#include "shadowalign/realign.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "shadowalign/error.hpp"

namespace shadowalign {

CostMatrix::CostMatrix(std::size_t size, std::vector<double> v, SimKind k) : n(size), values(std::move(v)), kind(k) {
  if (values.size() != n * n) throw ShapeError("cost matrix must be square");
}

double assignment_cost(const CostMatrix& cost, const Permutation& perm) {
  double s = 0.0;
  for (std::size_t i = 0; i < cost.n; ++i) s += cost(i, perm[i]);
  return s;
}

namespace {

// Moves row `row` onto column `target` while keeping rows < `row` fixed, by
// finding an alternating path over tight edges from the current owner of
// `target` back to the column `row` releases. Returns false if impossible.
bool try_reassign(std::size_t row, std::size_t target, const std::vector<std::vector<char>>& tight,
                  std::vector<std::size_t>& row_to_col, std::vector<std::size_t>& col_to_row) {
  const std::size_t n = row_to_col.size();
  const std::size_t released = row_to_col[row];
  const std::size_t start = col_to_row[target];
  if (start < row) return false;
  // BFS over rows; parent_col[r] = column through which r was reached.
  std::vector<std::size_t> via(n, n), prev_row(n, n);
  std::vector<char> visited(n, 0);
  std::vector<std::size_t> queue{start};
  visited[start] = 1;
  for (std::size_t qi = 0; qi < queue.size(); ++qi) {
    const std::size_t r = queue[qi];
    for (std::size_t c = 0; c < n; ++c) {
      if (!tight[r][c] || c == target) continue;
      if (c == released) {
        // Found: r takes c, shift assignments back along the path.
        std::size_t cur_row = r, cur_col = c;
        while (true) {
          const std::size_t old_col = row_to_col[cur_row];
          row_to_col[cur_row] = cur_col;
          col_to_row[cur_col] = cur_row;
          if (cur_row == start) break;
          cur_col = old_col;
          cur_row = prev_row[cur_row];
        }
        row_to_col[row] = target;
        col_to_row[target] = row;
        return true;
      }
      const std::size_t owner = col_to_row[c];
      if (owner <= row || visited[owner]) continue;
      visited[owner] = 1;
      prev_row[owner] = r;
      via[owner] = c;
      queue.push_back(owner);
    }
  }
  return false;
}

}  // namespace

Assignment hungarian(const CostMatrix& cost) {
  const std::size_t n = cost.n;
  if (cost.values.size() != n * n) throw ShapeError("cost matrix must be square");
  for (double v : cost.values)
    if (!std::isfinite(v)) throw InvalidArgument("cost matrix has non-finite entries");
  if (n == 0) return {Permutation(), 0.0};

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }

  std::vector<std::size_t> row_to_col(n), col_to_row(n);
  for (std::size_t j = 1; j <= n; ++j) {
    row_to_col[p[j] - 1] = j - 1;
    col_to_row[j - 1] = p[j] - 1;
  }

  // Every optimal assignment uses only edges that are tight under the optimal
  // potentials, so the lexicographic tie-break searches that subgraph.
  double scale = 1.0;
  for (double x : cost.values) scale = std::max(scale, std::fabs(x));
  const double tol = 1e-12 * scale * static_cast<double>(n);
  std::vector<std::vector<char>> tight(n, std::vector<char>(n, 0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) tight[i][j] = cost(i, j) - u[i + 1] - v[j + 1] <= tol;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < row_to_col[i]; ++j) {
      if (tight[i][j] && try_reassign(i, j, tight, row_to_col, col_to_row)) break;
    }
  }

  Assignment a{Permutation(row_to_col), 0.0};
  a.cost = assignment_cost(cost, a.perm);
  return a;
}

// ---------------------------------------------------------------------------
// Similarity matrices

namespace {

void check_compatible(const Model& a, const Model& b, std::size_t l) {
  const Layer& la = a.param(l);
  const Layer& lb = b.param(l);
  if (la.kind != lb.kind || la.weight.shape != lb.weight.shape) {
    throw ShapeError("layer " + std::to_string(l) + " differs in shape between the two models");
  }
}

CostMatrix distance_matrix(const std::vector<std::vector<float>>& a, const std::vector<std::vector<float>>& b,
                           SimKind kind) {
  const std::size_t n = a.size();
  std::vector<double> v(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) v[i * n + j] = std::sqrt(squared_distance(a[i], b[j]));
  return CostMatrix(n, std::move(v), kind);
}

// series[d] = concatenation over probe records of unit d's activation.
std::vector<std::vector<float>> activation_series(const Model& model, std::size_t l, std::span<const Tensor> probe) {
  const std::size_t units = model.param(l).units();
  std::vector<std::vector<float>> series(units);
  for (const auto& x : probe) {
    ForwardTrace trace = forward(model, x);
    const Tensor& out = layer_output(model, trace, l);
    const std::size_t per = out.size() / units;
    for (std::size_t d = 0; d < units; ++d)
      series[d].insert(series[d].end(), out.data.begin() + static_cast<long>(d * per),
                       out.data.begin() + static_cast<long>((d + 1) * per));
  }
  return series;
}

struct Standardised {
  std::vector<double> centred;
  double norm = 0.0;
};

Standardised standardise(const std::vector<float>& s) {
  Standardised out;
  double mean = 0.0;
  for (float v : s) mean += v;
  mean /= static_cast<double>(s.size());
  out.centred.resize(s.size());
  double ss = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    out.centred[i] = s[i] - mean;
    ss += out.centred[i] * out.centred[i];
  }
  out.norm = std::sqrt(ss);
  return out;
}

double pearson(const Standardised& a, const Standardised& b) {
  if (a.norm <= 0.0 || b.norm <= 0.0) return 0.0;
  double dot = 0.0;
  for (std::size_t i = 0; i < a.centred.size(); ++i) dot += a.centred[i] * b.centred[i];
  return std::clamp(dot / (a.norm * b.norm), -1.0, 1.0);
}

}  // namespace

CostMatrix sim_weight(const Model& model, const Model& reference, std::size_t l, WeightDirection direction) {
  check_compatible(model, reference, l);
  const std::size_t n = model.param(l).units();
  std::vector<std::vector<float>> a(n), b(n);
  for (std::size_t d = 0; d < n; ++d) {
    if (direction == WeightDirection::Input) {
      a[d] = input_weights(model, l, d, true);
      b[d] = input_weights(reference, l, d, true);
    } else {
      check_compatible(model, reference, l + 1);
      a[d] = output_weights(model, l, d);
      b[d] = output_weights(reference, l, d);
    }
  }
  return distance_matrix(a, b, direction == WeightDirection::Input ? SimKind::WeightIn : SimKind::WeightOut);
}

CostMatrix sim_activation(const Model& model, const Model& reference, std::size_t l, std::span<const Tensor> probe) {
  check_compatible(model, reference, l);
  if (probe.empty()) throw InvalidArgument("activation similarity needs probe records");
  return distance_matrix(activation_series(model, l, probe), activation_series(reference, l, probe),
                         SimKind::Activation);
}

CostMatrix sim_correlation(const Model& model, const Model& reference, std::size_t l,
                           std::span<const Tensor> probe) {
  check_compatible(model, reference, l);
  if (probe.size() < 2) throw InvalidArgument("correlation similarity needs at least 2 probe records");
  auto sa = activation_series(model, l, probe);
  auto sb = activation_series(reference, l, probe);
  const std::size_t n = sa.size();
  std::vector<Standardised> za, zb;
  for (auto& s : sa) za.push_back(standardise(s));
  for (auto& s : sb) zb.push_back(standardise(s));
  std::vector<double> v(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) v[i * n + j] = -pearson(za[i], zb[j]);
  return CostMatrix(n, std::move(v), SimKind::Correlation);
}

// ---------------------------------------------------------------------------
// Sweeps

std::string to_string(RealignMethod m) {
  switch (m) {
    case RealignMethod::Weight: return "weight";
    case RealignMethod::Activation: return "activation";
    case RealignMethod::Correlation: return "correlation";
  }
  return "?";
}

std::string to_string(RealignDirection d) { return d == RealignDirection::BottomUp ? "bottom-up" : "top-down"; }

RealignMethod parse_realign_method(const std::string& s) {
  if (s == "weight") return RealignMethod::Weight;
  if (s == "activation") return RealignMethod::Activation;
  if (s == "correlation") return RealignMethod::Correlation;
  throw InvalidArgument("unknown re-alignment method '" + s + "'");
}

RealignDirection parse_realign_direction(const std::string& s) {
  if (s == "bottom-up" || s == "bottom_up" || s == "bottomup") return RealignDirection::BottomUp;
  if (s == "top-down" || s == "top_down" || s == "topdown") return RealignDirection::TopDown;
  throw InvalidArgument("unknown re-alignment direction '" + s + "'");
}

namespace {

std::vector<std::size_t> sweep_order(std::size_t hidden, RealignDirection direction) {
  std::vector<std::size_t> order(hidden);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (direction == RealignDirection::TopDown) std::reverse(order.begin(), order.end());
  return order;
}

void check_same_architecture(const Model& a, const Model& b) {
  if (a.input_shape != b.input_shape || a.layers.size() != b.layers.size()) {
    throw ShapeError("models have different architectures");
  }
  for (std::size_t k = 0; k < a.layers.size(); ++k) {
    const Layer& x = a.layers[k];
    const Layer& y = b.layers[k];
    if (x.kind != y.kind || x.weight.shape != y.weight.shape || x.activation != y.activation) {
      throw ShapeError("models differ at op " + std::to_string(k));
    }
  }
}

}  // namespace

SymmetryOpLog RealignPlan::to_log() const {
  SymmetryOpLog log;
  for (auto l : sweep_order(perms.size(), direction)) log.add_permute(l, perms[l]);
  return log;
}

Model RealignPlan::apply(const Model& model) const { return to_log().replay(model); }

RealignResult realign(const Model& model, const Model& reference, RealignMethod method, RealignDirection direction,
                      std::span<const Tensor> probe) {
  check_same_architecture(model, reference);
  const std::size_t hidden = model.num_param_layers() - 1;
  RealignResult result;
  result.model = model;
  result.plan.method = method;
  result.plan.direction = direction;
  result.plan.perms.resize(hidden);
  for (auto l : sweep_order(hidden, direction)) {
    CostMatrix cost;
    switch (method) {
      case RealignMethod::Weight:
        cost = sim_weight(result.model, reference, l,
                          direction == RealignDirection::BottomUp ? WeightDirection::Input : WeightDirection::Output);
        break;
      case RealignMethod::Activation: cost = sim_activation(result.model, reference, l, probe); break;
      case RealignMethod::Correlation: cost = sim_correlation(result.model, reference, l, probe); break;
    }
    Permutation perm = hungarian(cost).perm;
    result.model = permute_layer(result.model, l, perm);
    result.plan.perms[l] = std::move(perm);
  }
  return result;
}

RealignResult realign_bottom_up(const Model& model, const Model& reference, RealignMethod method,
                                std::span<const Tensor> probe) {
  return realign(model, reference, method, RealignDirection::BottomUp, probe);
}

RealignResult realign_top_down(const Model& model, const Model& reference, RealignMethod method,
                               std::span<const Tensor> probe) {
  return realign(model, reference, method, RealignDirection::TopDown, probe);
}

Model weight_sort_canonical(const Model& model, bool include_bias) {
  Model out = model;
  const std::size_t hidden = model.num_param_layers() - 1;
  for (std::size_t l = 0; l < hidden; ++l) {
    const std::size_t n = out.param(l).units();
    std::vector<double> sums(n);
    for (std::size_t d = 0; d < n; ++d) {
      double s = 0.0;
      for (float w : input_weights(out, l, d, include_bias)) s += w;
      sums[d] = s;
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sums[a] < sums[b]; });
    std::vector<std::size_t> mapping(n);
    for (std::size_t rank = 0; rank < n; ++rank) mapping[order[rank]] = rank;
    out = permute_layer(out, l, Permutation(std::move(mapping)));
  }
  return out;
}

RealignAfterInitResult realign_after_init(const Model& arch, const Model& reference, const LabeledDataset& data,
                                          const LabeledDataset& val, const SeedBundle& seeds, const TrainConfig& cfg) {
  Model init = init_weights(arch, seeds.wi);
  RealignResult aligned = realign_top_down(init, reference, RealignMethod::Weight);
  RealignAfterInitResult out;
  out.plan = std::move(aligned.plan);
  out.trained = train_from(std::move(aligned.model), data, val, seeds, cfg);
  return out;
}

}  // namespace shadowalign
