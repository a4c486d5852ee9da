#include "tsgm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "tsgm/rng.hpp"

namespace tsgm {
namespace {

std::vector<double> normalized_weights(std::span<const double> w) {
  double total = 0.0;
  for (double v : w) {
    if (!(v >= 0.0) || !std::isfinite(v)) fail(ErrorKind::invalid_input, "measure weights must be finite and nonnegative");
    total += v;
  }
  if (!(total > 0.0)) fail(ErrorKind::invalid_input, "measure has zero mass");
  std::vector<double> out(w.begin(), w.end());
  for (auto& v : out) v /= total;
  return out;
}

void require_same_domain(const TorusDomain& a, const TorusDomain& b) {
  if (!(a == b)) fail(ErrorKind::invalid_input, "measures live on different tori");
}

}  // namespace

const char* to_string(TransportMethod m) {
  switch (m) {
    case TransportMethod::circle_exact: return "circle-exact";
    case TransportMethod::grid_lp: return "grid-lp";
    case TransportMethod::entropic: return "entropic";
    case TransportMethod::downsampled_lp: return "downsampled-lp";
    case TransportMethod::empirical_match: return "empirical-match";
  }
  return "unknown";
}

DiscreteMeasure as_measure(const GridDensity& m) {
  DiscreteMeasure out;
  const auto& f = m.function();
  out.points.reserve(f.size());
  out.weights.reserve(f.size());
  for (std::size_t k = 0; k < f.size(); ++k) {
    out.points.push_back(f.node(k));
    out.weights.push_back(f[k] * f.cell_volume());
  }
  return out;
}

DiscreteMeasure as_measure(std::span<const TorusPoint> points) {
  DiscreteMeasure out;
  out.points.assign(points.begin(), points.end());
  out.weights.assign(points.size(), 1.0 / static_cast<double>(points.size()));
  return out;
}

TransportResult w1_circle(const TorusDomain& domain, const DiscreteMeasure& a,
                          const DiscreteMeasure& b) {
  if (domain.dim() != 1) fail(ErrorKind::invalid_input, "w1_circle needs d = 1");
  if (a.points.empty() || b.points.empty()) fail(ErrorKind::invalid_input, "empty measure");
  const auto wa = normalized_weights(a.weights);
  const auto wb = normalized_weights(b.weights);
  const double R = domain.radius();

  std::vector<std::pair<double, double>> atoms;
  atoms.reserve(wa.size() + wb.size());
  for (std::size_t i = 0; i < wa.size(); ++i) atoms.emplace_back(wrap_coord(a.points[i][0], R), wa[i]);
  for (std::size_t i = 0; i < wb.size(); ++i) atoms.emplace_back(wrap_coord(b.points[i][0], R), -wb[i]);
  std::sort(atoms.begin(), atoms.end());

  // F is piecewise constant between atoms; the wrap-around gap carries F = 0.
  std::vector<std::pair<double, double>> pieces;  // (F value, length)
  pieces.reserve(atoms.size());
  double F = 0.0;
  for (std::size_t k = 0; k < atoms.size(); ++k) {
    F += atoms[k].second;
    const double next = k + 1 < atoms.size() ? atoms[k + 1].first : atoms.front().first + R;
    const double len = next - atoms[k].first;
    if (len > 0.0) pieces.emplace_back(k + 1 < atoms.size() ? F : 0.0, len);
  }
  if (pieces.empty()) return {0.0, TransportMethod::circle_exact};

  auto sorted = pieces;
  std::sort(sorted.begin(), sorted.end());
  double total = 0.0;
  for (const auto& p : sorted) total += p.second;
  double acc = 0.0, c = sorted.back().first;
  for (const auto& p : sorted) {
    acc += p.second;
    if (acc >= 0.5 * total) {
      c = p.first;
      break;
    }
  }
  double w = 0.0;
  for (const auto& p : pieces) w += p.second * std::abs(p.first - c);
  return {w, TransportMethod::circle_exact};
}

TransportResult w1_circle(const GridDensity& a, const GridDensity& b) {
  require_same_domain(a.domain(), b.domain());
  auto r = w1_circle(a.domain(), as_measure(a), as_measure(b));
  r.grid_level = a.grid().n();
  return r;
}

TransportResult w1_circle(const ParticleEnsemble& a, const ParticleEnsemble& b) {
  require_same_domain(a.domain, b.domain);
  return w1_circle(a.domain, as_measure(a.points), as_measure(b.points));
}

CostMatrix torus_cost(const TorusDomain& domain, std::span<const TorusPoint> a,
                      std::span<const TorusPoint> b, bool euclidean) {
  CostMatrix C{a.size(), b.size(), std::vector<double>(a.size() * b.size())};
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) {
      if (euclidean) {
        const Vec d = b[j].coords - a[i].coords;
        C.c[i * b.size() + j] = std::sqrt(dot(d, d));
      } else {
        C.c[i * b.size() + j] = torus_distance(domain, a[i], b[j]);
      }
    }
  return C;
}

LpSolution solve_transport_lp(std::span<const double> supply, std::span<const double> demand,
                              const CostMatrix& cost) {
  const std::size_t m = supply.size(), n = demand.size();
  if (m == 0 || n == 0 || cost.rows != m || cost.cols != n)
    fail(ErrorKind::invalid_input, "transport problem dimensions do not match");
  std::vector<double> s(supply.begin(), supply.end()), d(demand.begin(), demand.end());
  const double ts = std::accumulate(s.begin(), s.end(), 0.0);
  const double td = std::accumulate(d.begin(), d.end(), 0.0);
  if (std::abs(ts - td) > 1e-9 * std::max(1.0, ts))
    fail(ErrorKind::invalid_input, "supply and demand masses differ");
  d.back() += ts - td;

  struct Cell {
    std::size_t i, j;
    double x;
  };
  std::vector<Cell> basis;
  basis.reserve(m + n - 1);
  {
    // North-west corner staircase: always a spanning tree of m + n - 1 cells.
    std::size_t i = 0, j = 0;
    while (true) {
      const double x = std::min(s[i], d[j]);
      basis.push_back({i, j, x});
      s[i] -= x;
      d[j] -= x;
      if (i == m - 1 && j == n - 1) break;
      if (j == n - 1 || (i < m - 1 && s[i] <= d[j]))
        ++i;
      else
        ++j;
    }
  }

  const std::size_t nodes = m + n;
  std::vector<std::vector<std::size_t>> adj(nodes);
  for (std::size_t k = 0; k < basis.size(); ++k) {
    adj[basis[k].i].push_back(k);
    adj[m + basis[k].j].push_back(k);
  }

  double cmax = 0.0;
  for (double c : cost.c) cmax = std::max(cmax, std::abs(c));
  const double tol = 1e-13 * std::max(cmax, 1e-300);

  std::vector<double> pot(nodes);
  std::vector<std::size_t> parent_cell(nodes), parent_node(nodes), depth(nodes), queue(nodes);
  const std::size_t none = std::numeric_limits<std::size_t>::max();

  auto compute_tree = [&] {
    std::fill(depth.begin(), depth.end(), none);
    pot[0] = 0.0;
    depth[0] = 0;
    parent_cell[0] = none;
    std::size_t head = 0, tail = 0;
    queue[tail++] = 0;
    while (head < tail) {
      const std::size_t u = queue[head++];
      for (std::size_t k : adj[u]) {
        const std::size_t row = basis[k].i, col = m + basis[k].j;
        const std::size_t v = u == row ? col : row;
        if (depth[v] != none) continue;
        depth[v] = depth[u] + 1;
        parent_cell[v] = k;
        parent_node[v] = u;
        pot[v] = cost(basis[k].i, basis[k].j) - pot[u];
        queue[tail++] = v;
      }
    }
    if (tail != nodes) fail(ErrorKind::solver_diverged, "transport basis lost connectivity");
  };

  const std::size_t total_cells = m * n;
  const std::size_t block =
      std::max<std::size_t>(std::min<std::size_t>(total_cells, 64),
                            static_cast<std::size_t>(std::sqrt(static_cast<double>(total_cells))));
  std::size_t cursor = 0;
  const std::size_t max_pivots = 1000 * nodes * nodes + 100000;
  LpSolution out;

  std::vector<std::size_t> path_a, path_b;
  std::vector<std::size_t> cycle;
  while (true) {
    compute_tree();
    // Block pricing: best candidate in the first block that has one.
    std::size_t best = none;
    double best_red = -tol;
    std::size_t scanned = 0;
    while (scanned < total_cells) {
      const std::size_t stop = std::min(total_cells, scanned + block);
      for (; scanned < stop; ++scanned) {
        const std::size_t cell = (cursor + scanned) % total_cells;
        const std::size_t i = cell / n, j = cell % n;
        const double red = cost.c[cell] - pot[i] - pot[m + j];
        if (red < best_red) {
          best_red = red;
          best = cell;
        }
      }
      if (best != none) break;
    }
    if (best == none) break;
    cursor = (best + 1) % total_cells;
    if (++out.pivots > max_pivots) fail(ErrorKind::solver_diverged, "transport simplex did not converge");

    const std::size_t p = best / n, q = best % n;
    std::size_t a = p, b = m + q;
    path_a.clear();
    path_b.clear();
    while (depth[a] > depth[b]) {
      path_a.push_back(parent_cell[a]);
      a = parent_node[a];
    }
    while (depth[b] > depth[a]) {
      path_b.push_back(parent_cell[b]);
      b = parent_node[b];
    }
    while (a != b) {
      path_a.push_back(parent_cell[a]);
      a = parent_node[a];
      path_b.push_back(parent_cell[b]);
      b = parent_node[b];
    }
    // Cycle after the entering cell: up from column q, then down to row p.
    cycle.assign(path_b.begin(), path_b.end());
    cycle.insert(cycle.end(), path_a.rbegin(), path_a.rend());
    double theta = std::numeric_limits<double>::infinity();
    std::size_t leave = none;
    for (std::size_t k = 0; k < cycle.size(); k += 2) {
      if (basis[cycle[k]].x < theta) {
        theta = basis[cycle[k]].x;
        leave = k;
      }
    }
    for (std::size_t k = 0; k < cycle.size(); ++k) basis[cycle[k]].x += (k % 2 == 0 ? -theta : theta);

    const std::size_t lk = cycle[leave];
    auto drop = [&](std::size_t node) {
      auto& v = adj[node];
      v.erase(std::find(v.begin(), v.end(), lk));
    };
    drop(basis[lk].i);
    drop(m + basis[lk].j);
    basis[lk] = {p, q, theta};
    adj[p].push_back(lk);
    adj[m + q].push_back(lk);
  }

  double min_red = 0.0;
  for (std::size_t cell = 0; cell < total_cells; ++cell)
    min_red = std::min(min_red, cost.c[cell] - pot[cell / n] - pot[m + cell % n]);
  for (const auto& c : basis) out.primal += std::max(c.x, 0.0) * cost(c.i, c.j);
  for (std::size_t i = 0; i < m; ++i) out.dual += supply[i] * pot[i];
  for (std::size_t j = 0; j < n; ++j) out.dual += demand[j] * pot[m + j];
  out.dual += min_red * ts;
  return out;
}

double assignment_cost(const CostMatrix& cost) {
  const std::size_t n = cost.rows;
  if (n == 0 || cost.cols != n) fail(ErrorKind::invalid_input, "assignment needs a square cost matrix");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
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
    } while (j0 != 0);
  }
  double total = 0.0;
  for (std::size_t j = 1; j <= n; ++j) total += cost(p[j] - 1, j - 1);
  return total / static_cast<double>(n);
}

SinkhornBounds sinkhorn_certified(std::span<const double> a, std::span<const double> b,
                                  const CostMatrix& cost, double reg, int max_iterations,
                                  double marginal_tol) {
  if (!(reg > 0.0)) fail(ErrorKind::invalid_input, "entropic regularization must be positive");
  if (cost.rows != a.size() || cost.cols != b.size())
    fail(ErrorKind::invalid_input, "sinkhorn dimensions do not match");
  const auto wa = normalized_weights(a);
  const auto wb = normalized_weights(b);
  std::vector<std::size_t> I, J;
  for (std::size_t i = 0; i < wa.size(); ++i)
    if (wa[i] > 0.0) I.push_back(i);
  for (std::size_t j = 0; j < wb.size(); ++j)
    if (wb[j] > 0.0) J.push_back(j);
  const std::size_t m = I.size(), n = J.size();
  std::vector<double> f(m, 0.0), g(n, 0.0), la(m), lb(n), tmp(std::max(m, n));
  for (std::size_t i = 0; i < m; ++i) la[i] = std::log(wa[I[i]]);
  for (std::size_t j = 0; j < n; ++j) lb[j] = std::log(wb[J[j]]);
  auto C = [&](std::size_t i, std::size_t j) { return cost(I[i], J[j]); };

  auto lse = [&](std::size_t len) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, tmp[k]);
    double s = 0.0;
    for (std::size_t k = 0; k < len; ++k) s += std::exp(tmp[k] - mx);
    return mx + std::log(s);
  };

  SinkhornBounds out;
  double cmax = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) cmax = std::max(cmax, C(i, j));
  // Warm-started annealing of the regularisation; only the last stage must
  // meet the marginal tolerance.
  double stage_reg = std::max(reg, cmax);
  while (stage_reg > reg) {
    const double r = stage_reg;
    for (int it = 0; it < 50; ++it) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) tmp[j] = (g[j] - C(i, j)) / r;
        f[i] = r * (la[i] - lse(n));
      }
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < m; ++i) tmp[i] = (f[i] - C(i, j)) / r;
        g[j] = r * (lb[j] - lse(m));
      }
    }
    out.iterations += 50;
    stage_reg = std::max(reg, 0.5 * stage_reg);
    if (stage_reg == reg) break;
  }
  for (int it = 0; it < max_iterations; ++it) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) tmp[j] = (g[j] - C(i, j)) / reg;
      f[i] = reg * (la[i] - lse(n));
    }
    double err = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t i = 0; i < m; ++i) tmp[i] = (f[i] - C(i, j)) / reg;
      const double l = lse(m);
      err += std::abs(std::exp(l) - wb[J[j]]);
      g[j] = reg * (lb[j] - l);
    }
    ++out.iterations;
    if (err < marginal_tol) break;
  }

  // Rounding onto the polytope keeps the plan feasible, so its cost is an upper bound.
  std::vector<double> P(m * n), row(m, 0.0), col(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      P[i * n + j] = std::exp((f[i] + g[j] - C(i, j)) / reg);
      row[i] += P[i * n + j];
    }
  for (std::size_t i = 0; i < m; ++i) {
    const double sc = row[i] > wa[I[i]] ? wa[I[i]] / row[i] : 1.0;
    for (std::size_t j = 0; j < n; ++j) P[i * n + j] *= sc;
  }
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) col[j] += P[i * n + j];
  for (std::size_t j = 0; j < n; ++j) {
    const double sc = col[j] > wb[J[j]] ? wb[J[j]] / col[j] : 1.0;
    for (std::size_t i = 0; i < m; ++i) P[i * n + j] *= sc;
  }
  std::fill(row.begin(), row.end(), 0.0);
  std::fill(col.begin(), col.end(), 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      row[i] += P[i * n + j];
      col[j] += P[i * n + j];
    }
  double ea_norm = 0.0;
  std::vector<double> ea(m), eb(n);
  for (std::size_t i = 0; i < m; ++i) ea_norm += (ea[i] = std::max(wa[I[i]] - row[i], 0.0));
  for (std::size_t j = 0; j < n; ++j) eb[j] = std::max(wb[J[j]] - col[j], 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double p = P[i * n + j];
      if (ea_norm > 0.0) p += ea[i] * eb[j] / ea_norm;
      out.upper += p * C(i, j);
    }

  // Double c-transform of f gives a feasible dual pair, hence a lower bound.
  std::vector<double> gc(n), fc(m);
  for (std::size_t j = 0; j < n; ++j) {
    double mn = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < m; ++i) mn = std::min(mn, C(i, j) - f[i]);
    gc[j] = mn;
  }
  for (std::size_t i = 0; i < m; ++i) {
    double mn = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mn = std::min(mn, C(i, j) - gc[j]);
    fc[i] = mn;
  }
  for (std::size_t i = 0; i < m; ++i) out.lower += wa[I[i]] * fc[i];
  for (std::size_t j = 0; j < n; ++j) out.lower += wb[J[j]] * gc[j];
  return out;
}

namespace {

struct NodeAtoms {
  std::vector<TorusPoint> points;
  std::vector<double> mass;
};

NodeAtoms positive_atoms(const DiscreteMeasure& m) {
  NodeAtoms out;
  const auto w = normalized_weights(m.weights);
  for (std::size_t k = 0; k < w.size(); ++k)
    if (w[k] > 0.0) {
      out.points.push_back(m.points[k]);
      out.mass.push_back(w[k]);
    }
  return out;
}

TransportResult exact_lp(const TorusDomain& domain, const DiscreteMeasure& a,
                         const DiscreteMeasure& b, bool euclidean) {
  const auto A = positive_atoms(a);
  const auto B = positive_atoms(b);
  const auto C = torus_cost(domain, A.points, B.points, euclidean);
  const auto sol = solve_transport_lp(A.mass, B.mass, C);
  TransportResult r;
  r.distance = sol.primal;
  r.method = TransportMethod::grid_lp;
  r.certified_bound = std::max(0.0, sol.primal - sol.dual) + 1e-14 * (1.0 + sol.primal);
  r.certifiable = !euclidean;
  return r;
}

// Nearest coarse node for each fine node, returning the coarse density and
// the mass-weighted displacement (an upper bound on the W1 move).
std::pair<GridDensity, double> downsample(const GridDensity& m, int coarse_n) {
  const auto& dom = m.domain();
  const int n = m.grid().n();
  const int f = n / coarse_n;
  const double h = m.grid().spacing(dom);
  GridFunction coarse(dom, GridSpec(coarse_n));
  double moved = 0.0;
  auto nearest = [&](int i, double& disp) {
    int I = (i + f / 2) / f;
    disp = std::abs(i - I * f) * h;
    return I % coarse_n;
  };
  const double cv_fine = m.function().cell_volume();
  const double cv_coarse = coarse.cell_volume();
  for (int i = 0; i < n; ++i) {
    double di;
    const int I = nearest(i, di);
    for (int j = 0; j < n; ++j) {
      double dj;
      const int J = nearest(j, dj);
      const double mass = m[static_cast<std::size_t>(i) * n + j] * cv_fine;
      coarse[static_cast<std::size_t>(I) * coarse_n + J] += mass / cv_coarse;
      moved += mass * std::sqrt(di * di + dj * dj);
    }
  }
  return {GridDensity::normalized(std::move(coarse)), moved};
}

int coarse_level(int n, int cap) {
  for (int c = std::min(n, cap); c >= 8; --c)
    if (n % c == 0 && c % 2 == 0) return c;
  fail(ErrorKind::configuration, "no admissible coarse grid for downsampling");
}

}  // namespace

TransportResult w1_grid_entropic(const GridDensity& a, const GridDensity& b, double reg) {
  require_same_domain(a.domain(), b.domain());
  a.function().require_same_layout(b.function());
  const auto A = as_measure(a);
  const auto B = as_measure(b);
  const auto C = torus_cost(a.domain(), A.points, B.points);
  const auto sb = sinkhorn_certified(A.weights, B.weights, C, reg);
  TransportResult r;
  r.distance = sb.upper;
  r.method = TransportMethod::entropic;
  r.certified_bound = std::max(0.0, sb.upper - sb.lower);
  r.regularization = reg;
  r.grid_level = a.grid().n();
  return r;
}

TransportResult w1_grid(const GridDensity& a, const GridDensity& b, const W1GridOptions& opt) {
  require_same_domain(a.domain(), b.domain());
  a.function().require_same_layout(b.function());
  if (a.domain().dim() == 1) return w1_circle(a, b);
  const int n = a.grid().n();
  if (n <= opt.exact_max_n) {
    auto r = exact_lp(a.domain(), as_measure(a), as_measure(b), opt.euclidean_cost);
    r.grid_level = n;
    return r;
  }
  if (opt.large_use_entropic) {
    const double reg = opt.entropic_regularization > 0.0 ? opt.entropic_regularization
                                                         : a.grid().spacing(a.domain()) / 4.0;
    return w1_grid_entropic(a, b, reg);
  }
  const int nc = coarse_level(n, opt.exact_max_n);
  const auto [ca, ma] = downsample(a, nc);
  const auto [cb, mb] = downsample(b, nc);
  auto r = exact_lp(a.domain(), as_measure(ca), as_measure(cb), opt.euclidean_cost);
  r.method = TransportMethod::downsampled_lp;
  r.certified_bound += ma + mb;
  r.grid_level = nc;
  return r;
}

double l1_distance(const GridDensity& a, const GridDensity& b) {
  a.function().require_same_layout(b.function());
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += std::abs(a[k] - b[k]);
  return s * a.function().cell_volume();
}

TransportResult w1_empirical(const ParticleEnsemble& a, const ParticleEnsemble& b,
                             const W1EmpiricalOptions& opt) {
  require_same_domain(a.domain, b.domain);
  if (a.points.empty() || b.points.empty()) fail(ErrorKind::invalid_input, "empty ensemble");
  if (a.domain.dim() == 1) {
    auto r = w1_circle(a, b);
    r.method = TransportMethod::circle_exact;
    return r;
  }
  const std::size_t na = a.size(), nb = b.size();
  if (na == nb && na <= opt.exact_max) {
    TransportResult r;
    r.distance = assignment_cost(torus_cost(a.domain, a.points, b.points));
    r.method = TransportMethod::empirical_match;
    return r;
  }
  if (na <= opt.exact_max && nb <= opt.exact_max) {
    auto r = exact_lp(a.domain, as_measure(a.points), as_measure(b.points), false);
    r.method = TransportMethod::empirical_match;
    return r;
  }
  auto subsample = [&](const std::vector<TorusPoint>& pts, std::uint64_t stream) {
    if (pts.size() <= opt.entropic_max) return pts;
    std::vector<std::size_t> idx(pts.size());
    std::iota(idx.begin(), idx.end(), 0);
    StreamRng rng(opt.seed, stream);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<TorusPoint> out;
    out.reserve(opt.entropic_max);
    for (std::size_t k = 0; k < opt.entropic_max; ++k) out.push_back(pts[idx[k]]);
    return out;
  };
  const auto pa = subsample(a.points, 1);
  const auto pb = subsample(b.points, 2);
  const auto A = as_measure(pa);
  const auto B = as_measure(pb);
  const double reg = 2e-3 * a.domain.radius();
  const auto sb = sinkhorn_certified(A.weights, B.weights, torus_cost(a.domain, pa, pb), reg);
  TransportResult r;
  r.distance = sb.upper;
  r.method = TransportMethod::entropic;
  r.certified_bound = std::max(0.0, sb.upper - sb.lower);
  r.regularization = reg;
  r.resampled = pa.size() != na || pb.size() != nb;
  return r;
}

}  // namespace tsgm
