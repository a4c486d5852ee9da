#include "tsgm/distributions.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace tsgm {
namespace {

struct Component {
  double log_weight;
  TorusPoint center;
  double kernel_time;
};

FlowEval evaluate_components(const TorusDomain& domain, const std::vector<Component>& comps,
                             const TorusPoint& x) {
  const int d = domain.dim();
  const double R = domain.radius();
  double max_l = -std::numeric_limits<double>::infinity();
  struct Local {
    double l;
    Vec g;
    Sym2 m;
  };
  std::vector<Local> loc;
  loc.reserve(comps.size());
  for (const auto& c : comps) {
    Local e{c.log_weight, {0.0, 0.0}, {}};
    double d2[2] = {0.0, 0.0};
    for (int i = 0; i < d; ++i) {
      const auto k = heat_kernel_log_1d(R, c.kernel_time, x[i] - c.center[i]);
      e.l += k.log_value;
      e.g[i] = k.dlog;
      d2[i] = k.d2rel;
    }
    e.m = {d2[0], d == 2 ? e.g[0] * e.g[1] : 0.0, d == 2 ? d2[1] : 0.0};
    max_l = std::max(max_l, e.l);
    loc.push_back(e);
  }
  double z = 0.0;
  for (const auto& e : loc) z += std::exp(e.l - max_l);
  FlowEval out;
  out.log_density = max_l + std::log(z);
  Sym2 second;
  for (const auto& e : loc) {
    const double r = std::exp(e.l - out.log_density);
    out.score = out.score + r * e.g;
    second.xx += r * e.m.xx;
    second.xy += r * e.m.xy;
    second.yy += r * e.m.yy;
  }
  out.log_hessian = {second.xx - out.score[0] * out.score[0],
                     second.xy - out.score[0] * out.score[1],
                     second.yy - out.score[1] * out.score[1]};
  return out;
}

FlowEval evaluate_spectral(const Spectral& sp, const Spectral::Coeffs& coeffs, double tau,
                           const TorusPoint& x) {
  const TorusDomain& domain = sp.domain();
  const int n = sp.grid().n();
  const int half = n / 2 + 1;
  const double w = 2.0 * M_PI / domain.radius();
  double v = 0.0, gx = 0.0, gy = 0.0, hxx = 0.0, hxy = 0.0, hyy = 0.0;
  auto accumulate = [&](double kx, double ky, double mult, std::complex<double> c) {
    const double damp = mult * std::exp(-(kx * kx + ky * ky) * tau);
    const double ph = kx * x[0] + ky * x[1];
    const double re = c.real() * std::cos(ph) - c.imag() * std::sin(ph);
    const double im = c.real() * std::sin(ph) + c.imag() * std::cos(ph);
    v += damp * re;
    gx -= damp * kx * im;
    gy -= damp * ky * im;
    hxx -= damp * kx * kx * re;
    hxy -= damp * kx * ky * re;
    hyy -= damp * ky * ky * re;
  };
  double norm;
  if (domain.dim() == 1) {
    for (int m = 0; m < half; ++m)
      accumulate(w * m, 0.0, (m == 0 || m == n / 2) ? 1.0 : 2.0, coeffs[m]);
    norm = n;
  } else {
    for (int i = 0; i < n; ++i) {
      const int mi = i <= n / 2 ? i : i - n;
      for (int j = 0; j < half; ++j)
        accumulate(w * mi, w * j, (j == 0 || j == n / 2) ? 1.0 : 2.0,
                   coeffs[static_cast<std::size_t>(i) * half + j]);
    }
    norm = static_cast<double>(n) * n;
  }
  v /= norm;
  if (!(v > 0.0)) fail(ErrorKind::degenerate_density, "tabulated flow density is not positive");
  FlowEval out;
  out.log_density = std::log(v);
  out.score = {gx / norm / v, gy / norm / v};
  out.log_hessian = {hxx / norm / v - out.score[0] * out.score[0],
                     hxy / norm / v - out.score[0] * out.score[1],
                     hyy / norm / v - out.score[1] * out.score[1]};
  return out;
}

}  // namespace

TargetDistribution::TargetDistribution(TorusDomain domain, Variant v)
    : domain_(domain), variant_(std::move(v)) {}

TargetDistribution TargetDistribution::mixture(const TorusDomain& domain,
                                               std::vector<double> weights,
                                               std::vector<TorusPoint> means,
                                               std::vector<double> variances) {
  if (weights.empty() || weights.size() != means.size() || weights.size() != variances.size())
    fail(ErrorKind::invalid_input, "mixture needs matching nonempty weights, means, variances");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) fail(ErrorKind::invalid_input, "mixture weights must be nonnegative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-12) fail(ErrorKind::invalid_input, "mixture weights must sum to 1");
  for (double v : variances)
    if (!(v > 0.0)) fail(ErrorKind::invalid_input, "mixture variances must be positive");
  for (auto& m : means) m = wrap(domain, m.coords);
  return TargetDistribution(domain, WrappedGaussianMixture{std::move(weights), std::move(means),
                                                           std::move(variances)});
}

TargetDistribution TargetDistribution::empirical(const TorusDomain& domain,
                                                 std::vector<TorusPoint> points) {
  if (points.empty()) fail(ErrorKind::invalid_input, "empirical measure needs points");
  for (auto& p : points) p = wrap(domain, p.coords);
  return TargetDistribution(domain, Empirical{std::move(points)});
}

TargetDistribution TargetDistribution::uniform(const TorusDomain& domain) {
  return TargetDistribution(domain, Uniform{});
}

TargetDistribution TargetDistribution::tabulated(GridDensity density) {
  const TorusDomain domain = density.domain();
  std::vector<double> cdf(density.size());
  double acc = 0.0;
  for (std::size_t k = 0; k < density.size(); ++k) cdf[k] = (acc += density[k]);
  for (auto& c : cdf) c /= acc;
  TargetDistribution out(domain, GridTabulated{std::make_shared<const GridDensity>(std::move(density))});
  out.cdf_ = std::make_shared<const std::vector<double>>(std::move(cdf));
  return out;
}

const char* TargetDistribution::kind_name() const noexcept {
  switch (variant_.index()) {
    case 0: return "wrapped-gaussian-mixture";
    case 1: return "empirical";
    case 2: return "uniform";
    default: return "grid-tabulated";
  }
}

TorusPoint TargetDistribution::draw(StreamRng& rng) const {
  const double R = domain_.radius();
  const int d = domain_.dim();
  std::normal_distribution<double> normal;
  return std::visit(
      [&](const auto& v) -> TorusPoint {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, WrappedGaussianMixture>) {
          const double u = rng.uniform();
          std::size_t c = 0;
          double acc = v.weights[0];
          while (u >= acc && c + 1 < v.weights.size()) acc += v.weights[++c];
          const double sd = std::sqrt(v.variances[c]);
          Vec raw = v.means[c].coords;
          for (int i = 0; i < d; ++i) raw[i] += sd * normal(rng);
          return wrap(domain_, raw);
        } else if constexpr (std::is_same_v<T, Empirical>) {
          const auto idx = static_cast<std::size_t>(rng.uniform() * v.points.size());
          return v.points[std::min(idx, v.points.size() - 1)];
        } else if constexpr (std::is_same_v<T, Uniform>) {
          Vec raw{0.0, 0.0};
          for (int i = 0; i < d; ++i) raw[i] = R * rng.uniform();
          return wrap(domain_, raw);
        } else {
          const auto& cdf = *cdf_;
          const auto k = static_cast<std::size_t>(
              std::lower_bound(cdf.begin(), cdf.end(), rng.uniform()) - cdf.begin());
          const auto node = v.density->function().node(std::min(k, cdf.size() - 1));
          const double h = v.density->function().spacing();
          Vec raw = node.coords;
          for (int i = 0; i < d; ++i) raw[i] += h * (rng.uniform() - 0.5);
          return wrap(domain_, raw);
        }
      },
      variant_);
}

std::vector<TorusPoint> TargetDistribution::sample(std::size_t count, std::uint64_t seed) const {
  std::vector<TorusPoint> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    StreamRng rng(seed, i);
    out.push_back(draw(rng));
  }
  return out;
}

HeatFlowLaw::HeatFlowLaw(TargetDistribution base, double time_offset)
    : base_(std::move(base)), offset_(time_offset) {
  if (!(time_offset >= 0.0)) fail(ErrorKind::invalid_input, "flow time offset must be >= 0");
  if (const auto* tab = std::get_if<GridTabulated>(&base_.variant())) {
    spectral_ = std::make_shared<const Spectral>(tab->density->domain(), tab->density->grid());
    coeffs_ = std::make_shared<const Spectral::Coeffs>(spectral_->forward(tab->density->values()));
  }
}

FlowEval HeatFlowLaw::evaluate(double s, const TorusPoint& x) const {
  if (!(s >= 0.0)) fail(ErrorKind::invalid_input, "flow time must be >= 0");
  const double tau = s + offset_;
  const TorusDomain& dom = domain();
  return std::visit(
      [&](const auto& v) -> FlowEval {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, WrappedGaussianMixture>) {
          std::vector<Component> comps;
          for (std::size_t c = 0; c < v.weights.size(); ++c) {
            if (v.weights[c] <= 0.0) continue;
            comps.push_back({std::log(v.weights[c]), v.means[c], 0.5 * v.variances[c] + tau});
          }
          return evaluate_components(dom, comps, x);
        } else if constexpr (std::is_same_v<T, Empirical>) {
          if (tau == 0.0) fail(ErrorKind::no_density, "empirical measure has no density at s = 0");
          std::vector<Component> comps;
          const double lw = -std::log(static_cast<double>(v.points.size()));
          for (const auto& p : v.points) comps.push_back({lw, p, tau});
          return evaluate_components(dom, comps, x);
        } else if constexpr (std::is_same_v<T, Uniform>) {
          return FlowEval{-std::log(dom.volume()), {0.0, 0.0}, {}};
        } else {
          return evaluate_spectral(*spectral_, *coeffs_, tau, x);
        }
      },
      base_.variant());
}

double HeatFlowLaw::density(double s, const TorusPoint& x) const {
  return std::exp(evaluate(s, x).log_density);
}

Vec HeatFlowLaw::score(double s, const TorusPoint& x) const { return evaluate(s, x).score; }

GridDensity HeatFlowLaw::on_grid(double s, const GridSpec& grid) const {
  const double tau = s + offset_;
  const TorusDomain& dom = domain();
  if (const auto* tab = std::get_if<GridTabulated>(&base_.variant())) {
    if (tab->density->grid() == grid) return convolve_heat(*tab->density, tau, *spectral_);
  }
  if (base_.is_uniform()) return GridDensity::uniform(dom, grid);
  if (const auto* emp = std::get_if<Empirical>(&base_.variant())) {
    std::vector<double> w(emp->points.size(), 1.0 / emp->points.size());
    return convolve_heat(emp->points, w, dom, grid, tau);
  }
  auto f = GridFunction::tabulate(dom, grid, [&](const TorusPoint& x) { return density(s, x); });
  return GridDensity::normalized(std::move(f));
}

double flow_density(const TargetDistribution& dist, double s, const TorusPoint& x) {
  return HeatFlowLaw(dist).density(s, x);
}

Vec flow_score(const TargetDistribution& dist, double s, const TorusPoint& x) {
  return HeatFlowLaw(dist).score(s, x);
}

GridSpec mollify_grid(const TorusDomain& domain, double epsilon) {
  const double target_h = std::sqrt(2.0 * epsilon) / 8.0;
  int n = 8;
  const int lo = domain.dim() == 1 ? 256 : 64;
  const int hi = domain.dim() == 1 ? 8192 : 512;
  while (n < hi && domain.radius() / n > target_h) n *= 2;
  return GridSpec(std::clamp(n, lo, hi));
}

MollifiedEmpirical mollify(const TargetDistribution& sample, double epsilon) {
  return mollify(sample, epsilon, mollify_grid(sample.domain(), epsilon));
}

MollifiedEmpirical mollify(const TargetDistribution& sample, double epsilon, const GridSpec& grid) {
  if (!(epsilon > 0.0)) fail(ErrorKind::invalid_input, "mollification needs eps > 0");
  const auto* emp = std::get_if<Empirical>(&sample.variant());
  if (!emp) fail(ErrorKind::invalid_input, "mollify expects an empirical measure");
  HeatFlowLaw flow(sample, epsilon);
  // delta is the minimum over the grid and its one-step refinement.
  GridDensity coarse = flow.on_grid(0.0, grid);
  GridDensity fine = flow.on_grid(0.0, GridSpec(grid.n() * 2));
  const double dc = *std::min_element(coarse.values().begin(), coarse.values().end());
  const double df = *std::min_element(fine.values().begin(), fine.values().end());
  const bool fine_wins = df <= dc;
  return MollifiedEmpirical{*emp,  epsilon, std::move(flow), std::move(fine),
                            std::min(dc, df), fine_wins ? grid.n() * 2 : grid.n()};
}

double entropy(const GridDensity& m) {
  double sum = 0.0;
  for (double v : m.values())
    if (v > 0.0) sum += v * std::log(v);
  return sum * m.function().cell_volume();
}

}  // namespace tsgm
