#include "factrace/analysis.hpp"

#include <algorithm>
#include <cmath>

#include "factrace/error.hpp"
#include "factrace/parallel.hpp"

namespace factrace {

LayerProfile normalize_profile(HookKind kind, std::span<const double> raw) {
  LayerProfile p;
  p.kind = kind;
  p.values.reserve(raw.size());
  for (double v : raw) p.values.push_back(std::max(0.0, v));
  const double mx = p.values.empty() ? 0.0 : *std::max_element(p.values.begin(), p.values.end());
  if (mx > 0.0) {
    for (auto& v : p.values) v /= mx;
  }
  return p;
}

LayerProfile layer_profile(const TraceGrid& grid, HookKind kind, TokenRole role) {
  std::vector<double> raw;
  for (int l = 0; l < grid.num_layers; ++l) {
    if (!grid.has(role, l, kind)) {
      throw Error(ErrorKind::SiteOutOfRange, "grid lacks kind " + std::string(to_string(kind)) + " at " +
                                                 std::string(to_string(role)));
    }
    raw.push_back(grid.at(role, l, kind).aie);
  }
  return normalize_profile(kind, raw);
}

double gini(std::span<const double> values) {
  const std::size_t L = values.size();
  if (L == 0) return 0.0;
  double total = 0.0;
  for (double v : values) total += v;
  if (total == 0.0) return 0.0;
  // sum_i sum_j |x_i - x_j| = 2 sum_k (2k - L + 1) x_(k) over ascending order,
  // folded into differences of mirrored order statistics so that equal
  // values contribute exactly zero.
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  double weighted = 0.0;
  for (std::size_t k = 0; k < L / 2; ++k) {
    weighted += static_cast<double>(L - 1 - 2 * k) * (sorted[L - 1 - k] - sorted[k]);
  }
  return (2.0 * weighted) / (2.0 * static_cast<double>(L) * total);
}

std::size_t peak_layer(std::span<const double> values) {
  if (values.empty()) throw Error(ErrorKind::InvalidArgument, "peak_layer of an empty profile");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

std::optional<double> drop_rate(double baseline_aie, double severed_aie) {
  if (!(baseline_aie > 0.0)) return std::nullopt;
  return (baseline_aie - severed_aie) / baseline_aie * 100.0;
}

DropReport peak_drop_report(const ModelBundle& bundle, const std::vector<PromptCase>& cases, const NoiseScale& noise,
                            const LayerProfile& profile, std::size_t samples, std::uint64_t seed, unsigned threads) {
  if (profile.kind != HookKind::attn_out && profile.kind != HookKind::mlp_out) {
    throw Error(ErrorKind::InvalidArgument, "drop report needs an attn_out or mlp_out profile");
  }
  if (static_cast<int>(profile.num_layers()) != bundle.config.num_layers) {
    throw Error(ErrorKind::InvalidArgument, "profile length does not match the model's layer count");
  }
  if (cases.empty()) throw Error(ErrorKind::EmptyDataset, "drop report needs at least one case");
  DropReport report;
  report.kind = profile.kind;
  report.gini = gini(profile);
  report.peak_layer = static_cast<int>(peak_layer(profile));

  std::vector<double> base(cases.size()), severed(cases.size());
  parallel_for(cases.size(), threads, [&](std::size_t c) {
    const auto& pc = cases[c];
    const auto probes = run_probes(bundle, pc, noise, samples, case_seed(seed, pc));
    // clean input of the peak layer at the last subject token
    const auto site = report.peak_layer == 0 ? HookSite::embed(pc.subject_span.last)
                                             : HookSite::at(HookKind::hidden, report.peak_layer - 1,
                                                            pc.subject_span.last);
    SeverSpec spec;
    spec.target_kind = profile.kind;
    spec.severed_layers = {report.peak_layer};
    base[c] = restoration_ie(probes, bundle, pc, site);
    severed[c] = severing_ie(probes, bundle, pc, site, spec);
  });
  for (std::size_t c = 0; c < cases.size(); ++c) {
    report.baseline_aie += base[c];
    report.severed_aie += severed[c];
  }
  report.baseline_aie /= static_cast<double>(cases.size());
  report.severed_aie /= static_cast<double>(cases.size());
  report.drop_rate = drop_rate(report.baseline_aie, report.severed_aie);
  return report;
}

}  // namespace factrace
