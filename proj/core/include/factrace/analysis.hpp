#pragma once

#include <optional>
#include <span>
#include <vector>

#include "factrace/tracing.hpp"

namespace factrace {

struct LayerProfile {
  HookKind kind = HookKind::hidden;
  std::vector<double> values;  // normalised AIE' per layer, all >= 0

  std::size_t num_layers() const { return values.size(); }
};

// Per-layer AIE at `role`, negatives clamped to 0, divided by the max.
LayerProfile layer_profile(const TraceGrid& grid, HookKind kind, TokenRole role);
LayerProfile normalize_profile(HookKind kind, std::span<const double> raw);

// sum_i sum_j |x_i - x_j| / (2 L sum_i x_i); 0 when the sum is 0.
double gini(std::span<const double> values);
inline double gini(const LayerProfile& p) { return gini(p.values); }

// argmax, lowest index on ties.
std::size_t peak_layer(std::span<const double> values);
inline std::size_t peak_layer(const LayerProfile& p) { return peak_layer(p.values); }

// (baseline - severed) / baseline * 100; nullopt when baseline <= 0.
std::optional<double> drop_rate(double baseline_aie, double severed_aie);

struct DropReport {
  HookKind kind = HookKind::mlp_out;
  int peak_layer = 0;
  double gini = 0.0;
  double baseline_aie = 0.0;
  double severed_aie = 0.0;
  std::optional<double> drop_rate;
};

// Severs the peak layer of `profile` at the last subject token and compares
// against the same restoration without severing.
DropReport peak_drop_report(const ModelBundle& bundle, const std::vector<PromptCase>& cases,
                            const NoiseScale& noise, const LayerProfile& profile,
                            std::size_t samples, std::uint64_t seed, unsigned threads = 1);

}  // namespace factrace
