#include "factrace/tracing.hpp"

#include <algorithm>
#include <functional>

#include "factrace/error.hpp"
#include "factrace/noise.hpp"
#include "factrace/parallel.hpp"
#include "factrace/report.hpp"

namespace factrace {

namespace {

ForwardOptions last_only() {
  ForwardOptions o;
  o.last_logits_only = true;
  return o;
}

double object_prob(const ForwardResult& run, const PromptCase& pc) {
  return next_token_distribution(run, pc.last_position())[pc.object_token()];
}

void check_site(const ModelBundle& bundle, const PromptCase& pc, const HookSite& site) {
  if (site.position >= pc.tokens.size()) {
    throw Error(ErrorKind::SiteOutOfRange, "site position " + std::to_string(site.position) +
                                               " beyond prompt length " + std::to_string(pc.tokens.size()));
  }
  if (site.kind != HookKind::embed && (site.layer < 0 || site.layer >= bundle.config.num_layers)) {
    throw Error(ErrorKind::SiteOutOfRange, "site layer " + std::to_string(site.layer) + " out of range");
  }
}

// Shared body of restoration and severing: per noise sample, corrupt the
// subject, restore clean values at `restore`, add `extra(sample)` and
// average the object probability. Returns mean(restored) - P*.
double patched_ie(const RunProbes& probes, const ModelBundle& bundle, const PromptCase& pc,
                  const std::vector<HookSite>& restore,
                  const std::function<void(std::size_t, std::vector<Intervention>&)>& extra) {
  std::set<std::size_t> clean_positions;
  for (const auto& s : restore) {
    check_site(bundle, pc, s);
    if (s.kind == HookKind::embed) clean_positions.insert(s.position);
  }
  double total = 0.0;
  for (std::size_t s = 0; s < probes.samples(); ++s) {
    auto ivs = corruption_interventions(pc, probes.nu, probes.sample_seeds[s], clean_positions);
    for (const auto& site : restore) {
      ivs.push_back({site, Restore{probes.recorded_clean.at(site)}});
    }
    if (extra) extra(s, ivs);
    total += object_prob(forward(bundle, pc.tokens, ivs, {}, last_only()), pc);
  }
  return total / static_cast<double>(probes.samples()) - probes.corrupted_prob;
}

std::vector<HookSite> expand_window(const ModelBundle& bundle, const HookSite& site, std::size_t window) {
  if (window == 0) throw Error(ErrorKind::InvalidArgument, "restoration window must be >= 1");
  if (site.kind != HookKind::attn_out && site.kind != HookKind::mlp_out) return {site};
  if (site.layer < 0 || site.layer >= bundle.config.num_layers) {
    throw Error(ErrorKind::SiteOutOfRange, "site layer " + std::to_string(site.layer) + " out of range");
  }
  std::vector<HookSite> out;
  for (int l : window_layers(site.layer, window, bundle.config.num_layers)) {
    out.push_back(HookSite::at(site.kind, l, site.position));
  }
  return out;
}

}  // namespace

std::vector<Intervention> corruption_interventions(const PromptCase& pc, float nu, std::uint64_t sample_seed,
                                                   const std::set<std::size_t>& clean_positions) {
  std::vector<Intervention> out;
  for (std::size_t p = pc.subject_span.first; p <= pc.subject_span.last; ++p) {
    if (clean_positions.contains(p)) continue;
    out.push_back({HookSite::embed(p), AddNoise{nu, sample_seed}});
  }
  return out;
}

std::vector<int> window_layers(int layer, std::size_t window, int num_layers) {
  const int w = static_cast<int>(window);
  const int lo = std::max(0, layer - w / 2);
  const int hi = std::min(num_layers, layer + (w + 1) / 2);
  std::vector<int> out;
  for (int l = lo; l < hi; ++l) out.push_back(l);
  return out;
}

std::uint64_t case_seed(std::uint64_t base_seed, const PromptCase& pc) {
  const std::string identity = pc.triple.case_id + '\x1f' + pc.prompt_text;
  return splitmix64(splitmix64(base_seed) ^ fnv1a(identity));
}

RunProbes run_probes(const ModelBundle& bundle, const PromptCase& pc, const NoiseScale& noise, std::size_t samples,
                     std::uint64_t seed) {
  if (samples == 0) throw Error(ErrorKind::InvalidArgument, "run_probes requires samples >= 1");
  std::vector<std::uint64_t> seeds;
  for (std::size_t s = 0; s < samples; ++s) seeds.push_back(sample_seed(seed, s));
  return run_probes(bundle, pc, noise, seeds);
}

RunProbes run_probes(const ModelBundle& bundle, const PromptCase& pc, const NoiseScale& noise,
                     const std::vector<std::uint64_t>& sample_seeds) {
  if (sample_seeds.empty()) throw Error(ErrorKind::InvalidArgument, "run_probes requires samples >= 1");
  ForwardOptions opts = last_only();
  opts.record_all = true;
  RunProbes probes;
  probes.nu = static_cast<float>(noise.nu);
  probes.sample_seeds = sample_seeds;

  auto clean = forward(bundle, pc.tokens, {}, {}, opts);
  probes.clean_prob = object_prob(clean, pc);
  probes.recorded_clean = std::move(clean.recorded);

  double total = 0.0;
  for (auto seed : sample_seeds) {
    auto run = forward(bundle, pc.tokens, corruption_interventions(pc, probes.nu, seed), {}, opts);
    const double p = object_prob(run, pc);
    probes.corrupted_sample_probs.push_back(p);
    total += p;
    probes.recorded_corrupted.push_back(std::move(run.recorded));
  }
  probes.corrupted_prob = total / static_cast<double>(sample_seeds.size());
  return probes;
}

double restoration_ie(const RunProbes& probes, const ModelBundle& bundle, const PromptCase& pc, const HookSite& site,
                      std::size_t window) {
  check_site(bundle, pc, site);
  return patched_ie(probes, bundle, pc, expand_window(bundle, site, window), {});
}

double restoration_ie_multi(const RunProbes& probes, const ModelBundle& bundle, const PromptCase& pc,
                            const std::vector<HookSite>& sites) {
  return patched_ie(probes, bundle, pc, sites, {});
}

double severing_ie(const RunProbes& probes, const ModelBundle& bundle, const PromptCase& pc,
                   const HookSite& restore_site, const SeverSpec& sever, std::size_t window) {
  check_site(bundle, pc, restore_site);
  if (sever.target_kind != HookKind::attn_out && sever.target_kind != HookKind::mlp_out) {
    throw Error(ErrorKind::InvalidArgument, "sever target must be attn_out or mlp_out");
  }
  for (int l : sever.severed_layers) {
    if (l < 0 || l >= bundle.config.num_layers) {
      throw Error(ErrorKind::SiteOutOfRange, "severed layer " + std::to_string(l) + " out of range");
    }
  }
  std::vector<std::size_t> positions;
  if (sever.full_row) {
    for (std::size_t p = 0; p < pc.tokens.size(); ++p) positions.push_back(p);
  } else {
    positions.push_back(sever.position.value_or(pc.subject_span.last));
    if (positions.front() >= pc.tokens.size()) {
      throw Error(ErrorKind::SiteOutOfRange, "sever position beyond prompt length");
    }
  }
  auto pin = [&](std::size_t sample, std::vector<Intervention>& ivs) {
    for (int l : sever.severed_layers) {
      for (auto p : positions) {
        const auto site = HookSite::at(sever.target_kind, l, p);
        ivs.push_back({site, ReplaceWith{probes.recorded_corrupted[sample].at(site)}});
      }
    }
  };
  return patched_ie(probes, bundle, pc, expand_window(bundle, restore_site, window), pin);
}

// ---------------------------------------------------------------------------
// Grids

std::string_view to_string(TokenRole r) {
  switch (r) {
    case TokenRole::first_subject: return "first_subject";
    case TokenRole::middle_subject: return "middle_subject";
    case TokenRole::last_subject: return "last_subject";
    case TokenRole::first_subsequent: return "first_subsequent";
    case TokenRole::further: return "further";
    case TokenRole::last: return "last";
  }
  return "?";
}

TokenRole parse_token_role(std::string_view s) {
  for (auto r : kAllRoles) {
    if (to_string(r) == s) return r;
  }
  throw Error(ErrorKind::InvalidArgument, "unknown token role '" + std::string(s) + "'");
}

std::vector<std::size_t> role_positions(const PromptCase& pc, TokenRole role) {
  const std::size_t first = pc.subject_span.first, last = pc.subject_span.last;
  const std::size_t end = pc.tokens.size() - 1;
  std::vector<std::size_t> out;
  switch (role) {
    case TokenRole::first_subject: out.push_back(first); break;
    case TokenRole::middle_subject:
      for (std::size_t p = first + 1; p < last; ++p) out.push_back(p);
      break;
    case TokenRole::last_subject: out.push_back(last); break;
    case TokenRole::first_subsequent:
      if (last + 1 < end) out.push_back(last + 1);
      break;
    case TokenRole::further:
      for (std::size_t p = 0; p < end; ++p) {
        if (!pc.subject_span.contains(p) && p != last + 1) out.push_back(p);
      }
      break;
    case TokenRole::last: out.push_back(end); break;
  }
  return out;
}

const GridCell& TraceGrid::at(TokenRole role, int layer, HookKind kind) const {
  auto it = cells.find({role, layer, kind});
  if (it == cells.end()) {
    throw Error(ErrorKind::SiteOutOfRange, "grid has no cell (" + std::string(to_string(role)) + ", " +
                                               std::to_string(layer) + ", " + std::string(to_string(kind)) + ")");
  }
  return it->second;
}

bool TraceGrid::has(TokenRole role, int layer, HookKind kind) const { return cells.contains({role, layer, kind}); }

double CaseTrace::at(HookKind kind, std::size_t position, int layer) const {
  const auto k = static_cast<std::size_t>(std::find(kinds.begin(), kinds.end(), kind) - kinds.begin());
  if (k == kinds.size() || position >= num_positions || layer < 0 || layer >= num_layers) {
    throw Error(ErrorKind::SiteOutOfRange, "case trace has no such cell");
  }
  return ie[(k * num_positions + position) * num_layers + layer];
}

CaseTrace trace_case(const ModelBundle& bundle, const PromptCase& pc, const RunProbes& probes,
                     const TraceOptions& options) {
  CaseTrace ct;
  ct.num_positions = pc.tokens.size();
  ct.num_layers = bundle.config.num_layers;
  ct.kinds = options.kinds;
  const std::size_t L = ct.num_layers, T = ct.num_positions;
  ct.ie.assign(ct.kinds.size() * T * L, 0.0);
  for (auto k : ct.kinds) {
    if (k == HookKind::embed) throw Error(ErrorKind::InvalidArgument, "grid kinds must be hidden/attn_out/mlp_out");
  }
  parallel_for(ct.ie.size(), options.threads, [&](std::size_t cell) {
    const std::size_t layer = cell % L;
    const std::size_t pos = (cell / L) % T;
    const std::size_t k = cell / (L * T);
    const auto site = HookSite::at(ct.kinds[k], static_cast<int>(layer), pos);
    ct.ie[cell] = restoration_ie(probes, bundle, pc, site, options.window);
  });
  return ct;
}

TraceGrid trace_grid(const ModelBundle& bundle, const std::vector<PromptCase>& cases, const NoiseScale& noise,
                     const TraceOptions& options) {
  if (cases.empty()) throw Error(ErrorKind::EmptyDataset, "trace_grid needs at least one case");
  TraceGrid grid;
  grid.kinds = options.kinds;
  grid.num_layers = bundle.config.num_layers;
  grid.num_prompts = cases.size();
  grid.window = options.window;
  grid.noise_samples = options.samples;
  grid.seed = options.seed;
  grid.nu = noise.nu;

  std::map<std::tuple<TokenRole, int, HookKind>, double> sums;
  for (const auto& pc : cases) {
    const auto probes = run_probes(bundle, pc, noise, options.samples, case_seed(options.seed, pc));
    const auto ct = trace_case(bundle, pc, probes, options);
    for (auto role : kAllRoles) {
      const auto positions = role_positions(pc, role);
      if (positions.empty()) continue;
      for (auto kind : grid.kinds) {
        for (int l = 0; l < grid.num_layers; ++l) {
          double v = 0.0;
          for (auto p : positions) v += ct.at(kind, p, l);
          v /= static_cast<double>(positions.size());
          sums[{role, l, kind}] += v;
          grid.cells[{role, l, kind}].support += 1;
        }
      }
    }
  }
  for (auto& [key, cell] : grid.cells) cell.aie = sums[key] / static_cast<double>(cell.support);
  return grid;
}

// ---------------------------------------------------------------------------
// Severing curves

std::string_view to_string(SeverScope s) {
  switch (s) {
    case SeverScope::all_layers: return "all";
    case SeverScope::at_layer: return "at-layer";
    case SeverScope::none: return "none";
    case SeverScope::fixed: return "fixed";
  }
  return "?";
}

SeverScope parse_sever_scope(std::string_view s) {
  if (s == "all") return SeverScope::all_layers;
  if (s == "at-layer") return SeverScope::at_layer;
  if (s == "none") return SeverScope::none;
  if (s == "fixed") return SeverScope::fixed;
  throw Error(ErrorKind::InvalidArgument, "unknown sever scope '" + std::string(s) + "'");
}

SeverCurve severing_curve(const ModelBundle& bundle, const std::vector<PromptCase>& cases, const NoiseScale& noise,
                          const SeverCurveOptions& options) {
  const int L = bundle.config.num_layers;
  for (int l : options.layers) {
    if (l < 0 || l >= L) throw Error(ErrorKind::SiteOutOfRange, "curve layer " + std::to_string(l) + " out of range");
  }
  SeverCurve curve{options.target_kind, options.layers, std::vector<double>(options.layers.size(), 0.0)};
  if (options.layers.empty()) return curve;
  if (cases.empty()) throw Error(ErrorKind::EmptyDataset, "severing_curve needs at least one case");

  std::vector<double> per_case(cases.size() * options.layers.size());
  for (std::size_t c = 0; c < cases.size(); ++c) {
    const auto& pc = cases[c];
    const auto probes = run_probes(bundle, pc, noise, options.samples, case_seed(options.seed, pc));
    parallel_for(options.layers.size(), options.threads, [&](std::size_t i) {
      const int l = options.layers[i];
      SeverSpec spec;
      spec.target_kind = options.target_kind;
      spec.full_row = options.full_row;
      switch (options.scope) {
        case SeverScope::all_layers:
          for (int x = 0; x < L; ++x) spec.severed_layers.insert(x);
          break;
        case SeverScope::at_layer: spec.severed_layers.insert(l); break;
        case SeverScope::none: break;
        case SeverScope::fixed: spec.severed_layers = options.fixed_layers; break;
      }
      const auto site = HookSite::at(options.restore_kind, l, pc.subject_span.last);
      per_case[c * options.layers.size() + i] = severing_ie(probes, bundle, pc, site, spec);
    });
  }
  for (std::size_t i = 0; i < options.layers.size(); ++i) {
    double sum = 0.0;
    for (std::size_t c = 0; c < cases.size(); ++c) sum += per_case[c * options.layers.size() + i];
    curve.aie[i] = sum / static_cast<double>(cases.size());
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Knockout

std::string_view to_string(KnockoutTarget t) {
  switch (t) {
    case KnockoutTarget::attn_out: return "attn_out";
    case KnockoutTarget::mlp_out: return "mlp_out";
    case KnockoutTarget::both: return "both";
  }
  return "?";
}

KnockoutTarget parse_knockout_target(std::string_view s) {
  if (s == "attn_out" || s == "attn") return KnockoutTarget::attn_out;
  if (s == "mlp_out" || s == "mlp") return KnockoutTarget::mlp_out;
  if (s == "both") return KnockoutTarget::both;
  throw Error(ErrorKind::InvalidArgument, "unknown knockout target '" + std::string(s) + "'");
}

std::vector<int> knockout_layers(const KnockoutSpec& spec, int num_layers) {
  if (spec.width < 1) throw Error(ErrorKind::InvalidArgument, "knockout width must be >= 1");
  if (spec.start_layer < 0 || spec.start_layer >= num_layers) {
    throw Error(ErrorKind::SiteOutOfRange, "knockout start layer " + std::to_string(spec.start_layer) + " out of range");
  }
  std::vector<int> out;
  for (int l = spec.start_layer; l <= std::min(spec.start_layer + spec.width - 1, num_layers - 1); ++l) out.push_back(l);
  return out;
}

std::vector<Intervention> knockout_interventions(const KnockoutSpec& spec, int num_layers, std::size_t position) {
  std::vector<Intervention> out;
  for (int l : knockout_layers(spec, num_layers)) {
    if (spec.target != KnockoutTarget::mlp_out) out.push_back({HookSite::at(HookKind::attn_out, l, position), Zero{}});
    if (spec.target != KnockoutTarget::attn_out) out.push_back({HookSite::at(HookKind::mlp_out, l, position), Zero{}});
  }
  return out;
}

std::vector<TokenId> knockout_topk(const ModelBundle& bundle, const PromptCase& pc, const KnockoutSpec& spec,
                                   std::size_t k) {
  if (k == 0) throw Error(ErrorKind::InvalidArgument, "k must be >= 1");
  const auto ivs = knockout_interventions(spec, bundle.config.num_layers, pc.subject_span.last);
  const auto run = forward(bundle, pc.tokens, ivs, {}, last_only());
  return top_k_tokens(next_token_distribution(run, pc.last_position()), k);
}

std::vector<TokenId> clean_topk(const ModelBundle& bundle, const PromptCase& pc, std::size_t k) {
  if (k == 0) throw Error(ErrorKind::InvalidArgument, "k must be >= 1");
  const auto run = forward(bundle, pc.tokens, {}, {}, last_only());
  return top_k_tokens(next_token_distribution(run, pc.last_position()), k);
}

}  // namespace factrace
