#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "factrace/dataset.hpp"
#include "factrace/model.hpp"

namespace factrace {

// Clean run recorded once plus one recorded corrupted run per noise sample.
struct RunProbes {
  double clean_prob = 0.0;
  double corrupted_prob = 0.0;  // mean over samples
  std::vector<std::uint64_t> sample_seeds;
  std::vector<double> corrupted_sample_probs;
  float nu = 0.0f;
  std::map<HookSite, std::vector<float>> recorded_clean;
  std::vector<std::map<HookSite, std::vector<float>>> recorded_corrupted;

  std::size_t samples() const { return sample_seeds.size(); }
};

RunProbes run_probes(const ModelBundle& bundle, const PromptCase& pc, const NoiseScale& noise,
                     std::size_t samples, std::uint64_t seed);
RunProbes run_probes(const ModelBundle& bundle, const PromptCase& pc, const NoiseScale& noise,
                     const std::vector<std::uint64_t>& sample_seeds);

// Noise interventions of one corrupted sample, skipping `clean_positions`.
std::vector<Intervention> corruption_interventions(const PromptCase& pc, float nu,
                                                   std::uint64_t sample_seed,
                                                   const std::set<std::size_t>& clean_positions = {});

// Layers restored for a module-kind site with the given window (centred,
// clipped to 0..L-1). Hidden and embed sites restore a single site.
std::vector<int> window_layers(int layer, std::size_t window, int num_layers);

double restoration_ie(const RunProbes& probes, const ModelBundle& bundle, const PromptCase& pc,
                      const HookSite& site, std::size_t window = 1);

// Same as restoration_ie but restoring an explicit set of sites at once.
double restoration_ie_multi(const RunProbes& probes, const ModelBundle& bundle,
                            const PromptCase& pc, const std::vector<HookSite>& sites);

struct SeverSpec {
  HookKind target_kind = HookKind::mlp_out;
  std::set<int> severed_layers;
  std::optional<std::size_t> position;  // default: last subject token
  bool full_row = false;                // pin every position instead
};

double severing_ie(const RunProbes& probes, const ModelBundle& bundle, const PromptCase& pc,
                   const HookSite& restore_site, const SeverSpec& sever, std::size_t window = 1);

// ---------------------------------------------------------------------------
// Grids

// Token roles used to align prompts of different lengths.
enum class TokenRole : std::uint8_t {
  first_subject,
  middle_subject,
  last_subject,
  first_subsequent,
  further,
  last,
};
inline constexpr std::array<TokenRole, 6> kAllRoles = {
    TokenRole::first_subject, TokenRole::middle_subject, TokenRole::last_subject,
    TokenRole::first_subsequent, TokenRole::further, TokenRole::last};

std::string_view to_string(TokenRole r);
TokenRole parse_token_role(std::string_view s);
// Positions of `pc` that fall in the role (possibly empty).
std::vector<std::size_t> role_positions(const PromptCase& pc, TokenRole role);

struct GridCell {
  double aie = 0.0;
  std::size_t support = 0;  // prompts contributing
};

struct TraceGrid {
  std::vector<HookKind> kinds;
  int num_layers = 0;
  std::size_t num_prompts = 0;
  std::size_t window = 1;
  std::size_t noise_samples = 0;
  std::uint64_t seed = 0;
  double nu = 0.0;
  std::map<std::tuple<TokenRole, int, HookKind>, GridCell> cells;

  const GridCell& at(TokenRole role, int layer, HookKind kind) const;
  bool has(TokenRole role, int layer, HookKind kind) const;
};

// Per-prompt IE for every (position, layer, kind).
struct CaseTrace {
  std::size_t num_positions = 0;
  int num_layers = 0;
  std::vector<HookKind> kinds;
  std::vector<double> ie;  // [kind][position][layer]

  double at(HookKind kind, std::size_t position, int layer) const;
};

struct TraceOptions {
  std::vector<HookKind> kinds = {HookKind::hidden, HookKind::attn_out, HookKind::mlp_out};
  std::size_t window = 1;
  std::size_t samples = 10;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

CaseTrace trace_case(const ModelBundle& bundle, const PromptCase& pc, const RunProbes& probes,
                     const TraceOptions& options);

TraceGrid trace_grid(const ModelBundle& bundle, const std::vector<PromptCase>& cases,
                     const NoiseScale& noise, const TraceOptions& options);

// Base noise seed of one case: a function of the run seed and the case's
// identity (id + prompt), so a case gets the same noise wherever it appears.
std::uint64_t case_seed(std::uint64_t base_seed, const PromptCase& pc);

// ---------------------------------------------------------------------------
// Severing curves

enum class SeverScope { all_layers, at_layer, none, fixed };

std::string_view to_string(SeverScope s);
SeverScope parse_sever_scope(std::string_view s);

struct SeverCurveOptions {
  HookKind target_kind = HookKind::mlp_out;
  std::vector<int> layers;                     // curve points
  HookKind restore_kind = HookKind::hidden;    // restored site kind at layer l
  SeverScope scope = SeverScope::all_layers;
  std::set<int> fixed_layers;                  // scope == fixed
  bool full_row = false;
  std::size_t samples = 10;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

struct SeverCurve {
  HookKind target_kind;
  std::vector<int> layers;
  std::vector<double> aie;
};

SeverCurve severing_curve(const ModelBundle& bundle, const std::vector<PromptCase>& cases,
                          const NoiseScale& noise, const SeverCurveOptions& options);

// ---------------------------------------------------------------------------
// Knockout

enum class KnockoutTarget { attn_out, mlp_out, both };

std::string_view to_string(KnockoutTarget t);
KnockoutTarget parse_knockout_target(std::string_view s);

struct KnockoutSpec {
  KnockoutTarget target = KnockoutTarget::mlp_out;
  int start_layer = 0;
  int width = 5;
};

// l .. min(l + width - 1, L - 1)
std::vector<int> knockout_layers(const KnockoutSpec& spec, int num_layers);
std::vector<Intervention> knockout_interventions(const KnockoutSpec& spec, int num_layers,
                                                 std::size_t position);

std::vector<TokenId> knockout_topk(const ModelBundle& bundle, const PromptCase& pc,
                                   const KnockoutSpec& spec, std::size_t k);
// Top-k of the unintervened clean run.
std::vector<TokenId> clean_topk(const ModelBundle& bundle, const PromptCase& pc, std::size_t k);

}  // namespace factrace
