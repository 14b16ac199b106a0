#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "factrace/analysis.hpp"
#include "factrace/dataset.hpp"
#include "factrace/error.hpp"
#include "factrace/facteval.hpp"
#include "factrace/model.hpp"
#include "factrace/report.hpp"
#include "factrace/tracing.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace factrace;
using factrace::cli::RunConfig;

namespace {

struct Shared {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  std::string out;
};

void add_shared(CLI::App* sub, Shared& s) {
  sub->add_option("--config", s.config, "run configuration (JSON)");
  sub->add_option("--seed", s.seed, "override the configured seed");
  sub->add_option("--threads", s.threads, "worker threads (results do not depend on it)")->check(CLI::PositiveNumber);
  sub->add_option("--out", s.out, "output directory (overrides 'output')");
}

cli::Overrides overrides_of(const Shared& s) {
  cli::Overrides o;
  o.seed = s.seed;
  o.threads = s.threads;
  if (!s.out.empty()) o.out = fs::path(s.out);
  return o;
}

RunConfig config_of(const Shared& s, unsigned needs) {
  if (s.config.empty()) throw Error(ErrorKind::InvalidConfig, "--config is required");
  auto c = cli::load_run_config(s.config, overrides_of(s));
  cli::validate_paths(c, needs);
  return c;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t b = 0;
  while (b <= s.size()) {
    auto e = s.find(',', b);
    if (e == std::string::npos) e = s.size();
    auto item = s.substr(b, e - b);
    while (!item.empty() && item.front() == ' ') item.erase(item.begin());
    while (!item.empty() && item.back() == ' ') item.pop_back();
    if (!item.empty()) out.push_back(item);
    b = e + 1;
  }
  return out;
}

void progress(const std::string& command, const std::string& msg) {
  std::cerr << "[" << command << "] " << msg << std::endl;
}

// Collects outputs of one command; each file embeds the manifest.
class Outputs {
 public:
  Outputs(fs::path dir, std::string command, json manifest)
      : dir_(std::move(dir)), command_(std::move(command)), manifest_(std::move(manifest)) {}

  void csv(const std::string& name, const std::string& body) {
    put(name, "# manifest " + manifest_.dump() + "\n" + body);
  }
  void json_file(const std::string& name, json j) {
    j["manifest"] = manifest_;
    put(name, j.dump(2) + "\n");
  }
  void jsonl(const std::string& name, const std::string& body) {
    put(name, json{{"manifest", manifest_}}.dump() + "\n" + body);
  }
  void finish() {
    json files = json::object();
    for (const auto& [name, hash] : hashes_) files[name] = hash;
    json j{{"manifest", manifest_}, {"files", files}};
    put(command_ + ".manifest.json", j.dump(2) + "\n", false);
  }

 private:
  void put(const std::string& name, const std::string& text, bool record = true) {
    const auto path = dir_ / name;
    write_text_file(path, text);
    if (record) hashes_.emplace_back(name, hex64(fnv1a(text)));
    std::cout << path.string() << "\n";
  }

  fs::path dir_;
  std::string command_;
  json manifest_;
  std::vector<std::pair<std::string, std::string>> hashes_;
};

json manifest_of(const RunConfig& c, const std::string& command) {
  json m;
  m["schema_version"] = kSchemaVersion;
  m["tool"] = "factrace";
  m["tool_version"] = std::string(tool_version());
  m["command"] = command;
  m["seed"] = c.seed;
  m["config_hash"] = hex64(fnv1a(c.fingerprint.dump()));
  if (!c.model.weights.empty()) m["model_hash"] = hex64(hash_file(c.model.weights));
  return m;
}

fs::path prerequisite(const RunConfig& c, const std::string& name, const std::string& producer) {
  const auto p = c.output / name;
  if (!fs::is_regular_file(p)) {
    throw Error(ErrorKind::MissingPrerequisite, p.string() + " not found; run 'factrace " + producer + "' first");
  }
  return p;
}

std::vector<PromptCase> read_cases(const RunConfig& c) {
  return cases_from_jsonl(read_text_file(prerequisite(c, "cases.jsonl", "prep")));
}

void check_cases(const std::vector<PromptCase>& cases, const ModelBundle& bundle) {
  for (const auto& pc : cases) {
    for (auto id : pc.tokens) {
      if (id < 0 || id >= bundle.config.vocab_size) {
        throw Error(ErrorKind::TokenOutOfRange, "case " + pc.triple.case_id + " has a token outside the vocabulary");
      }
    }
  }
}

NoiseScale load_noise(const RunConfig& c) {
  return noise_from_json(read_text_file(prerequisite(c, "noise.json", "prep")));
}

ModelBundle load_bundle(const RunConfig& c, const std::string& command) {
  progress(command, "loading model " + c.model.weights.string());
  return load_model(c.model);
}

std::set<std::string> stopwords_of(const RunConfig& c) {
  return c.stopwords.empty() ? std::set<std::string>{} : load_stopwords(c.stopwords);
}

// ---------------------------------------------------------------------------

void cmd_prep(const Shared& s) {
  const auto c = config_of(s, cli::kModel | cli::kDataset);
  const auto bundle = load_bundle(c, "prep");
  const auto triples = load_counterfact(c.dataset, bundle.tok());
  progress("prep", std::to_string(triples.size()) + " records; filtering " + std::to_string(c.n_cases) + " cases");
  const auto cases = filter_correct(bundle, triples, c.n_cases, c.seed);
  const auto noise = estimate_sigma(bundle, triples);
  progress("prep", "sigma_sub = " + format_double(noise.sigma_sub));
  Outputs out(c.output, "prep", manifest_of(c, "prep"));
  out.jsonl("cases.jsonl", cases_to_jsonl(cases));
  out.json_file("noise.json", json::parse(noise_to_json(noise)));
  out.finish();
}

void cmd_trace(const Shared& s, const std::string& kinds) {
  const auto c = config_of(s, cli::kModel);
  TraceOptions opt;
  opt.kinds.clear();
  for (const auto& k : split_list(kinds)) opt.kinds.push_back(parse_hook_kind(k));
  if (opt.kinds.empty()) throw Error(ErrorKind::InvalidArgument, "--kinds is empty");
  opt.window = c.window;
  opt.samples = c.noise_samples;
  opt.seed = c.seed;
  opt.threads = c.threads;
  const auto cases = read_cases(c);
  const auto noise = load_noise(c);
  const auto bundle = load_bundle(c, "trace");
  check_cases(cases, bundle);
  progress("trace", std::to_string(cases.size()) + " cases x " + std::to_string(bundle.config.num_layers) +
                        " layers x " + std::to_string(opt.kinds.size()) + " kinds");
  const auto grid = trace_grid(bundle, cases, noise, opt);
  Outputs out(c.output, "trace", manifest_of(c, "trace"));
  out.csv("trace_grid.csv", grid_to_csv(grid));
  out.json_file("trace_grid.json", json::parse(grid_metadata_json(grid)));
  out.finish();
}

struct SeverFlags {
  std::string kinds = "attn_out,mlp_out";
  std::string scope = "all";
  std::optional<std::string> layers;
  std::string restore_kind = "hidden";
  bool full_row = false;
};

void cmd_sever(const Shared& s, const SeverFlags& f, bool scope_given) {
  const auto c = config_of(s, cli::kModel);
  SeverCurveOptions opt;
  opt.scope = parse_sever_scope(f.scope);
  if (f.layers) {
    if (scope_given && opt.scope != SeverScope::fixed) {
      throw Error(ErrorKind::InvalidArgument, "--layers conflicts with --scope " + f.scope);
    }
    opt.scope = SeverScope::fixed;
    for (const auto& item : split_list(*f.layers)) {
      int l = 0;
      try {
        std::size_t used = 0;
        l = std::stoi(item, &used);
        if (used != item.size()) throw std::invalid_argument(item);
      } catch (const std::exception&) {
        throw Error(ErrorKind::InvalidArgument, "--layers entry '" + item + "' is not an integer");
      }
      opt.fixed_layers.insert(l);
    }
  } else if (opt.scope == SeverScope::fixed) {
    throw Error(ErrorKind::InvalidArgument, "--scope fixed needs --layers");
  }
  opt.restore_kind = parse_hook_kind(f.restore_kind);
  opt.full_row = f.full_row;
  opt.samples = c.noise_samples;
  opt.seed = c.seed;
  opt.threads = c.threads;

  const auto cases = read_cases(c);
  const auto noise = load_noise(c);
  const auto bundle = load_bundle(c, "sever");
  check_cases(cases, bundle);
  const int L = bundle.config.num_layers;
  for (int l : opt.fixed_layers) {
    if (l < 0 || l >= L) throw Error(ErrorKind::SiteOutOfRange, "--layers entry " + std::to_string(l) + " out of range");
  }
  for (int l = 0; l < L; ++l) opt.layers.push_back(l);

  Outputs out(c.output, "sever", manifest_of(c, "sever"));
  for (const auto& k : split_list(f.kinds)) {
    opt.target_kind = parse_hook_kind(k);
    if (opt.target_kind != HookKind::attn_out && opt.target_kind != HookKind::mlp_out) {
      throw Error(ErrorKind::InvalidArgument, "--kind must be attn_out or mlp_out");
    }
    progress("sever", std::string(to_string(opt.target_kind)) + " scope " + std::string(to_string(opt.scope)));
    const auto curve = severing_curve(bundle, cases, noise, opt);
    std::string body = "layer,aie\n";
    for (std::size_t i = 0; i < curve.layers.size(); ++i) {
      progress("sever", "  layer " + std::to_string(curve.layers[i]) + " aie " + format_double(curve.aie[i]));
      body += std::to_string(curve.layers[i]) + "," + format_double(curve.aie[i]) + "\n";
    }
    out.csv("sever_" + std::string(to_string(opt.target_kind)) + ".csv", body);
  }
  out.finish();
}

std::map<std::string, CandidateSet> candidate_sets(const RunConfig& c, const ModelBundle& bundle,
                                                   const std::vector<PromptCase>& cases, const std::string& command) {
  progress(command, "retrieving candidates from " + c.corpus.string());
  const auto corpus = load_corpus(c.corpus);
  return build_candidate_sets(bundle.tok(), corpus, cases, stopwords_of(c), {c.top_m, c.df_cutoff});
}

void cmd_knockout(const Shared& s, const std::string& targets) {
  const auto c = config_of(s, cli::kModel | cli::kCorpus | cli::kEmbeddings);
  std::vector<KnockoutTarget> ts;
  for (const auto& t : split_list(targets)) ts.push_back(parse_knockout_target(t));
  if (ts.empty()) throw Error(ErrorKind::InvalidArgument, "--target is empty");
  const auto cases = read_cases(c);
  const auto bundle = load_bundle(c, "knockout");
  check_cases(cases, bundle);
  const auto table = EmbeddingTable::load(c.embeddings);
  const auto sets = candidate_sets(c, bundle, cases, "knockout");

  Outputs out(c.output, "knockout", manifest_of(c, "knockout"));
  json summary{{"schema_version", kSchemaVersion}, {"tau", c.tau}, {"k", c.k}, {"width", KnockoutSpec{}.width}};
  json clean = json::object();
  for (auto t : ts) {
    progress("knockout", std::string(to_string(t)) + " sweep over " + std::to_string(bundle.config.num_layers) +
                             " start layers");
    const auto curve = knockout_sweep(bundle, cases, t, table, sets, c.tau, c.k, c.threads);
    std::string body = "start_layer,objects_rate\n";
    for (std::size_t l = 0; l < curve.rate.size(); ++l) {
      progress("knockout", "  layer " + std::to_string(l) + " objects_rate " + format_double(curve.rate[l]));
      body += std::to_string(l) + "," + format_double(curve.rate[l]) + "\n";
    }
    out.csv("knockout_" + std::string(to_string(t)) + ".csv", body);
    clean[std::string(to_string(t))] = curve.clean_rate;
  }
  summary["clean_rate"] = clean;
  out.json_file("knockout.json", summary);
  out.finish();
}

struct GiniFlags {
  std::string profile;
  std::string kinds;
  std::string role = "last_subject";
  bool no_drop = false;
};

json profile_json(const LayerProfile& p) {
  return json{{"gini", gini(p)}, {"peak_layer", peak_layer(p)}, {"num_layers", p.num_layers()}, {"values", p.values}};
}

void cmd_gini(const Shared& s, const GiniFlags& f) {
  if (!f.profile.empty()) {
    // Standalone: one profile file, no model needed.
    if (s.out.empty()) throw Error(ErrorKind::InvalidConfig, "--profile needs --out");
    const auto kinds = split_list(f.kinds.empty() ? "mlp_out" : f.kinds);
    if (kinds.size() != 1) throw Error(ErrorKind::InvalidArgument, "--profile takes a single --kind");
    const auto text = read_text_file(f.profile);
    const auto p = profile_from_csv(text, parse_hook_kind(kinds[0]));
    json m{{"schema_version", kSchemaVersion}, {"tool", "factrace"}, {"tool_version", std::string(tool_version())},
           {"command", "gini"},          {"seed", s.seed.value_or(0)},   {"profile_hash", hex64(fnv1a(text))}};
    Outputs out(s.out, "gini", m);
    json j{{"schema_version", kSchemaVersion}, {"profiles", {{kinds[0], profile_json(p)}}}};
    out.json_file("gini.json", j);
    out.finish();
    return;
  }

  const auto c = config_of(s, f.no_drop ? 0u : unsigned(cli::kModel));
  const auto grid = grid_from_files(read_text_file(prerequisite(c, "trace_grid.csv", "trace")),
                                    read_text_file(prerequisite(c, "trace_grid.json", "trace")));
  const auto role = parse_token_role(f.role);
  std::vector<HookKind> kinds;
  if (f.kinds.empty()) {
    for (auto k : grid.kinds) {
      if (k == HookKind::attn_out || k == HookKind::mlp_out) kinds.push_back(k);
    }
  } else {
    for (const auto& k : split_list(f.kinds)) kinds.push_back(parse_hook_kind(k));
  }
  if (kinds.empty()) throw Error(ErrorKind::InvalidArgument, "no attn_out/mlp_out rows in the trace grid");

  Outputs out(c.output, "gini", manifest_of(c, "gini"));
  json profiles = json::object();
  std::vector<LayerProfile> computed;
  for (auto k : kinds) {
    const auto p = layer_profile(grid, k, role);
    out.csv("profile_" + std::string(to_string(k)) + ".csv", profile_to_csv(p));
    profiles[std::string(to_string(k))] = profile_json(p);
    progress("gini", std::string(to_string(k)) + " G = " + format_double(gini(p)) + ", peak layer " +
                         std::to_string(peak_layer(p)));
    computed.push_back(p);
  }
  out.json_file("gini.json", json{{"schema_version", kSchemaVersion}, {"role", f.role}, {"profiles", profiles}});

  if (!f.no_drop) {
    const auto cases = read_cases(c);
    const auto noise = load_noise(c);
    const auto bundle = load_bundle(c, "gini");
    check_cases(cases, bundle);
    json reports = json::object();
    for (const auto& p : computed) {
      if (p.kind != HookKind::attn_out && p.kind != HookKind::mlp_out) continue;
      progress("gini", "drop report for " + std::string(to_string(p.kind)));
      const auto r = peak_drop_report(bundle, cases, noise, p, c.noise_samples, c.seed, c.threads);
      reports[std::string(to_string(p.kind))] = json{{"gini", r.gini},
                                                    {"peak_layer", r.peak_layer},
                                                    {"baseline_aie", r.baseline_aie},
                                                    {"severed_aie", r.severed_aie},
                                                    {"drop_rate", r.drop_rate ? json(*r.drop_rate) : json(nullptr)}};
    }
    out.json_file("drop_report.json", json{{"schema_version", kSchemaVersion}, {"reports", reports}});
  }
  out.finish();
}

void cmd_objrate(const Shared& s, std::optional<double> tau) {
  auto c = config_of(s, cli::kModel | cli::kCorpus | cli::kEmbeddings);
  if (tau) {
    if (!(*tau >= -1.0 && *tau <= 1.0)) throw Error(ErrorKind::InvalidArgument, "--tau must lie in [-1, 1]");
    c.tau = *tau;
    c.fingerprint["tau"] = *tau;
  }
  const auto cases = read_cases(c);
  const auto bundle = load_bundle(c, "objrate");
  check_cases(cases, bundle);
  const auto table = EmbeddingTable::load(c.embeddings);
  const auto sets = candidate_sets(c, bundle, cases, "objrate");

  Outputs out(c.output, "objrate", manifest_of(c, "objrate"));
  json cand = json::object();
  for (const auto& [subject, set] : sets) cand[subject] = set.candidates;
  out.json_file("candidates.json", json{{"schema_version", kSchemaVersion}, {"subjects", cand}});

  json rows = json::array();
  double sum = 0.0;
  for (const auto& pc : cases) {
    const auto top = decode_each(bundle.tok(), clean_topk(bundle, pc, c.k));
    const double r = objects_rate(table, top, sets.at(pc.triple.subject), c.tau);
    sum += r;
    rows.push_back(json{{"case_id", pc.triple.case_id}, {"subject", pc.triple.subject}, {"objects_rate", r},
                        {"top_k", top}});
  }
  const double mean = sum / static_cast<double>(cases.size());
  progress("objrate", "mean clean objects rate " + format_double(mean));
  out.json_file("objrate.json", json{{"schema_version", kSchemaVersion},
                                     {"tau", c.tau},
                                     {"k", c.k},
                                     {"mean_objects_rate", mean},
                                     {"cases", rows}});
  out.finish();
}

int exit_code(ErrorClass cls) {
  switch (cls) {
    case ErrorClass::Config: return 2;
    case ErrorClass::Data: return 3;
    case ErrorClass::Engine: return 4;
  }
  return 4;
}

const char* class_name(ErrorClass cls) {
  switch (cls) {
    case ErrorClass::Config: return "config";
    case ErrorClass::Data: return "data";
    case ErrorClass::Engine: return "engine";
  }
  return "engine";
}

int report_error(const std::string& kind, ErrorClass cls, const std::string& message, json extra = json::object()) {
  json e{{"kind", kind}, {"class", class_name(cls)}, {"message", message}};
  for (auto& [k, v] : extra.items()) e[k] = v;
  std::cerr << json{{"error", e}}.dump() << std::endl;
  return exit_code(cls);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"factrace: causal tracing, severing, knockout and objects-rate evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(tool_version()));

  Shared shared;
  auto* prep = app.add_subcommand("prep", "filter known facts and estimate the noise scale");
  add_shared(prep, shared);

  auto* trace = app.add_subcommand("trace", "restoration grid over roles x layers x kinds");
  add_shared(trace, shared);
  std::string trace_kinds = "hidden,attn_out,mlp_out";
  trace->add_option("--kinds", trace_kinds, "comma-separated hook kinds")->capture_default_str();

  auto* sever = app.add_subcommand("sever", "severing curves over layers");
  add_shared(sever, shared);
  SeverFlags sf;
  sever->add_option("--kind", sf.kinds, "severed module kinds")->capture_default_str();
  auto* scope_opt = sever->add_option("--scope", sf.scope, "all | at-layer | none | fixed")->capture_default_str();
  sever->add_option("--layers", sf.layers, "explicit severed layer set, comma-separated (may be empty)");
  sever->add_option("--restore-kind", sf.restore_kind, "kind of the restored site")->capture_default_str();
  sever->add_flag("--full-row", sf.full_row, "pin every position, not only the last subject token");

  auto* knockout = app.add_subcommand("knockout", "objects rate after knocking out module windows");
  add_shared(knockout, shared);
  std::string targets = "attn_out,mlp_out";
  knockout->add_option("--target", targets, "attn_out, mlp_out, both (comma-separated)")->capture_default_str();

  auto* gini_cmd = app.add_subcommand("gini", "layer profiles, Gini coefficient, peak layer, drop report");
  add_shared(gini_cmd, shared);
  GiniFlags gf;
  gini_cmd->add_option("--profile", gf.profile, "standalone profile CSV instead of the trace grid");
  gini_cmd->add_option("--kind", gf.kinds, "profile kinds (default: module kinds in the grid)");
  gini_cmd->add_option("--role", gf.role, "token role row")->capture_default_str();
  gini_cmd->add_flag("--no-drop", gf.no_drop, "skip the drop report");

  auto* objrate = app.add_subcommand("objrate", "clean objects rate and candidate sets");
  add_shared(objrate, shared);
  std::optional<double> tau;
  objrate->add_option("--tau", tau, "similarity threshold override");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("InvalidArgument", ErrorClass::Config, e.what());
  }

  try {
    if (*prep) cmd_prep(shared);
    else if (*trace) cmd_trace(shared, trace_kinds);
    else if (*sever) cmd_sever(shared, sf, scope_opt->count() > 0);
    else if (*knockout) cmd_knockout(shared, targets);
    else if (*gini_cmd) cmd_gini(shared, gf);
    else if (*objrate) cmd_objrate(shared, tau);
  } catch (const InsufficientCasesError& e) {
    return report_error(std::string(to_string(e.kind())), classify(e.kind()), e.what(),
                        json{{"found", e.found()}, {"requested", e.requested()}});
  } catch (const Error& e) {
    return report_error(std::string(to_string(e.kind())), classify(e.kind()), e.what());
  } catch (const std::exception& e) {
    return report_error("Internal", ErrorClass::Engine, e.what());
  }
  return 0;
}
