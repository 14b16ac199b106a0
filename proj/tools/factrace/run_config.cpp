#include "run_config.hpp"

#include <set>

#include "factrace/error.hpp"
#include "factrace/report.hpp"

namespace factrace::cli {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

[[noreturn]] void bad(const std::string& msg) { throw Error(ErrorKind::InvalidConfig, msg); }

fs::path resolve(const fs::path& base, const json& v, const std::string& key) {
  if (!v.is_string()) bad("'" + key + "' must be a string path");
  const fs::path p = v.get<std::string>();
  if (p.empty()) bad("'" + key + "' is empty");
  return p.is_absolute() ? p : base / p;
}

template <typename T>
T number(const json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) bad("'" + key + "' must be a number");
  } else {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
      bad("'" + key + "' must be a non-negative integer");
    }
  }
  return v.get<T>();
}

}  // namespace

RunConfig parse_run_config(std::string_view json_text, const fs::path& base_dir, const Overrides& overrides) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    bad(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) bad("config must be a JSON object");
  static const std::set<std::string> known = {"model", "dataset", "corpus", "embeddings", "stopwords", "output",
                                              "n_cases", "noise_samples", "window", "tau", "k", "seed", "top_m",
                                              "df_cutoff", "threads"};
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) bad("unknown config key '" + key + "'");
  }

  RunConfig c;
  if (j.contains("model")) {
    const auto& m = j.at("model");
    if (!m.is_object()) bad("'model' must be an object with weights/config/vocab/merges");
    for (const auto& [key, _] : m.items()) {
      if (key != "weights" && key != "config" && key != "vocab" && key != "merges") bad("unknown key 'model." + key + "'");
    }
    if (!m.contains("weights") || !m.contains("config")) bad("'model' needs 'weights' and 'config'");
    c.model.weights = resolve(base_dir, m.at("weights"), "model.weights");
    c.model.config = resolve(base_dir, m.at("config"), "model.config");
    if (m.contains("vocab")) c.model.vocab = resolve(base_dir, m.at("vocab"), "model.vocab");
    if (m.contains("merges")) c.model.merges = resolve(base_dir, m.at("merges"), "model.merges");
    if (c.model.vocab.empty() != c.model.merges.empty()) bad("'model.vocab' and 'model.merges' go together");
  }
  if (j.contains("dataset")) c.dataset = resolve(base_dir, j.at("dataset"), "dataset");
  if (j.contains("corpus")) c.corpus = resolve(base_dir, j.at("corpus"), "corpus");
  if (j.contains("embeddings")) c.embeddings = resolve(base_dir, j.at("embeddings"), "embeddings");
  if (j.contains("stopwords")) c.stopwords = resolve(base_dir, j.at("stopwords"), "stopwords");
  if (j.contains("output")) c.output = resolve(base_dir, j.at("output"), "output");

  try {
    c.n_cases = number<std::size_t>(j, "n_cases", c.n_cases);
    c.noise_samples = number<std::size_t>(j, "noise_samples", c.noise_samples);
    c.window = number<std::size_t>(j, "window", c.window);
    c.tau = number<double>(j, "tau", c.tau);
    c.k = number<std::size_t>(j, "k", c.k);
    c.seed = number<std::uint64_t>(j, "seed", c.seed);
    c.top_m = number<std::size_t>(j, "top_m", c.top_m);
    c.df_cutoff = number<double>(j, "df_cutoff", c.df_cutoff);
    c.threads = static_cast<unsigned>(number<std::size_t>(j, "threads", c.threads));
  } catch (const json::exception& e) {
    bad(std::string("config value out of range: ") + e.what());
  }
  if (overrides.seed) c.seed = *overrides.seed;
  if (overrides.threads) c.threads = *overrides.threads;
  if (overrides.out) c.output = *overrides.out;

  if (c.n_cases == 0) bad("n_cases must be positive");
  if (c.noise_samples == 0) bad("noise_samples must be positive");
  if (c.window == 0) bad("window must be positive");
  if (c.k == 0) bad("k must be positive");
  if (c.top_m == 0) bad("top_m must be positive");
  if (!(c.tau >= -1.0 && c.tau <= 1.0)) bad("tau must lie in [-1, 1]");
  if (!(c.df_cutoff > 0.0 && c.df_cutoff <= 1.0)) bad("df_cutoff must lie in (0, 1]");
  if (c.threads == 0) bad("threads must be positive");

  c.fingerprint = j;
  c.fingerprint.erase("output");
  c.fingerprint.erase("threads");
  c.fingerprint["seed"] = c.seed;
  return c;
}

RunConfig load_run_config(const fs::path& path, const Overrides& overrides) {
  if (!fs::is_regular_file(path)) bad("config file not found: " + path.string());
  auto base = path.parent_path();
  if (base.empty()) base = ".";
  return parse_run_config(read_text_file(path), base, overrides);
}

void validate_paths(const RunConfig& c, unsigned needs) {
  auto need = [&](bool wanted, const fs::path& p, const char* key) {
    if (wanted && p.empty()) bad(std::string("config lacks '") + key + "'");
  };
  need(needs & kModel, c.model.weights, "model");
  need(needs & kModel, c.model.vocab, "model.vocab");
  need(needs & kDataset, c.dataset, "dataset");
  need(needs & kCorpus, c.corpus, "corpus");
  need(needs & kEmbeddings, c.embeddings, "embeddings");
  if (c.output.empty()) bad("no output directory: set 'output' or pass --out");
  const std::pair<const fs::path*, const char*> files[] = {
      {&c.model.weights, "model.weights"}, {&c.model.config, "model.config"}, {&c.model.vocab, "model.vocab"},
      {&c.model.merges, "model.merges"},   {&c.dataset, "dataset"},           {&c.corpus, "corpus"},
      {&c.embeddings, "embeddings"},       {&c.stopwords, "stopwords"},
  };
  for (const auto& [p, key] : files) {
    if (!p->empty() && !fs::is_regular_file(*p)) bad(std::string(key) + " not found: " + p->string());
  }
}

}  // namespace factrace::cli
