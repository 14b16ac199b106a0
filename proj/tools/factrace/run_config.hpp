#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "factrace/model.hpp"

namespace factrace::cli {

// Paths are stored resolved against the directory of the config file.
struct RunConfig {
  ModelPaths model;
  std::filesystem::path dataset;
  std::filesystem::path corpus;
  std::filesystem::path embeddings;
  std::filesystem::path stopwords;
  std::filesystem::path output;
  std::size_t n_cases = 100;
  std::size_t noise_samples = 10;
  std::size_t window = 1;
  double tau = 0.7;
  std::size_t k = 50;
  std::uint64_t seed = 0;
  std::size_t top_m = 20;
  double df_cutoff = 0.5;
  unsigned threads = 1;

  // Effective settings as written (relative paths kept, overrides applied,
  // output/threads dropped); hashed into the manifest.
  nlohmann::json fingerprint;
};

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  std::optional<std::filesystem::path> out;
};

RunConfig parse_run_config(std::string_view json_text, const std::filesystem::path& base_dir,
                           const Overrides& overrides);
RunConfig load_run_config(const std::filesystem::path& path, const Overrides& overrides);

enum Need : unsigned {
  kModel = 1u << 0,
  kDataset = 1u << 1,
  kCorpus = 1u << 2,
  kEmbeddings = 1u << 3,
};

// Throws InvalidConfig if a needed path is unset or any configured path is
// missing on disk.
void validate_paths(const RunConfig& config, unsigned needs);

}  // namespace factrace::cli
