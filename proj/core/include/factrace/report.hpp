#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "factrace/analysis.hpp"
#include "factrace/dataset.hpp"
#include "factrace/tracing.hpp"

namespace factrace {

inline constexpr int kSchemaVersion = 1;
std::string_view tool_version();

// 64-bit FNV-1a, used for model and config fingerprints.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t hash_file(const std::filesystem::path& path);
std::string hex64(std::uint64_t v);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

// Shortest round-trip decimal for a double.
std::string format_double(double v);

// Cases: one JSON record per line.
std::string cases_to_jsonl(const std::vector<PromptCase>& cases);
std::vector<PromptCase> cases_from_jsonl(std::string_view text);

std::string noise_to_json(const NoiseScale& noise);
NoiseScale noise_from_json(std::string_view text);

// CSV "position,layer,kind,aie" plus a JSON sidecar with grid metadata.
std::string grid_to_csv(const TraceGrid& grid);
std::string grid_metadata_json(const TraceGrid& grid);
TraceGrid grid_from_files(std::string_view csv, std::string_view metadata_json);

std::string profile_to_csv(const LayerProfile& profile);
// "layer,value" rows; the kind is taken from `kind`.
LayerProfile profile_from_csv(std::string_view csv, HookKind kind);

}  // namespace factrace
