#include "factrace/report.hpp"

#include <charconv>
#include <fstream>
#include <iterator>
#include <sstream>

#include <nlohmann/json.hpp>

#include "factrace/error.hpp"

namespace factrace {

namespace {

using nlohmann::json;

json parse_json(std::string_view text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::MalformedRecord, std::string(what) + ": " + e.what());
  }
}

void check_schema(const json& j, const char* what) {
  auto it = j.find("schema_version");
  if (it == j.end() || !it->is_number_integer()) {
    throw Error(ErrorKind::SchemaVersion, std::string(what) + " has no schema_version");
  }
  if (it->get<int>() != kSchemaVersion) {
    throw Error(ErrorKind::SchemaVersion, std::string(what) + " has schema_version " + std::to_string(it->get<int>()) +
                                              ", expected " + std::to_string(kSchemaVersion));
  }
}

// Data lines of a text artifact: blank lines and '#' comment lines dropped.
std::vector<std::string> data_lines(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    out.push_back(line);
  }
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

double parse_double(const std::string& s, const char* what) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw Error(ErrorKind::MalformedRecord, std::string(what) + ": '" + s + "' is not a number");
  }
  return v;
}

int parse_int(const std::string& s, const char* what) {
  int v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw Error(ErrorKind::MalformedRecord, std::string(what) + ": '" + s + "' is not an integer");
  }
  return v;
}

}  // namespace

std::string_view tool_version() { return "0.1.0"; }

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t hash_file(const std::filesystem::path& path) { return fnv1a(read_text_file(path)); }

std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = digits[v & 0xF];
    v >>= 4;
  }
  return s;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "'");
  std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorKind::Io, "read failed for '" + path.string() + "'");
  return s;
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write '" + path.string() + "'");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error(ErrorKind::Io, "write failed for '" + path.string() + "'");
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// ---------------------------------------------------------------------------

std::string cases_to_jsonl(const std::vector<PromptCase>& cases) {
  std::string out;
  for (const auto& pc : cases) {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["case_id"] = pc.triple.case_id;
    j["subject"] = pc.triple.subject;
    j["relation_template"] = pc.triple.relation_template;
    j["object"] = pc.triple.object;
    j["object_token_ids"] = pc.triple.object_token_ids;
    j["prompt"] = pc.prompt_text;
    j["tokens"] = pc.tokens;
    j["subject_span"] = {pc.subject_span.first, pc.subject_span.last};
    j["clean_object_prob"] = pc.clean_object_prob;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<PromptCase> cases_from_jsonl(std::string_view text) {
  std::vector<PromptCase> out;
  std::size_t index = 0;
  for (const auto& line : data_lines(text)) {
    const auto j = parse_json(line, "case record");
    if (j.contains("manifest")) continue;
    check_schema(j, "case record");
    try {
      PromptCase pc;
      pc.triple.case_id = j.at("case_id").get<std::string>();
      pc.triple.subject = j.at("subject").get<std::string>();
      pc.triple.relation_template = j.at("relation_template").get<std::string>();
      pc.triple.object = j.at("object").get<std::string>();
      pc.triple.object_token_ids = j.at("object_token_ids").get<std::vector<TokenId>>();
      pc.prompt_text = j.at("prompt").get<std::string>();
      pc.tokens = j.at("tokens").get<std::vector<TokenId>>();
      const auto span = j.at("subject_span").get<std::vector<std::size_t>>();
      if (span.size() != 2 || span[0] > span[1] || span[1] >= pc.tokens.size()) {
        throw Error(ErrorKind::MalformedRecord, "MalformedRecord(" + std::to_string(index) + "): bad subject_span");
      }
      pc.subject_span = {span[0], span[1]};
      pc.clean_object_prob = j.at("clean_object_prob").get<double>();
      if (pc.tokens.empty() || pc.triple.object_token_ids.empty()) {
        throw Error(ErrorKind::MalformedRecord, "MalformedRecord(" + std::to_string(index) + "): empty token list");
      }
      out.push_back(std::move(pc));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::MalformedRecord, "MalformedRecord(" + std::to_string(index) + "): " + e.what());
    }
    ++index;
  }
  return out;
}

std::string noise_to_json(const NoiseScale& noise) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["sigma_sub"] = noise.sigma_sub;
  j["nu"] = noise.nu;
  return j.dump(2) + "\n";
}

NoiseScale noise_from_json(std::string_view text) {
  const auto j = parse_json(text, "noise record");
  check_schema(j, "noise record");
  try {
    return {j.at("sigma_sub").get<double>(), j.at("nu").get<double>()};
  } catch (const json::exception& e) {
    throw Error(ErrorKind::MalformedRecord, std::string("noise record: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

std::string grid_to_csv(const TraceGrid& grid) {
  std::string out = "position,layer,kind,aie\n";
  for (auto role : kAllRoles) {
    for (auto kind : grid.kinds) {
      for (int l = 0; l < grid.num_layers; ++l) {
        if (!grid.has(role, l, kind)) continue;
        out += std::string(to_string(role)) + "," + std::to_string(l) + "," + std::string(to_string(kind)) + "," +
               format_double(grid.at(role, l, kind).aie) + "\n";
      }
    }
  }
  return out;
}

std::string grid_metadata_json(const TraceGrid& grid) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["num_prompts"] = grid.num_prompts;
  j["num_layers"] = grid.num_layers;
  j["window"] = grid.window;
  j["samples"] = grid.noise_samples;
  j["seed"] = grid.seed;
  j["nu"] = grid.nu;
  json kinds = json::array();
  for (auto k : grid.kinds) kinds.push_back(std::string(to_string(k)));
  j["kinds"] = kinds;
  json support = json::object();
  for (auto role : kAllRoles) {
    std::size_t s = 0;
    for (const auto& [key, cell] : grid.cells) {
      if (std::get<0>(key) == role) s = cell.support;
    }
    support[std::string(to_string(role))] = s;
  }
  j["support"] = support;
  return j.dump(2) + "\n";
}

TraceGrid grid_from_files(std::string_view csv, std::string_view metadata_json) {
  const auto meta = parse_json(metadata_json, "grid metadata");
  check_schema(meta, "grid metadata");
  TraceGrid grid;
  std::map<TokenRole, std::size_t> support;
  try {
    grid.num_prompts = meta.at("num_prompts").get<std::size_t>();
    grid.num_layers = meta.at("num_layers").get<int>();
    grid.window = meta.at("window").get<std::size_t>();
    grid.noise_samples = meta.at("samples").get<std::size_t>();
    grid.seed = meta.at("seed").get<std::uint64_t>();
    grid.nu = meta.at("nu").get<double>();
    for (const auto& k : meta.at("kinds")) grid.kinds.push_back(parse_hook_kind(k.get<std::string>()));
    for (const auto& [role, n] : meta.at("support").items()) support[parse_token_role(role)] = n.get<std::size_t>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::MalformedRecord, std::string("grid metadata: ") + e.what());
  }
  const auto lines = data_lines(csv);
  if (lines.empty() || lines.front() != "position,layer,kind,aie") {
    throw Error(ErrorKind::MalformedRecord, "grid CSV lacks the 'position,layer,kind,aie' header");
  }
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = split_csv(lines[i]);
    if (f.size() != 4) throw Error(ErrorKind::MalformedRecord, "grid CSV row " + std::to_string(i) + " is malformed");
    const auto role = parse_token_role(f[0]);
    GridCell cell;
    cell.aie = parse_double(f[3], "grid aie");
    cell.support = support.count(role) ? support[role] : 0;
    grid.cells[{role, parse_int(f[1], "grid layer"), parse_hook_kind(f[2])}] = cell;
  }
  return grid;
}

std::string profile_to_csv(const LayerProfile& profile) {
  std::string out = "layer,value\n";
  for (std::size_t l = 0; l < profile.values.size(); ++l) {
    out += std::to_string(l) + "," + format_double(profile.values[l]) + "\n";
  }
  return out;
}

LayerProfile profile_from_csv(std::string_view csv, HookKind kind) {
  LayerProfile p;
  p.kind = kind;
  const auto lines = data_lines(csv);
  std::size_t i = 0;
  if (!lines.empty() && lines.front().rfind("layer", 0) == 0) i = 1;
  for (; i < lines.size(); ++i) {
    const auto f = split_csv(lines[i]);
    if (f.size() == 1) {
      p.values.push_back(parse_double(f[0], "profile value"));
      continue;
    }
    if (f.size() != 2) throw Error(ErrorKind::MalformedRecord, "profile row '" + lines[i] + "' is malformed");
    if (parse_int(f[0], "profile layer") != static_cast<int>(p.values.size())) {
      throw Error(ErrorKind::MalformedRecord, "profile layers must be listed in order from 0");
    }
    p.values.push_back(parse_double(f[1], "profile value"));
  }
  if (p.values.empty()) throw Error(ErrorKind::EmptyDataset, "profile CSV has no rows");
  return p;
}

}  // namespace factrace
