#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "factrace/analysis.hpp"
#include "factrace/facteval.hpp"
#include "factrace/noise.hpp"
#include "factrace/report.hpp"
#include "factrace/safetensors.hpp"
#include "oracle.hpp"
#include "process.hpp"
#include "toy.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace factrace;

namespace {

const std::vector<std::string> kPipeline = {"prep", "trace", "sever", "knockout", "gini", "objrate"};

testproc::Result cli(const std::string& args) { return testproc::run(std::string(FACTRACE_CLI) + " " + args); }

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

json last_error(const testproc::Result& r) {
  const auto ls = lines(r.err);
  return ls.empty() ? json() : json::parse(ls.back());
}

// CSV body without the '#' manifest line, as rows of fields.
std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& l : lines(read_text_file(p))) {
    if (l.empty() || l[0] == '#') continue;
    std::vector<std::string> f;
    std::stringstream ss(l);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    rows.push_back(f);
  }
  rows.erase(rows.begin());  // header
  return rows;
}

oracle::Case oracle_case(const PromptCase& pc) {
  return {{pc.tokens.begin(), pc.tokens.end()}, pc.subject_span.first, pc.subject_span.last, pc.object_token()};
}

std::vector<TokenId> oracle_topk(const std::vector<double>& probs, std::size_t k) {
  std::vector<TokenId> idx(probs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](TokenId a, TokenId b) { return probs[a] > probs[b]; });
  idx.resize(k);
  return idx;
}

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = testproc::scratch_dir("factrace_cli_test");
    fs::remove_all(root_);
    run_json_ = toy::write_fixture(root_ / "fixture", 3);
    for (const auto& entry : fs::directory_iterator(root_ / "fixture")) {
      input_hashes_[entry.path().filename().string()] = hash_file(entry.path());
    }
    for (const auto& cmd : kPipeline) {
      results_.push_back(cli(cmd + " --config " + testproc::quote(run_json_.string()) + " --out " +
                             testproc::quote((root_ / "out").string())));
    }
  }

  static fs::path out(const std::string& name) { return root_ / "out" / name; }
  static fs::path fixture(const std::string& name) { return root_ / "fixture" / name; }

  static std::vector<PromptCase> cases() { return cases_from_jsonl(read_text_file(out("cases.jsonl"))); }

  static fs::path root_;
  static fs::path run_json_;
  static std::vector<testproc::Result> results_;
  static std::map<std::string, std::uint64_t> input_hashes_;
};

fs::path Pipeline::root_;
fs::path Pipeline::run_json_;
std::vector<testproc::Result> Pipeline::results_;
std::map<std::string, std::uint64_t> Pipeline::input_hashes_;

}  // namespace

TEST_F(Pipeline, EveryCommandSucceedsAndPrintsOnlyPaths) {
  ASSERT_EQ(results_.size(), kPipeline.size());
  for (std::size_t i = 0; i < results_.size(); ++i) {
    EXPECT_EQ(results_[i].code, 0) << kPipeline[i] << ": " << results_[i].err;
    for (const auto& l : lines(results_[i].out)) EXPECT_TRUE(fs::is_regular_file(l)) << l;
  }
}

TEST_F(Pipeline, InputsAreNotModified) {
  for (const auto& [name, h] : input_hashes_) EXPECT_EQ(hash_file(fixture(name)), h) << name;
}

TEST_F(Pipeline, ManifestMatchesRecomputation) {
  auto cfg = json::parse(read_text_file(run_json_));
  cfg.erase("output");
  cfg.erase("threads");
  const auto config_hash = hex64(fnv1a(cfg.dump()));
  const auto model_hash = hex64(fnv1a(read_text_file(fixture("model.safetensors"))));
  for (const auto& cmd : kPipeline) {
    const auto m = json::parse(read_text_file(out(cmd + ".manifest.json")));
    EXPECT_EQ(m["manifest"]["seed"], 3);
    EXPECT_EQ(m["manifest"]["config_hash"], config_hash);
    EXPECT_EQ(m["manifest"]["model_hash"], model_hash);
    EXPECT_EQ(m["manifest"]["tool_version"], std::string(tool_version()));
    EXPECT_EQ(m["manifest"]["command"], cmd);
    for (const auto& [name, h] : m["files"].items()) {
      EXPECT_EQ(h, hex64(fnv1a(read_text_file(out(name))))) << name;
      const auto text = read_text_file(out(name));
      EXPECT_NE(text.find(config_hash), std::string::npos) << name << " lacks the manifest";
    }
  }
}

TEST_F(Pipeline, PreparedCasesAreGreedyCorrectUnderTheOracle) {
  const auto cfg = load_model_config(fixture("config.json"));
  const auto tensors = read_safetensors(fixture("model.safetensors"));
  const oracle::Model om(cfg, tensors);
  const auto cs = cases();
  ASSERT_EQ(cs.size(), 6u);
  for (const auto& pc : cs) {
    const auto r = om.run({pc.tokens.begin(), pc.tokens.end()});
    EXPECT_EQ(oracle_topk(r.probs, 1)[0], pc.object_token());
    EXPECT_NEAR(r.probs[pc.object_token()], pc.clean_object_prob, 1e-5);
  }
}

TEST_F(Pipeline, TraceGridMatchesOracle) {
  const auto cfg = load_model_config(fixture("config.json"));
  const auto tensors = read_safetensors(fixture("model.safetensors"));
  const oracle::Model om(cfg, tensors);
  const auto noise = noise_from_json(read_text_file(out("noise.json")));
  const auto grid = grid_from_files(read_text_file(out("trace_grid.csv")), read_text_file(out("trace_grid.json")));
  const auto cs = cases();
  ASSERT_EQ(grid.num_prompts, cs.size());
  const std::pair<HookKind, oracle::Kind> kinds[] = {
      {HookKind::hidden, oracle::Kind::hidden}, {HookKind::attn_out, oracle::Kind::attn}, {HookKind::mlp_out, oracle::Kind::mlp}};
  for (auto role : {TokenRole::last_subject, TokenRole::last}) {
    for (const auto& [kind, okind] : kinds) {
      for (int l = 0; l < cfg.num_layers; ++l) {
        double sum = 0.0;
        for (const auto& pc : cs) {
          std::vector<std::uint64_t> seeds;
          for (std::size_t s = 0; s < 3; ++s) seeds.push_back(sample_seed(case_seed(3, pc), s));
          const std::size_t pos = role == TokenRole::last ? pc.last_position() : pc.subject_span.last;
          sum += oracle::restoration_ie(om, oracle_case(pc), static_cast<float>(noise.nu), seeds, {{okind, l, pos}});
        }
        EXPECT_NEAR(grid.at(role, l, kind).aie, sum / cs.size(), 1e-5) << to_string(role) << " " << l;
      }
    }
  }
}

TEST_F(Pipeline, SeverWithEmptyLayerSetEqualsTraceValues) {
  const auto dir = root_ / "sever_none";
  fs::remove_all(dir);
  fs::create_directories(dir);
  fs::copy_file(out("cases.jsonl"), dir / "cases.jsonl");
  fs::copy_file(out("noise.json"), dir / "noise.json");
  const auto r = cli("sever --config " + testproc::quote(run_json_.string()) + " --out " + testproc::quote(dir.string()) +
                     " --layers ''");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto grid = grid_from_files(read_text_file(out("trace_grid.csv")), read_text_file(out("trace_grid.json")));
  for (const std::string kind : {"attn_out", "mlp_out"}) {
    const auto rows = csv_rows(dir / ("sever_" + kind + ".csv"));
    ASSERT_EQ(rows.size(), 2u);
    for (int l = 0; l < 2; ++l) {
      EXPECT_EQ(rows[l][1], format_double(grid.at(TokenRole::last_subject, l, HookKind::hidden).aie));
    }
  }
}

TEST_F(Pipeline, KnockoutAndObjectsRateMatchOracle) {
  const auto cfg = load_model_config(fixture("config.json"));
  const auto tensors = read_safetensors(fixture("model.safetensors"));
  const oracle::Model om(cfg, tensors);
  const auto tok = Tokenizer::from_files(fixture("vocab.json"), fixture("merges.txt"));
  const auto table = EmbeddingTable::load(fixture("embeddings.bin"));
  const auto cs = cases();
  const auto sets = build_candidate_sets(tok, load_corpus(fixture("corpus.jsonl")), cs,
                                         load_stopwords(fixture("stopwords.txt")), {5, 0.5});
  auto rate_of = [&](const std::vector<double>& probs, const PromptCase& pc) {
    return objects_rate(table, decode_each(tok, oracle_topk(probs, 10)), sets.at(pc.triple.subject), 0.7);
  };
  const std::pair<std::string, oracle::Kind> targets[] = {{"attn_out", oracle::Kind::attn}, {"mlp_out", oracle::Kind::mlp}};
  for (const auto& [name, okind] : targets) {
    const auto rows = csv_rows(out("knockout_" + name + ".csv"));
    ASSERT_EQ(rows.size(), 2u);
    for (int l = 0; l < 2; ++l) {
      double sum = 0.0;
      for (const auto& pc : cs) {
        std::vector<oracle::Site> zeroed;
        for (int x = l; x <= std::min(l + 4, 1); ++x) zeroed.push_back({okind, x, pc.subject_span.last});
        sum += rate_of(oracle::knockout_probs(om, {pc.tokens.begin(), pc.tokens.end()}, zeroed), pc);
      }
      EXPECT_NEAR(std::stod(rows[l][1]), sum / cs.size(), 1e-9) << name << " layer " << l;
    }
  }
  const auto obj = json::parse(read_text_file(out("objrate.json")));
  double clean = 0.0;
  for (std::size_t i = 0; i < cs.size(); ++i) {
    const double r = rate_of(om.run({cs[i].tokens.begin(), cs[i].tokens.end()}).probs, cs[i]);
    EXPECT_NEAR(obj["cases"][i]["objects_rate"].get<double>(), r, 1e-9);
    clean += r;
  }
  EXPECT_NEAR(obj["mean_objects_rate"].get<double>(), clean / cs.size(), 1e-9);
  const auto ko = json::parse(read_text_file(out("knockout.json")));
  EXPECT_EQ(ko["clean_rate"]["mlp_out"].get<double>(), obj["mean_objects_rate"].get<double>());
}

TEST_F(Pipeline, GiniReportMatchesProfileRecomputation) {
  const auto g = json::parse(read_text_file(out("gini.json")));
  for (const std::string kind : {"attn_out", "mlp_out"}) {
    const auto p = profile_from_csv(read_text_file(out("profile_" + kind + ".csv")), parse_hook_kind(kind));
    EXPECT_EQ(g["profiles"][kind]["gini"].get<double>(), gini(p));
    EXPECT_EQ(g["profiles"][kind]["peak_layer"].get<std::size_t>(), peak_layer(p));
  }
  const auto d = json::parse(read_text_file(out("drop_report.json")));
  for (const auto& [kind, r] : d["reports"].items()) {
    const double base = r["baseline_aie"], sev = r["severed_aie"];
    if (base > 0) EXPECT_DOUBLE_EQ(r["drop_rate"].get<double>(), (base - sev) / base * 100.0);
    else EXPECT_TRUE(r["drop_rate"].is_null());
  }
}

TEST_F(Pipeline, RerunIsByteIdenticalAcrossThreadCounts) {
  const auto dir = root_ / "rerun";
  fs::remove_all(dir);
  for (const auto& cmd : kPipeline) {
    const auto r = cli(cmd + " --threads 3 --config " + testproc::quote(run_json_.string()) + " --out " +
                       testproc::quote(dir.string()));
    ASSERT_EQ(r.code, 0) << r.err;
  }
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(root_ / "out")) {
    if (!e.is_regular_file()) continue;
    ++n;
    EXPECT_EQ(read_text_file(e.path()), read_text_file(dir / e.path().filename())) << e.path();
  }
  EXPECT_GE(n, 20u);
}

TEST(Cli, GiniOnOneHotProfile) {
  const auto dir = testproc::scratch_dir("factrace_cli_gini");
  fs::remove_all(dir);
  std::string csv = "layer,value\n";
  for (int l = 0; l < 28; ++l) csv += std::to_string(l) + (l == 11 ? ",1\n" : ",0\n");
  write_text_file(dir / "onehot.csv", csv);
  const auto r = cli("gini --profile " + testproc::quote((dir / "onehot.csv").string()) + " --out " +
                     testproc::quote((dir / "out").string()));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto g = json::parse(read_text_file(dir / "out" / "gini.json"));
  EXPECT_NEAR(g["profiles"]["mlp_out"]["gini"].get<double>(), 0.9643, 1e-4);
  EXPECT_NEAR(g["profiles"]["mlp_out"]["gini"].get<double>(), 27.0 / 28.0, 1e-9);
  EXPECT_EQ(g["profiles"]["mlp_out"]["peak_layer"], 11);
}

class CliErrors : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = testproc::scratch_dir("factrace_cli_errors");
    fs::remove_all(dir_);
    run_json_ = toy::write_fixture(dir_ / "fixture", 5);
  }
  json config() const { return json::parse(read_text_file(run_json_)); }
  testproc::Result with_config(const std::string& cmd, const json& cfg, const std::string& extra = "") {
    const auto p = dir_ / "fixture" / "edited.json";
    write_text_file(p, cfg.dump());
    return cli(cmd + " --config " + testproc::quote(p.string()) + " --out " + testproc::quote((dir_ / "out").string()) +
               " " + extra);
  }
  fs::path dir_;
  fs::path run_json_;
};

TEST_F(CliErrors, ConfigErrorsExitWithTwoBeforeModelLoad) {
  auto cfg = config();
  cfg["dataset"] = "does_not_exist.json";
  auto r = with_config("prep", cfg);
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(last_error(r)["error"]["kind"], "InvalidConfig");
  EXPECT_EQ(last_error(r)["error"]["class"], "config");
  EXPECT_EQ(r.err.find("loading model"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir_ / "out" / "cases.jsonl"));

  cfg = config();
  cfg["surprise"] = 1;
  EXPECT_EQ(with_config("prep", cfg).code, 2);
  cfg = config();
  cfg["n_cases"] = 0;
  EXPECT_EQ(with_config("prep", cfg).code, 2);
  cfg = config();
  cfg["tau"] = "high";
  EXPECT_EQ(with_config("objrate", cfg).code, 2);
  EXPECT_EQ(cli("prep").code, 2);
  EXPECT_EQ(cli("nonsense").code, 2);
  EXPECT_EQ(with_config("sever", config(), "--scope sideways").code, 2);
}

TEST_F(CliErrors, DataErrorsExitWithThree) {
  auto r = with_config("trace", config());
  EXPECT_EQ(r.code, 3);
  EXPECT_EQ(last_error(r)["error"]["kind"], "MissingPrerequisite");
  auto cfg = config();
  cfg["n_cases"] = 10000;
  r = with_config("prep", cfg);
  EXPECT_EQ(r.code, 3);
  EXPECT_EQ(last_error(r)["error"]["kind"], "InsufficientCases");
  EXPECT_EQ(last_error(r)["error"]["requested"], 10000);
  EXPECT_GT(last_error(r)["error"]["found"].get<int>(), 0);
  write_text_file(dir_ / "fixture" / "counterfact.json", "[{\"broken\": true}]");
  EXPECT_EQ(with_config("prep", config()).code, 3);
}

TEST_F(CliErrors, EngineErrorsExitWithFour) {
  ASSERT_EQ(with_config("prep", config()).code, 0);
  const auto r = with_config("sever", config(), "--layers 7");
  EXPECT_EQ(r.code, 4);
  EXPECT_EQ(last_error(r)["error"]["kind"], "SiteOutOfRange");
  EXPECT_EQ(last_error(r)["error"]["class"], "engine");
}
