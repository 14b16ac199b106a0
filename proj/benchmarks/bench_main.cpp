#include <benchmark/benchmark.h>

#include <random>

#include "factrace/analysis.hpp"
#include "factrace/facteval.hpp"
#include "factrace/tracing.hpp"
#include "toy.hpp"

using namespace factrace;

namespace {

toy::Model bench_model(int layers, int d_model) {
  toy::ModelSpec spec;
  spec.num_layers = layers;
  spec.d_model = d_model;
  spec.num_heads = 4;
  spec.d_ff = 4 * d_model;
  return toy::make_model(spec);
}

void BM_Forward(benchmark::State& state) {
  const auto m = bench_model(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
  std::mt19937_64 rng(1);
  std::vector<TokenId> tokens(16);
  for (auto& t : tokens) t = static_cast<TokenId>(rng() % m.config.vocab_size);
  ForwardOptions opt;
  opt.last_logits_only = true;
  for (auto _ : state) benchmark::DoNotOptimize(forward(m.bundle, tokens, {}, {}, opt));
}
BENCHMARK(BM_Forward)->Args({2, 8})->Args({6, 64})->Args({12, 128});

void BM_TraceGrid(benchmark::State& state) {
  const auto m = toy::make_model({});
  const auto facts = toy::model_facts(m.bundle);
  const auto cases = filter_correct(m.bundle, facts, 5, 1);
  const auto noise = estimate_sigma(m.bundle, facts);
  TraceOptions opt;
  opt.samples = 3;
  for (auto _ : state) benchmark::DoNotOptimize(trace_grid(m.bundle, cases, noise, opt));
}
BENCHMARK(BM_TraceGrid);

void BM_Bm25Rank(benchmark::State& state) {
  static const char* words[] = {"river", "delta", "tower", "paris", "stone", "music", "opera", "camel",
                                "glass", "north", "ember", "piano", "harbor", "lantern", "violet", "quartz"};
  std::mt19937_64 rng(2);
  std::vector<Document> docs;
  for (std::int64_t i = 0; i < state.range(0); ++i) {
    std::string text;
    for (int j = 0; j < 60; ++j) text += std::string(j ? " " : "") + words[rng() % 16];
    docs.push_back({static_cast<std::uint64_t>(i), "", text});
  }
  const Corpus corpus(docs);
  for (auto _ : state) benchmark::DoNotOptimize(bm25_rank(corpus, "paris tower opera", 20));
}
BENCHMARK(BM_Bm25Rank)->Arg(100)->Arg(10000);

void BM_Gini(benchmark::State& state) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> x(static_cast<std::size_t>(state.range(0)));
  for (auto& v : x) v = u(rng);
  for (auto _ : state) benchmark::DoNotOptimize(gini(x));
}
BENCHMARK(BM_Gini)->Arg(28)->Arg(1024);

}  // namespace
BENCHMARK_MAIN();
