#include <benchmark/benchmark.h>

#include "mindprobe/model.hpp"

namespace {

void BM_Forward(benchmark::State& state) {
  mindprobe::ModelConfig c;
  c.vocab_size = 400;
  const auto w = mindprobe::build_model(c);
  std::vector<mindprobe::TokenId> tokens(static_cast<std::size_t>(state.range(0)));
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<mindprobe::TokenId>(i % 400);
  for (auto _ : state) benchmark::DoNotOptimize(mindprobe::forward_with_hooks(w, tokens));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Forward)->Arg(32)->Arg(128)->Arg(256);

}  // namespace
BENCHMARK_MAIN();
