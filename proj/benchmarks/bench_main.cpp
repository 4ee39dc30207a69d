#include <benchmark/benchmark.h>

#include "fedprior/ar_transformer.hpp"
#include "fedprior/datasets.hpp"
#include "fedprior/federation.hpp"
#include "fedprior/imaging.hpp"
#include "fedprior/recon_models.hpp"
#include "fedprior/vq_codec.hpp"

namespace {

using namespace fedprior;

Tensor phantom(std::size_t n) { return data::gen_phantom(data::default_sites(1)[1], 0, n, n); }

void BM_Dft2(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor x = phantom(n);
  for (auto _ : state) benchmark::DoNotOptimize(imaging::dft2(x));
}
BENCHMARK(BM_Dft2)->Arg(16)->Arg(32)->Arg(64);

void BM_ForwardAdjoint(benchmark::State& state) {
  const auto coils = static_cast<std::size_t>(state.range(0));
  const Tensor x = phantom(32);
  const imaging::ImagingOperator op(imaging::gen_vd_mask(32, 32, 4.0, 2, 1),
                                    coils == 1 ? imaging::CoilSet::unit(32, 32) : imaging::gen_coils(32, 32, coils, 2));
  for (auto _ : state) benchmark::DoNotOptimize(imaging::adjoint_op(imaging::forward_op(x, op), op));
}
BENCHMARK(BM_ForwardAdjoint)->Arg(1)->Arg(4);

void BM_Quantize(benchmark::State& state) {
  Rng rng(3);
  Tensor v({64, 16}), cb({128, 16});
  for (auto& e : v.values()) e = rng.normal();
  for (auto& e : cb.values()) e = rng.normal();
  for (auto _ : state) benchmark::DoNotOptimize(vq::quantize(v, cb));
}
BENCHMARK(BM_Quantize);

void BM_CodecEncode(benchmark::State& state) {
  const vq::CodecConfig cfg;
  const vq::Codec codec(cfg, vq::init_codec(cfg, 1));
  const Tensor x = phantom(32);
  for (auto _ : state) benchmark::DoNotOptimize(codec.encode_multiscale(x));
}
BENCHMARK(BM_CodecEncode)->Unit(benchmark::kMillisecond);

void BM_TransformerForward(benchmark::State& state) {
  const vq::CodecConfig cc;
  const vq::Codec codec(cc, vq::init_codec(cc, 1));
  const ar::TransformerConfig tc;
  const ParamSet p = ar::init_transformer(tc, 2);
  const auto f = codec.encode_multiscale(phantom(32));
  for (auto _ : state) benchmark::DoNotOptimize(ar::forward(p, tc, f, 1));
}
BENCHMARK(BM_TransformerForward)->Unit(benchmark::kMillisecond);

void BM_ReconForward(benchmark::State& state) {
  const auto family = static_cast<recon::Family>(state.range(0));
  const recon::ArchSpec spec{family, family == recon::Family::unrolled ? 5u : 3u, 16, 0.05};
  const auto model = recon::build_model(spec, 0, 1);
  const auto tr = recon::make_triple(phantom(32), recon::OperatorPool{{4.0}, 0, 1, 4}.draw(32, 32, 0));
  for (auto _ : state) benchmark::DoNotOptimize(recon::forward_recon(model, tr));
  state.SetLabel(recon::family_name(family));
}
BENCHMARK(BM_ReconForward)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);

void BM_Aggregate(benchmark::State& state) {
  const ar::TransformerConfig tc;
  std::vector<ParamSet> locals;
  for (std::uint64_t k = 0; k < 3; ++k) locals.push_back(ar::init_transformer(tc, k));
  const std::vector<double> w{0.2, 0.3, 0.5};
  for (auto _ : state) benchmark::DoNotOptimize(fed::aggregate(locals, w));
}
BENCHMARK(BM_Aggregate)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
