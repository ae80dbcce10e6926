// Runs Basic Network I + II in inference mode on a fixed input and writes the
// raw float64 output, for comparison against the reference implementation.
#include <cmath>
#include <cstdio>
#include <fstream>

#include "cmnet/backbones.hpp"
#include "cmnet/serialization.hpp"

int main(int argc, char** argv) {
  using namespace cmnet;
  if (argc != 4) {
    std::fprintf(stderr, "usage: dump_backbone TABLE SIZE OUT\n");
    return 2;
  }
  Rng rng(3);
  const ModelConfig cfg;
  auto stem = build_basic_network_i<double>(cfg, rng);
  auto tail = build_basic_network_ii<double>(cfg, rng);
  const TensorTable table = load_tensor_table(argv[1]);
  stem->load_from(table);
  tail->load_from(table);
  const std::size_t side = std::stoul(argv[2]);
  Tensor<double> x({1, 3, side, side});
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = std::sin(0.37 * static_cast<double>(i));
  NoGradGuard guard;
  const Var<double> y = (*tail)((*stem)(Var<double>(x), false), false);
  std::ofstream out(argv[3], std::ios::binary);
  out.write(reinterpret_cast<const char*>(y.value().data()),
            static_cast<std::streamsize>(y.value().numel() * sizeof(double)));
  return out ? 0 : 1;
}
