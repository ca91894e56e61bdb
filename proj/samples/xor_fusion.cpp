// A two-branch MLP on XOR with and without the product term.
#include <cstdio>

#include "sortnet/data.hpp"
#include "sortnet/netspec.hpp"
#include "sortnet/network.hpp"
#include "sortnet/train.hpp"

int main() {
  using namespace sortnet;
  const DatasetHandle train_set = make_synthetic(SyntheticKind::Xor, 400, 3);
  const DatasetHandle test_set = make_synthetic(SyntheticKind::Xor, 200, 4);
  TrainConfig cfg;
  cfg.sections = {{0.05, 1500}};
  cfg.batch_size = 50;
  for (const FusionSpec& fusion : {FusionSpec::linear(), FusionSpec::sort_branched()}) {
    Network net(build_branch_mlp(2, 4, 2, fusion), 7);
    train(net, train_set, nullptr, cfg);
    std::printf("%-9s test error %.1f%%\n", fusion.terms().c_str(), evaluate(net, test_set).error_pct);
  }
}
