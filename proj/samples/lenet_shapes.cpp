// Shapes, receptive fields and parameter counts of the LeNet variants.
#include <cstdio>
#include <string>

#include "sortnet/netspec.hpp"

int main() {
  using namespace sortnet;
  for (bool star : {false, true}) {
    for (bool sort : {false, true}) {
      if (sort && !star) continue;
      const NetworkSpec net = build_lenet(star, sort);
      std::printf("%s: %zu parameters\n", net.name.c_str(), count_params(net));
      for (const auto& e : receptive_field(net)) {
        std::printf("  %2zu %-14s rf %3zu  jump %2zu  out %s\n", e.index, e.kind.c_str(), e.rf,
                    e.jump, shape_str(e.out_shape).c_str());
      }
    }
  }
}
