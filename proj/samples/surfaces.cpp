// Prints f1 and f2 along the diagonal and the largest f2 - f1 gap.
#include <cstdio>

#include "sortnet/fusion.hpp"

int main() {
  using namespace sortnet;
  const GridSpec grid{-2.0, 2.0, 0.5};
  for (double t : grid.points()) {
    std::printf("x=y=%5.2f  f1=%7.3f  f2=%7.3f\n", t, surface_value(SurfaceKind::LinearRelu, t, t),
                surface_value(SurfaceKind::SecondOrder, t, t));
  }
  const auto f1 = nonlinearity_surface(SurfaceKind::LinearRelu, GridSpec{});
  const auto f2 = nonlinearity_surface(SurfaceKind::SecondOrder, GridSpec{});
  double gap = 0.0;
  for (std::size_t i = 0; i < f1.size(); ++i) gap = f2[i].value - f1[i].value > gap ? f2[i].value - f1[i].value : gap;
  std::printf("%zu grid points, max f2 - f1 = %.3f\n", f1.size(), gap);
}
