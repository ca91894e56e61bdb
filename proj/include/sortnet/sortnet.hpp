#pragma once

#include "sortnet/error.hpp"
#include "sortnet/rng.hpp"
#include "sortnet/tensor.hpp"
#include "sortnet/tape.hpp"
#include "sortnet/ops.hpp"
#include "sortnet/gradcheck.hpp"
#include "sortnet/fusion.hpp"
#include "sortnet/netspec.hpp"
#include "sortnet/network.hpp"
#include "sortnet/data.hpp"
#include "sortnet/train.hpp"
#include "sortnet/audit.hpp"
#include "sortnet/bench.hpp"
#include "sortnet/experiment.hpp"
