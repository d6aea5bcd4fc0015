#pragma once

#include "lvae/checkpoint.hpp"
#include "lvae/data.hpp"
#include "lvae/harness.hpp"
#include "lvae/losses.hpp"
#include "lvae/metrics.hpp"
#include "lvae/nets.hpp"
#include "lvae/optim.hpp"
#include "lvae/rng.hpp"
#include "lvae/tensor.hpp"
