#pragma once

#include "tinyhd/tensor.hpp"
#include "tinyhd/autograd.hpp"
#include "tinyhd/optim.hpp"
#include "tinyhd/geometry.hpp"
#include "tinyhd/nn.hpp"
#include "tinyhd/profiler.hpp"
#include "tinyhd/model.hpp"
#include "tinyhd/dataio.hpp"
#include "tinyhd/metrics.hpp"
#include "tinyhd/distill.hpp"
#include "tinyhd/config.hpp"
