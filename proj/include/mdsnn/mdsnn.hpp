#pragma once

#include "mdsnn/autodiff.hpp"
#include "mdsnn/checkpoint.hpp"
#include "mdsnn/config.hpp"
#include "mdsnn/data.hpp"
#include "mdsnn/distillation.hpp"
#include "mdsnn/error.hpp"
#include "mdsnn/flops.hpp"
#include "mdsnn/lif.hpp"
#include "mdsnn/metrics.hpp"
#include "mdsnn/network.hpp"
#include "mdsnn/ops.hpp"
#include "mdsnn/optim.hpp"
#include "mdsnn/quantization.hpp"
#include "mdsnn/surrogate.hpp"
#include "mdsnn/tensor.hpp"
#include "mdsnn/trainer.hpp"
