#pragma once

#include "fuller/calibration.hpp"
#include "fuller/errors.hpp"
#include "fuller/finite_difference.hpp"
#include "fuller/grad_check.hpp"
#include "fuller/metrics.hpp"
#include "fuller/model.hpp"
#include "fuller/params.hpp"
#include "fuller/rng.hpp"
#include "fuller/synthbench.hpp"
#include "fuller/tape.hpp"
#include "fuller/tensor.hpp"
#include "fuller/trainer.hpp"
