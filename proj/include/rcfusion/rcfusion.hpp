// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header.
#pragma once

#include "rcfusion/error.hpp"
#include "rcfusion/tensor.hpp"
#include "rcfusion/parallel.hpp"
#include "rcfusion/random.hpp"
#include "rcfusion/ops.hpp"
#include "rcfusion/gradcheck.hpp"
#include "rcfusion/rcft.hpp"
#include "rcfusion/layers.hpp"
#include "rcfusion/checkpoint.hpp"
#include "rcfusion/fusion.hpp"
#include "rcfusion/optim.hpp"
#include "rcfusion/png_io.hpp"
#include "rcfusion/data.hpp"
#include "rcfusion/config.hpp"
#include "rcfusion/harness.hpp"
