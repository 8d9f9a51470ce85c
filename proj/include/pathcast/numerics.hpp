// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "pathcast/numerics/adam.hpp"
#include "pathcast/numerics/checkpoint.hpp"
#include "pathcast/numerics/layers.hpp"
#include "pathcast/numerics/tape.hpp"
#include "pathcast/numerics/tensor.hpp"
