// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "pathcast/error.hpp"
#include "pathcast/rng.hpp"
#include "pathcast/labelgraph.hpp"
#include "pathcast/pathalg.hpp"
#include "pathcast/numerics.hpp"
#include "pathcast/model.hpp"
#include "pathcast/dataset.hpp"
#include "pathcast/trainer.hpp"
#include "pathcast/evaldecode.hpp"
#include "pathcast/harness.hpp"
