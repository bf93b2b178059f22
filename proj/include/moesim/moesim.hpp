// Copyright (c) 2026 moesim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "moesim/bitwidth.hpp"
#include "moesim/commands.hpp"
#include "moesim/config.hpp"
#include "moesim/core.hpp"
#include "moesim/experiment.hpp"
#include "moesim/placement.hpp"
#include "moesim/quantize.hpp"
#include "moesim/rng.hpp"
#include "moesim/simulator.hpp"
#include "moesim/stats.hpp"
#include "moesim/trace.hpp"
