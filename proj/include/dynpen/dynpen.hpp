#pragma once

#include "dynpen/agent.hpp"
#include "dynpen/config.hpp"
#include "dynpen/constraints.hpp"
#include "dynpen/envs.hpp"
#include "dynpen/harness.hpp"
#include "dynpen/mlp.hpp"
#include "dynpen/penalty.hpp"
#include "dynpen/replay.hpp"
#include "dynpen/rng.hpp"
