#pragma once

#include "mechkit/rng.hpp"
#include "mechkit/stats.hpp"
#include "mechkit/core.hpp"
#include "mechkit/bernoulli.hpp"
#include "mechkit/matching.hpp"
#include "mechkit/transform_dc.hpp"
#include "mechkit/transform_general.hpp"
#include "mechkit/verify.hpp"
#include "mechkit/io.hpp"
#include "mechkit/instances.hpp"
#include "mechkit/scenarios.hpp"
#include "mechkit/experiment.hpp"
