#pragma once

#include "fedcada/config.hpp"
#include "fedcada/data.hpp"
#include "fedcada/errors.hpp"
#include "fedcada/experiment.hpp"
#include "fedcada/federation.hpp"
#include "fedcada/io.hpp"
#include "fedcada/metrics.hpp"
#include "fedcada/nn.hpp"
#include "fedcada/optim.hpp"
#include "fedcada/rng.hpp"
