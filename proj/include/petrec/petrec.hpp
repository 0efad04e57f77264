#pragma once

#include "petrec/autodiff.hpp"
#include "petrec/config.hpp"
#include "petrec/core.hpp"
#include "petrec/io.hpp"
#include "petrec/kernels.hpp"
#include "petrec/metrics.hpp"
#include "petrec/phantom.hpp"
#include "petrec/pipeline.hpp"
#include "petrec/projector.hpp"
#include "petrec/regularizer.hpp"
#include "petrec/rng.hpp"
#include "petrec/solvers.hpp"
#include "petrec/trainer.hpp"
