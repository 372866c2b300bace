#pragma once

#include "dmh/rng.hpp"
#include "dmh/model.hpp"
#include "dmh/proposal.hpp"
#include "dmh/chain.hpp"
#include "dmh/functionals.hpp"
#include "dmh/estimator.hpp"
#include "dmh/diagnostics.hpp"
#include "dmh/optimize.hpp"
#include "dmh/bayes.hpp"
