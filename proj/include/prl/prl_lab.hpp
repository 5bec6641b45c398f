#ifndef PRL_PRL_LAB_HPP_
#define PRL_PRL_LAB_HPP_

// Umbrella header.

#include "prl/core.hpp"
#include "prl/env.hpp"
#include "prl/oracle.hpp"
#include "prl/policy.hpp"
#include "prl/prl.hpp"
#include "prl/records.hpp"
#include "prl/rng.hpp"
#include "prl/trainer.hpp"

#endif  // PRL_PRL_LAB_HPP_
