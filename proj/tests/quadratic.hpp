#pragma once

#include "imaml/oracles.hpp"
#include "testing.hpp"

namespace imaml::testing {

using oracles::QuadraticObjective;
using oracles::random_spd;
using oracles::random_vec;

}  // namespace imaml::testing
