#pragma once

// Umbrella header.

#include "uld/data.hpp"
#include "uld/decode.hpp"
#include "uld/engine.hpp"
#include "uld/errors.hpp"
#include "uld/eval.hpp"
#include "uld/model.hpp"
#include "uld/objectives.hpp"
#include "uld/rng.hpp"
#include "uld/tensor.hpp"
