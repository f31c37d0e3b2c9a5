#pragma once

#include "destine/attention.hpp"
#include "destine/checkpoint.hpp"
#include "destine/cli.hpp"
#include "destine/config.hpp"
#include "destine/errors.hpp"
#include "destine/features.hpp"
#include "destine/model.hpp"
#include "destine/numerics.hpp"
#include "destine/synth.hpp"
#include "destine/training.hpp"
