#pragma once

#include "cam/error.hpp"
#include "cam/random.hpp"
#include "cam/parallel.hpp"
#include "cam/diffcore.hpp"
#include "cam/worlds.hpp"
#include "cam/graph.hpp"
#include "cam/cam_core.hpp"
#include "cam/rollout.hpp"
#include "cam/trainer.hpp"
#include "cam/evaluator.hpp"
#include "cam/checkpoint.hpp"
#include "cam/gradcheck.hpp"
#include "cam/config.hpp"
#include "cam/commands.hpp"
#include "cam/runtime.hpp"
