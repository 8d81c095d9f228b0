#pragma once

#include "cglbench/backbone.hpp"
#include "cglbench/data.hpp"
#include "cglbench/gem.hpp"
#include "cglbench/methods.hpp"
#include "cglbench/metrics.hpp"
#include "cglbench/orchestrator.hpp"
#include "cglbench/random.hpp"
#include "cglbench/tensor.hpp"
