#pragma once

#include "sbi/rng.hpp"
#include "sbi/parallel.hpp"
#include "sbi/models.hpp"
#include "sbi/cde.hpp"
#include "sbi/draws.hpp"
#include "sbi/io.hpp"
#include "sbi/kdtree.hpp"
#include "sbi/metrics.hpp"
#include "sbi/mcmc.hpp"
#include "sbi/oracle.hpp"
#include "sbi/inference.hpp"
#include "sbi/harness.hpp"
