#pragma once

#include "sgm/errors.hpp"
#include "sgm/geometry.hpp"
#include "sgm/graph.hpp"
#include "sgm/instances.hpp"
#include "sgm/io.hpp"
#include "sgm/matching.hpp"
#include "sgm/metrics.hpp"
#include "sgm/nets.hpp"
#include "sgm/optim.hpp"
#include "sgm/pipeline.hpp"
#include "sgm/tensor.hpp"
#include "sgm/training.hpp"
