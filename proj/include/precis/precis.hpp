#pragma once

#include "precis/bagus.hpp"
#include "precis/csv.hpp"
#include "precis/diagnostics.hpp"
#include "precis/error.hpp"
#include "precis/graph.hpp"
#include "precis/ingest.hpp"
#include "precis/iro.hpp"
#include "precis/linalg.hpp"
#include "precis/metrics.hpp"
#include "precis/model.hpp"
#include "precis/parallel.hpp"
#include "precis/rng.hpp"
#include "precis/simgen.hpp"
