#pragma once

#include "worldtrack/error.hpp"
#include "worldtrack/lie.hpp"
#include "worldtrack/geometry.hpp"
#include "worldtrack/parallel.hpp"
#include "worldtrack/camera_solver.hpp"
#include "worldtrack/losses.hpp"
#include "worldtrack/adaptation.hpp"
#include "worldtrack/oracle.hpp"
#include "worldtrack/bench.hpp"
#include "worldtrack/sequence_io.hpp"
#include "worldtrack/gradcheck.hpp"
#include "worldtrack/report_io.hpp"
