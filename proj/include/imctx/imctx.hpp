#pragma once

#include "imctx/analysis.hpp"
#include "imctx/bench.hpp"
#include "imctx/common.hpp"
#include "imctx/data.hpp"
#include "imctx/experiment.hpp"
#include "imctx/external.hpp"
#include "imctx/io.hpp"
#include "imctx/predict.hpp"
#include "imctx/resample.hpp"
#include "imctx/retrieval.hpp"
#include "imctx/svg.hpp"
#include "imctx/transform.hpp"
#include "imctx/transformer.hpp"
