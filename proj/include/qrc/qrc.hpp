#pragma once

// Umbrella header for the proposal-generation / query-guided-regression /
// context-policy grounding stack.

#include "qrc/ablate.hpp"
#include "qrc/checkpoint.hpp"
#include "qrc/config.hpp"
#include "qrc/cpn.hpp"
#include "qrc/geometry.hpp"
#include "qrc/gradcheck.hpp"
#include "qrc/gradsuite.hpp"
#include "qrc/metrics.hpp"
#include "qrc/nn.hpp"
#include "qrc/optim.hpp"
#include "qrc/params.hpp"
#include "qrc/pgn.hpp"
#include "qrc/pipeline.hpp"
#include "qrc/qrn.hpp"
#include "qrc/rng.hpp"
#include "qrc/synthdata.hpp"
#include "qrc/tape.hpp"
#include "qrc/tensor.hpp"
