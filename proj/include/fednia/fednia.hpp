#pragma once

#include "fednia/aggregate.hpp"
#include "fednia/attacks.hpp"
#include "fednia/common.hpp"
#include "fednia/config.hpp"
#include "fednia/data.hpp"
#include "fednia/defense.hpp"
#include "fednia/engine.hpp"
#include "fednia/eval.hpp"
#include "fednia/experiment.hpp"
#include "fednia/nn.hpp"
#include "fednia/report.hpp"
#include "fednia/serialize.hpp"
#include "fednia/synth.hpp"
