#pragma once

#include "hilat/checkpoint.hpp"
#include "hilat/encoder.hpp"
#include "hilat/error.hpp"
#include "hilat/explain.hpp"
#include "hilat/metrics.hpp"
#include "hilat/model.hpp"
#include "hilat/rng.hpp"
#include "hilat/synthgen.hpp"
#include "hilat/tensor.hpp"
#include "hilat/textprep.hpp"
#include "hilat/train.hpp"
