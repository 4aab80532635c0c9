#pragma once

#include "transmil/attention.hpp"
#include "transmil/bench.hpp"
#include "transmil/binary_io.hpp"
#include "transmil/data.hpp"
#include "transmil/errors.hpp"
#include "transmil/gradcheck.hpp"
#include "transmil/mil.hpp"
#include "transmil/model.hpp"
#include "transmil/ops.hpp"
#include "transmil/ppeg.hpp"
#include "transmil/tensor.hpp"
#include "transmil/train.hpp"
