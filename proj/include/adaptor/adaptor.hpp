#pragma once

#include "adaptor/errors.hpp"
#include "adaptor/tensor.hpp"
#include "adaptor/ops.hpp"
#include "adaptor/adaptor_net.hpp"
#include "adaptor/objective.hpp"
#include "adaptor/binary_io.hpp"
#include "adaptor/data_pipeline.hpp"
#include "adaptor/config.hpp"
#include "adaptor/trainer.hpp"
#include "adaptor/eval_probe.hpp"
