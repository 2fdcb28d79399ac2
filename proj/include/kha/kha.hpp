#pragma once

#include "kha/attention.hpp"
#include "kha/checkpoint.hpp"
#include "kha/flops.hpp"
#include "kha/gemm.hpp"
#include "kha/knocking.hpp"
#include "kha/model.hpp"
#include "kha/ops.hpp"
#include "kha/runspec.hpp"
#include "kha/tensor.hpp"
#include "kha/trainer.hpp"
