// Everything: tensors, autodiff, layers, attention, model, quantization, data and training.
#pragma once

#include "attention.hpp"
#include "autodiff.hpp"
#include "checkpoint.hpp"
#include "data.hpp"
#include "half.hpp"
#include "kernels.hpp"
#include "model.hpp"
#include "ops.hpp"
#include "parallel.hpp"
#include "quantization.hpp"
#include "tensor.hpp"
#include "train.hpp"
