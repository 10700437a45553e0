#pragma once

#include "twofold/nn/backprop.hpp"
#include "twofold/nn/checkpoint.hpp"
#include "twofold/nn/gradcheck.hpp"
#include "twofold/nn/layer.hpp"
#include "twofold/nn/loss.hpp"
#include "twofold/nn/network.hpp"
#include "twofold/nn/types.hpp"
