// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "g2p2/autograd.hpp"
#include "g2p2/checkpoint.hpp"
#include "g2p2/common.hpp"
#include "g2p2/conditional.hpp"
#include "g2p2/config.hpp"
#include "g2p2/corpus.hpp"
#include "g2p2/encoders.hpp"
#include "g2p2/eval.hpp"
#include "g2p2/optim.hpp"
#include "g2p2/pretrain.hpp"
#include "g2p2/prompting.hpp"
