#pragma once

#include "yoloface/tensor.hpp"
#include "yoloface/ops.hpp"
#include "yoloface/params.hpp"
#include "yoloface/blocks.hpp"
#include "yoloface/datapipe.hpp"
#include "yoloface/detect.hpp"
#include "yoloface/model.hpp"
#include "yoloface/losses.hpp"
#include "yoloface/evalkit.hpp"
#include "yoloface/archive.hpp"
