#pragma once

#include "pgs/config.hpp"
#include "pgs/core.hpp"
#include "pgs/deformable_scale.hpp"
#include "pgs/feature_codec.hpp"
#include "pgs/global_refine.hpp"
#include "pgs/graph_builder.hpp"
#include "pgs/image_io.hpp"
#include "pgs/message_passing.hpp"
#include "pgs/nn.hpp"
#include "pgs/objective.hpp"
#include "pgs/params.hpp"
#include "pgs/patch_ops.hpp"
#include "pgs/trainer.hpp"
