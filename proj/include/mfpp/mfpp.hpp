#pragma once

#include "mfpp/error.hpp"
#include "mfpp/evaluation.hpp"
#include "mfpp/image.hpp"
#include "mfpp/mask_pyramid.hpp"
#include "mfpp/model.hpp"
#include "mfpp/render.hpp"
#include "mfpp/saliency.hpp"
#include "mfpp/segmentation.hpp"
#include "mfpp/synthetic.hpp"
#include "mfpp/version.hpp"
