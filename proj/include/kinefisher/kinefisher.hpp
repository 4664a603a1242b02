#pragma once

#include "kinefisher/constants.hpp"
#include "kinefisher/errors.hpp"
#include "kinefisher/rng.hpp"
#include "kinefisher/so3.hpp"
#include "kinefisher/quadrature.hpp"
#include "kinefisher/matrix_fisher.hpp"
#include "kinefisher/sampler.hpp"
#include "kinefisher/body_model.hpp"
#include "kinefisher/pose_distributions.hpp"
#include "kinefisher/losses.hpp"
#include "kinefisher/fitting.hpp"
#include "kinefisher/io.hpp"
