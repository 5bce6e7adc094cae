#pragma once

#include "yose/tensor.hpp"
#include "yose/tensorio.hpp"
#include "yose/numerics.hpp"
#include "yose/bvi.hpp"
#include "yose/maskembed.hpp"
#include "yose/diffsim.hpp"
#include "yose/fusion.hpp"
#include "yose/costmodel.hpp"
#include "yose/gradcheck.hpp"
#include "yose/params_io.hpp"
