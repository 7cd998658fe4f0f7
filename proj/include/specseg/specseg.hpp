#pragma once

#include "specseg/affinity.hpp"
#include "specseg/autosc.hpp"
#include "specseg/error.hpp"
#include "specseg/evalkit.hpp"
#include "specseg/highres.hpp"
#include "specseg/ncut.hpp"
#include "specseg/pipeline.hpp"
#include "specseg/spectral.hpp"
#include "specseg/tensorio.hpp"
#include "specseg/types.hpp"
