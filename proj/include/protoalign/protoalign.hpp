#pragma once

#include "common.hpp"
#include "model.hpp"
#include "eda.hpp"
#include "psa.hpp"
#include "image_io.hpp"
#include "data.hpp"
#include "evalsuite.hpp"
#include "transfer.hpp"
#include "config.hpp"
#include "checkpoint.hpp"
#include "pipeline.hpp"
