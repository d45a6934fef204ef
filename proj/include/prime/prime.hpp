#pragma once

#include "prime/analytics.hpp"
#include "prime/checkpoint.hpp"
#include "prime/cli.hpp"
#include "prime/codec.hpp"
#include "prime/config.hpp"
#include "prime/data.hpp"
#include "prime/decoder.hpp"
#include "prime/diffusion.hpp"
#include "prime/net.hpp"
#include "prime/random.hpp"
#include "prime/sampler.hpp"
#include "prime/schedule.hpp"
#include "prime/trainer.hpp"
