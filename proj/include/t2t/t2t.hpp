#pragma once

// Umbrella header for the core library. The HTTPS annotation provider
// lives in t2t/vlm_provider.hpp and is included separately.

#include "t2t/annotation.hpp"
#include "t2t/autograd.hpp"
#include "t2t/checkpoint.hpp"
#include "t2t/config.hpp"
#include "t2t/decoder.hpp"
#include "t2t/embedding.hpp"
#include "t2t/encoder.hpp"
#include "t2t/error.hpp"
#include "t2t/flow_ingest.hpp"
#include "t2t/hash.hpp"
#include "t2t/losses.hpp"
#include "t2t/metrics.hpp"
#include "t2t/model.hpp"
#include "t2t/nn.hpp"
#include "t2t/optim.hpp"
#include "t2t/porter_stemmer.hpp"
#include "t2t/synth.hpp"
#include "t2t/text.hpp"
#include "t2t/trainer.hpp"
