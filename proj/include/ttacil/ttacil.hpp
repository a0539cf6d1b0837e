#pragma once

// Core library. experiment.hpp and report.hpp add JSON configs, orchestration and tables.

#include "ttacil/augment.hpp"
#include "ttacil/autograd.hpp"
#include "ttacil/checkpoint_io.hpp"
#include "ttacil/corruption.hpp"
#include "ttacil/data.hpp"
#include "ttacil/encoder.hpp"
#include "ttacil/gradcheck.hpp"
#include "ttacil/optim.hpp"
#include "ttacil/params.hpp"
#include "ttacil/protocol.hpp"
#include "ttacil/prototypes.hpp"
#include "ttacil/rng.hpp"
#include "ttacil/stream.hpp"
#include "ttacil/tensor.hpp"
#include "ttacil/trainer.hpp"
#include "ttacil/tta.hpp"
