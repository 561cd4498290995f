#pragma once

#include "kvlab/errors.hpp"
#include "kvlab/tensor/array.hpp"
#include "kvlab/tensor/tape.hpp"
#include "kvlab/tensor/ops.hpp"
#include "kvlab/tensor/gradcheck.hpp"
#include "kvlab/model/config.hpp"
#include "kvlab/model/weights.hpp"
#include "kvlab/model/kv_cache.hpp"
#include "kvlab/model/transformer.hpp"
#include "kvlab/gates/hard_concrete.hpp"
#include "kvlab/eviction/policy.hpp"
#include "kvlab/eviction/chunked_prefill.hpp"
#include "kvlab/ledger/ledger.hpp"
#include "kvlab/ledger/event_log.hpp"
#include "kvlab/data/generators.hpp"
#include "kvlab/trainer/trainer.hpp"
#include "kvlab/harness/config.hpp"
#include "kvlab/harness/sweep.hpp"
#include "kvlab/harness/report.hpp"
