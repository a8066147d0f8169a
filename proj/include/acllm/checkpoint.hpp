#pragma once

#include <string>
#include <vector>

#include "acllm/optim.hpp"
#include "acllm/quantizer.hpp"

namespace acllm {

// Single-file weight container: magic "ACLK", version, length-prefixed
// (name, shape, float32 little-endian) entries, then a JSON metadata trailer.
// Save -> load -> save is byte identical.

struct CkptEntry {
    std::string name;
    int rows = 0;
    int cols = 0;
    std::vector<float> values;
};

struct CheckpointMeta {
    std::string stage;        // ssl_iter1 | ssl_iter2 | sft | context_sft | rl
    std::string config_hash;
    uint64_t seed = 0;
    int64_t step_count = 0;
    std::string extra_json = "{}";  // free-form stage detail
};

struct Checkpoint {
    uint32_t version = 1;
    CheckpointMeta meta;
    std::vector<CkptEntry> entries;

    const CkptEntry* find(const std::string& name) const;
};

bool valid_stage_tag(const std::string& stage);

void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

// Parameters <-> entries; loading requires exact name and shape agreement.
void store_to_checkpoint(const ParamStore& store, Checkpoint& c);
void checkpoint_to_store(const Checkpoint& c, ParamStore& store);

// Adam moments under "opt/m/" and "opt/v/"; step count rides in the metadata.
void optimizer_to_checkpoint(const Optimizer& opt, const ParamStore& store,
                             Checkpoint& c);
void checkpoint_to_optimizer(const Checkpoint& c, const ParamStore& store,
                             Optimizer& opt);

// Codebooks as "<key>/vectors", "<key>/projection" plus "<key>/info" holding
// {kind, source_layer, inertia, input_width}.
void add_codebook(Checkpoint& c, const std::string& key, const Codebook& cb);
Codebook get_codebook(const Checkpoint& c, const std::string& key);

}  // namespace acllm
