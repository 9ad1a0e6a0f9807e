#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nb/diagnostics.hpp"
#include "nb/model.hpp"
#include "nb/shapeworld.hpp"
#include "nb/train.hpp"

namespace nb::cli {

// Full run configuration with documented defaults. Loaded from strict JSON
// (unknown keys rejected), then overridden by --set key=value pairs and the
// NOISEBOOST_SEED environment variable.
struct RunConfig {
    uint64_t seed = 1;
    ModelConfig model;
    PerturbSpec perturb;  // SFT perturbation (config keys perturb.*)
    SftConfig sft;
    DpoConfig dpo;
    SemiConfig semi;
};

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides);
void dump_effective_config(const RunConfig& rc, const std::string& path);

struct LoadedData {
    DatasetSplit split;
    uint64_t seed = 0;
    int scenes = 0;
};

LoadedData load_data_dir(const std::string& dir);

struct GenDataArgs {
    std::string out;
    int scenes = 10000;
    uint64_t seed = 1;
    double labeled_fraction = 1.0;
    int eval_count = -1;  // default: 10% of examples
};
int cmd_gen_data(const GenDataArgs& args);

struct TrainArgs {
    std::string mode = "sft";
    std::string config_path;
    std::string data_dir;
    std::string init_checkpoint;
    std::string out_dir = "run";
    std::string metrics_path;
    std::vector<std::string> overrides;
};
int cmd_train(const TrainArgs& args);

struct EvalArgs {
    std::string checkpoint;
    std::string data_dir;
    std::string report_path = "report.json";
    bool probes = false;
    bool captions = false;
};
int cmd_eval(const EvalArgs& args);

struct AblateArgs {
    std::string data_dir;
    std::string out_dir = "ablation";
    std::string config_path;
    std::vector<double> probs{0.0, 0.1, 0.5, 0.9};
    std::vector<double> scales{0.0, 0.1, 0.5, 0.9};
    int seeds = 1;
    uint64_t seed_base = 1;
    std::vector<std::string> overrides;
};
int cmd_ablate(const AblateArgs& args);

struct AttnMapArgs {
    std::string checkpoint;
    std::string data_dir;
    std::string out_base = "attn";
    uint64_t scene_id = 0;
};
int cmd_attn_map(const AttnMapArgs& args);

// Parses argv, dispatches, and maps errors onto the exit-code contract:
// 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
int run_main(int argc, char** argv);

}  // namespace nb::cli
