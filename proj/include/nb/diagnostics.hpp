#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "nb/model.hpp"
#include "nb/shapeworld.hpp"
#include "nb/train.hpp"

namespace nb {

// Token correlation map: one row per generation step, one column per context
// position, zero-padded where the context had not yet grown to a column.
struct CorrelationMap {
    int steps = 0;
    int context = 0;
    std::vector<float> values;              // steps x context
    std::vector<Modality> column_modality;  // visual / prompt / answer(generated)
    std::vector<int> row_context;           // context length covered by each row

    float at(int r, int c) const { return values[static_cast<size_t>(r) * context + c]; }
};

CorrelationMap attention_correlation(const AttentionRecord& record, int layer = -1);  // -1: final layer
double visual_attention_mass(const CorrelationMap& map);
double anchor_column_score(const CorrelationMap& map);

struct ProbeReport {
    int n = 0;
    int correct = 0;
    int invalid = 0;  // generations that produced neither yes nor no
    int tp = 0, fp = 0, fn = 0, tn = 0;
    double accuracy = 0.0;
    double yes_rate = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

// Answerer returns yes/no, or nullopt for an unparseable reply.
using ProbeAnswerer = std::function<std::optional<bool>(const ProbeQuestion&)>;

ProbeReport evaluate_probes(const ProbeAnswerer& answerer, const std::vector<ProbeQuestion>& probes);
ProbeReport evaluate_probes(MultimodalLM& model, const std::vector<ProbeQuestion>& probes);
std::optional<bool> probe_answer_from_tokens(const TokenSeq& generated);

enum class CaptionCategory : int {
    correct = 0,
    object = 1,
    color = 2,
    number = 3,
    position = 4,
    hallucination = 5,
    other = 6,
};
constexpr int kNumCaptionCategories = 7;
const char* caption_category_name(CaptionCategory c);

enum class ClaimJudgment { correct, position, color, object, hallucination };

// A claim is judged against the scene: exact triple match wins; then a
// present (color,shape) pair elsewhere means a position error; a matching
// shape at the claimed position means a color error; a matching color at
// the claimed position means an object (shape) error; otherwise the claim
// invents a pair that exists nowhere: hallucination.
ClaimJudgment judge_claim(const Scene& scene, const CaptionClaim& claim);

CaptionCategory judge_caption(const Scene& scene, const TokenSeq& caption, const Vocabulary& vocab);

struct CaptionErrorReport {
    int n = 0;
    int counts[kNumCaptionCategories] = {0};
    double hallucination_rate = 0.0;

    int count(CaptionCategory c) const { return counts[static_cast<int>(c)]; }
};

CaptionErrorReport evaluate_captions(MultimodalLM& model, const std::vector<Scene>& scenes, const Vocabulary& vocab,
                                     int max_new = 32);

// Mean visual attention mass over caption generations for the given scenes.
double mean_visual_attention_mass(MultimodalLM& model, const std::vector<Scene>& scenes, const Vocabulary& vocab,
                                  int max_new = 32);

void write_pgm(const CorrelationMap& map, const std::string& path);
void write_map_sidecar(const CorrelationMap& map, double visual_mass, double anchor_score, const std::string& path);

struct AblationCellResult {
    double prob = 0.0;
    double scale = 0.0;
    std::vector<double> probe_acc;    // per seed
    std::vector<double> hall_rate;    // per seed
    std::vector<double> visual_mass;  // per seed
    std::vector<double> final_loss;   // per seed
};

struct AblationGrid {
    std::vector<double> probs;
    std::vector<double> scales;
    std::vector<AblationCellResult> cells;  // probs-major order

    const AblationCellResult& cell(size_t pi, size_t si) const { return cells[pi * scales.size() + si]; }
};

struct AblationOptions {
    std::vector<uint64_t> seeds{1};
    int attention_scenes = 16;  // eval scenes sampled for the attention-mass metric
    std::string out_dir;        // per-cell artifacts; completed cells are reused on rerun
};

// Trains one SFT model per (prob, scale, seed) with gaussian feature noise
// and evaluates probe accuracy, hallucination rate, visual attention mass
// and final training loss on the provided split.
AblationGrid run_ablation_grid(const std::vector<double>& probs, const std::vector<double>& scales,
                               const TrainRunConfig& base, const DatasetSplit& data, const AblationOptions& options);

void write_ablation_csv(const AblationGrid& grid, const std::string& path);
void write_ablation_json(const AblationGrid& grid, const std::string& path);

}  // namespace nb
