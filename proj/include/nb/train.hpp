#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "nb/model.hpp"
#include "nb/perturb.hpp"
#include "nb/shapeworld.hpp"

namespace nb {

struct SftConfig {
    float lr = 3e-4f;
    int batch_size = 8;
    int steps = 2000;
    float warmup_ratio = 0.03f;
    PerturbSpec perturb;
    int checkpoint_interval = 0;  // 0: final checkpoint only
};

struct DpoConfig {
    float beta = 0.1f;
    PerturbSpec perturb_w{PerturbKind::gaussian_feature, 0.5f, 0.5f, 0.1f};
    PerturbSpec perturb_l{};  // clean rejected pass by default
    float sft_weight = 1.0f;
    float lr = 3e-5f;
    int batch_size = 4;
    int steps = 200;
    float warmup_ratio = 0.03f;
};

struct SemiConfig {
    float threshold = 0.7f;
    int mu = 1;  // unlabeled examples per labeled example
    PerturbSpec perturb_student{PerturbKind::gaussian_feature, 0.5f, 0.5f, 0.1f};
    float lr = 3e-4f;
    int batch_size = 8;
    int labeled_steps = 600;  // phase 1 (skipped when an init checkpoint provides the teacher)
    int steps = 400;          // phase 2
    float warmup_ratio = 0.03f;
    int max_pseudo_tokens = 32;
};

enum class TrainMode { sft, dpo, semi };

TrainMode train_mode_from_string(const std::string& s);
const char* train_mode_name(TrainMode m);

struct MetricsRow {
    int64_t step = 0;
    std::string mode;
    double loss_total = 0.0;
    double loss_sft = 0.0;
    double loss_dpo = 0.0;
    double loss_unlabeled = 0.0;
    double keep_rate = 0.0;
    double grad_norm = 0.0;
    double seconds = 0.0;
};

// Mean over the batch of per-example mean answer-token cross-entropy,
// with the perturbation applied to each example's visual block.
Tensor sft_loss(MultimodalLM& policy, const std::vector<const Example*>& batch, const PerturbSpec& perturb,
                RngStream& rng);

struct DpoParts {
    double margin = 0.0;  // mean beta * (delta_w - delta_l)
    double dpo = 0.0;
    double sft = 0.0;
};

// -log sigmoid(beta * [(log pi(yw)/ref(yw)) - (log pi(yl)/ref(yl))]), mean
// over pairs. Policy passes use cfg.perturb_w / cfg.perturb_l on the visual
// block; reference passes are always clean and contribute constants.
Tensor dpo_loss(MultimodalLM& policy, MultimodalLM& reference, const std::vector<const PreferencePair*>& batch,
                const DpoConfig& cfg, RngStream& rng, DpoParts* parts = nullptr);

// sft_weight * SFT(preferred) + DPO, sharing the preferred-answer policy
// forward between both terms.
Tensor rl_loss(MultimodalLM& policy, MultimodalLM& reference, const std::vector<const PreferencePair*>& batch,
               const DpoConfig& cfg, RngStream& rng, DpoParts* parts = nullptr);

// Closed-form pair loss used both by dpo_loss and as a test seam.
double dpo_pair_loss_value(double lp_w_policy, double lp_l_policy, double lp_w_ref, double lp_l_ref, double beta);

struct PseudoLabel {
    TokenSeq tokens;
    std::vector<float> max_probs;  // per generated token, teacher's top softmax probability
};

// Greedy teacher generation on the clean image, recording per-step
// confidence.
PseudoLabel generate_pseudo(MultimodalLM& teacher, const RasterImage& image, const TokenSeq& prompt,
                            int max_new = 32);

// q_hat plus keep mask at threshold t (kept where confidence >= t).
std::pair<TokenSeq, std::vector<uint8_t>> pseudo_label(MultimodalLM& teacher, const RasterImage& image,
                                                       const TokenSeq& prompt, float threshold, int max_new = 32);

// Teacher pseudo labels are deterministic per example, so they are generated
// once and reused across steps.
using PseudoCache = std::unordered_map<const Example*, PseudoLabel>;

Tensor semi_unlabeled_loss(MultimodalLM& student, MultimodalLM& teacher, const std::vector<const Example*>& unlabeled,
                           float threshold, const PerturbSpec& perturb_student, RngStream& rng,
                           double* keep_rate = nullptr, PseudoCache* cache = nullptr, int max_new = 32);

struct SemiParts {
    double unlabeled = 0.0;
    double sft = 0.0;
    double keep_rate = 0.0;
};

Tensor semi_loss(MultimodalLM& student, MultimodalLM& teacher, const std::vector<const Example*>& labeled,
                 const std::vector<const Example*>& unlabeled, const SemiConfig& cfg, RngStream& rng,
                 SemiParts* parts = nullptr, PseudoCache* cache = nullptr);

struct TrainRunConfig {
    TrainMode mode = TrainMode::sft;
    uint64_t seed = 1;
    ModelConfig model;
    SftConfig sft;
    DpoConfig dpo;
    SemiConfig semi;
    std::string init_checkpoint;  // dpo: required; semi: optional teacher
    std::string out_dir;
    std::string metrics_path;  // empty: <out_dir>/metrics.jsonl; "-": keep in memory only
};

struct TrainResult {
    std::string final_checkpoint;
    std::string teacher_checkpoint;  // semi mode
    std::vector<MetricsRow> metrics;
};

TrainResult run_training(const TrainRunConfig& cfg, const DatasetSplit& data);

// Mean answer-token loss over a fixed example list, no perturbation, no
// gradients.
double evaluate_sft_loss(MultimodalLM& model, const std::vector<Example>& examples);

void write_metrics_jsonl(const std::vector<MetricsRow>& rows, const std::string& path);

}  // namespace nb
