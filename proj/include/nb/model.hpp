#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "nb/perturb.hpp"
#include "nb/rng.hpp"
#include "nb/shapeworld.hpp"
#include "nb/tensor.hpp"

namespace nb {

struct ModelConfig {
    int d_model = 64;
    int n_heads = 4;
    int n_lm_layers = 4;
    int n_vision_layers = 2;
    int d_vision = 32;
    int patch_size = 4;
    int max_seq_len = 128;
    int vocab_size = 26;

    bool operator==(const ModelConfig&) const = default;

    int patches_per_side() const { return RasterImage::kWidth / patch_size; }
    int n_patches() const { return patches_per_side() * patches_per_side(); }
    int patch_dim() const { return patch_size * patch_size * RasterImage::kChannels; }
    int ffn_dim() const { return 4 * d_model; }
    int vision_ffn_dim() const { return 4 * d_vision; }
    void validate() const;
};

enum class Modality : uint8_t { visual = 0, prompt = 1, answer = 2 };

struct EmbeddedSequence {
    Tensor embeddings;  // L x d_model
    std::vector<Modality> modality;
    std::vector<uint8_t> loss_mask;  // answer positions
    std::vector<int> token_ids;      // -1 at visual positions
    int visual_len = 0;
    int prompt_len = 0;
    int answer_len = 0;

    int length() const { return static_cast<int>(modality.size()); }
};

// Head-averaged attention of the newest query over the current context,
// one row per LM layer per generation step.
struct AttentionRecord {
    std::vector<std::vector<std::vector<float>>> rows;  // [step][layer][context position]
    int visual_len = 0;
    int prompt_len = 0;

    bool empty() const { return rows.empty(); }
    int steps() const { return static_cast<int>(rows.size()); }
};

struct GenerationResult {
    TokenSeq tokens;  // generated answer tokens (EOS included when reached)
    AttentionRecord attention;
};

// Miniature multimodal LM: patch-embedding vision encoder, linear projector
// into the LM width, and a causal decoder. The 64 projected visual tokens
// occupy the leading context block, followed by prompt and answer tokens.
class MultimodalLM {
public:
    MultimodalLM(const ModelConfig& config, RngStream init_rng);

    const ModelConfig& config() const { return config_; }
    uint32_t config_hash() const;

    std::vector<Tensor>& parameters() { return params_; }
    const std::vector<std::string>& parameter_names() const { return param_names_; }
    Tensor param(const std::string& name);

    void freeze();
    MultimodalLM clone() const;

    Tensor encode_image(const RasterImage& image);  // n_patches x d_vision
    EmbeddedSequence embed_inputs(const RasterImage& image, const TokenSeq& prompt, const TokenSeq* answer,
                                  const PerturbSpec& perturb, RngStream& rng);
    Tensor forward_hidden(const EmbeddedSequence& seq,
                          std::vector<std::vector<float>>* last_row_per_layer = nullptr);
    Tensor head_logits(const Tensor& hidden);  // rows x vocab
    Tensor forward_logits(const EmbeddedSequence& seq,
                          std::vector<std::vector<float>>* last_row_per_layer = nullptr);
    GenerationResult generate_greedy(const RasterImage& image, const TokenSeq& prompt, int max_new = 32,
                                     bool record_attention = false);

    void save_checkpoint(const std::string& path, const AdamOptimizer::State* opt_state = nullptr,
                         uint64_t rng_seed = 0, uint64_t rng_counter = 0, int64_t step = 0) const;

    struct LoadResult {
        std::unique_ptr<MultimodalLM> model;
        AdamOptimizer::State opt_state;
        bool has_opt_state = false;
        uint64_t rng_seed = 0;
        uint64_t rng_counter = 0;
        int64_t step = 0;
    };
    static LoadResult load_checkpoint(const std::string& path);

    // Replaces weights in place; the stored config must equal this model's.
    void load_weights(const std::string& path);

private:
    struct AttnParams {
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    };
    struct BlockParams {
        Tensor ln1_g, ln1_b;
        AttnParams attn;
        Tensor ln2_g, ln2_b;
        Tensor w1, b1, w2, b2;
    };

    MultimodalLM() = default;
    void build(RngStream& rng);
    void register_params();
    Tensor run_block(const BlockParams& block, Tensor x, int n_heads, bool causal,
                     std::vector<float>* last_row);

    ModelConfig config_;
    // vision
    Tensor patch_w_, patch_b_, vision_pos_;
    std::vector<BlockParams> vision_blocks_;
    Tensor vision_ln_g_, vision_ln_b_;
    // projector
    Tensor proj_w_, proj_b_;
    // language model
    Tensor tok_emb_, pos_emb_;
    std::vector<BlockParams> lm_blocks_;
    Tensor lm_ln_g_, lm_ln_b_;
    Tensor head_w_, head_b_;

    std::vector<Tensor> params_;
    std::vector<std::string> param_names_;
};

}  // namespace nb
