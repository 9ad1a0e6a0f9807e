#include "nb/model.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <sstream>

namespace nb {

void ModelConfig::validate() const {
    if (d_model <= 0 || d_vision <= 0 || n_heads <= 0 || n_lm_layers <= 0 || n_vision_layers <= 0)
        throw ConfigError("model: dimensions and layer counts must be positive");
    if (d_model % n_heads != 0 || d_vision % n_heads != 0)
        throw ConfigError("model: d_model and d_vision must be divisible by n_heads");
    if (RasterImage::kWidth % patch_size != 0) throw ConfigError("model: patch_size must divide the image side");
    if (vocab_size < 3) throw ConfigError("model: vocab too small");
    if (n_patches() + 8 > max_seq_len) throw ConfigError("model: max_seq_len leaves no room for text");
}

namespace {

constexpr float kInitStd = 0.02f;

Tensor init_weight(Shape shape, RngStream& rng) { return Tensor::randn(std::move(shape), rng, kInitStd, true); }
Tensor init_zeros(Shape shape) { return Tensor::zeros(std::move(shape), true); }
Tensor init_ones(Shape shape) { return Tensor::full(std::move(shape), 1.0f, true); }

}  // namespace

MultimodalLM::MultimodalLM(const ModelConfig& config, RngStream init_rng) : config_(config) {
    config_.validate();
    build(init_rng);
    register_params();
}

void MultimodalLM::build(RngStream& rng) {
    const int d = config_.d_model;
    const int dv = config_.d_vision;

    patch_w_ = init_weight({config_.patch_dim(), dv}, rng);
    patch_b_ = init_zeros({dv});
    vision_pos_ = init_weight({config_.n_patches(), dv}, rng);
    for (int i = 0; i < config_.n_vision_layers; ++i) {
        BlockParams b;
        b.ln1_g = init_ones({dv});
        b.ln1_b = init_zeros({dv});
        b.attn = {init_weight({dv, dv}, rng), init_zeros({dv}), init_weight({dv, dv}, rng), init_zeros({dv}),
                  init_weight({dv, dv}, rng), init_zeros({dv}), init_weight({dv, dv}, rng), init_zeros({dv})};
        b.ln2_g = init_ones({dv});
        b.ln2_b = init_zeros({dv});
        b.w1 = init_weight({dv, config_.vision_ffn_dim()}, rng);
        b.b1 = init_zeros({config_.vision_ffn_dim()});
        b.w2 = init_weight({config_.vision_ffn_dim(), dv}, rng);
        b.b2 = init_zeros({dv});
        vision_blocks_.push_back(std::move(b));
    }
    vision_ln_g_ = init_ones({dv});
    vision_ln_b_ = init_zeros({dv});

    proj_w_ = init_weight({dv, d}, rng);
    proj_b_ = init_zeros({d});

    tok_emb_ = init_weight({config_.vocab_size, d}, rng);
    pos_emb_ = init_weight({config_.max_seq_len, d}, rng);
    for (int i = 0; i < config_.n_lm_layers; ++i) {
        BlockParams b;
        b.ln1_g = init_ones({d});
        b.ln1_b = init_zeros({d});
        b.attn = {init_weight({d, d}, rng), init_zeros({d}), init_weight({d, d}, rng), init_zeros({d}),
                  init_weight({d, d}, rng), init_zeros({d}), init_weight({d, d}, rng), init_zeros({d})};
        b.ln2_g = init_ones({d});
        b.ln2_b = init_zeros({d});
        b.w1 = init_weight({d, config_.ffn_dim()}, rng);
        b.b1 = init_zeros({config_.ffn_dim()});
        b.w2 = init_weight({config_.ffn_dim(), d}, rng);
        b.b2 = init_zeros({d});
        lm_blocks_.push_back(std::move(b));
    }
    lm_ln_g_ = init_ones({d});
    lm_ln_b_ = init_zeros({d});
    head_w_ = init_weight({d, config_.vocab_size}, rng);
    head_b_ = init_zeros({config_.vocab_size});
}

void MultimodalLM::register_params() {
    params_.clear();
    param_names_.clear();
    const auto reg = [&](const std::string& name, const Tensor& t) {
        param_names_.push_back(name);
        params_.push_back(t);
    };
    const auto reg_block = [&](const std::string& prefix, const BlockParams& b) {
        reg(prefix + ".ln1.g", b.ln1_g);
        reg(prefix + ".ln1.b", b.ln1_b);
        reg(prefix + ".attn.wq", b.attn.wq);
        reg(prefix + ".attn.bq", b.attn.bq);
        reg(prefix + ".attn.wk", b.attn.wk);
        reg(prefix + ".attn.bk", b.attn.bk);
        reg(prefix + ".attn.wv", b.attn.wv);
        reg(prefix + ".attn.bv", b.attn.bv);
        reg(prefix + ".attn.wo", b.attn.wo);
        reg(prefix + ".attn.bo", b.attn.bo);
        reg(prefix + ".ln2.g", b.ln2_g);
        reg(prefix + ".ln2.b", b.ln2_b);
        reg(prefix + ".ffn.w1", b.w1);
        reg(prefix + ".ffn.b1", b.b1);
        reg(prefix + ".ffn.w2", b.w2);
        reg(prefix + ".ffn.b2", b.b2);
    };

    reg("vision.patch.w", patch_w_);
    reg("vision.patch.b", patch_b_);
    reg("vision.pos", vision_pos_);
    for (size_t i = 0; i < vision_blocks_.size(); ++i) reg_block("vision.block" + std::to_string(i), vision_blocks_[i]);
    reg("vision.ln_f.g", vision_ln_g_);
    reg("vision.ln_f.b", vision_ln_b_);
    reg("proj.w", proj_w_);
    reg("proj.b", proj_b_);
    reg("lm.tok_emb", tok_emb_);
    reg("lm.pos_emb", pos_emb_);
    for (size_t i = 0; i < lm_blocks_.size(); ++i) reg_block("lm.block" + std::to_string(i), lm_blocks_[i]);
    reg("lm.ln_f.g", lm_ln_g_);
    reg("lm.ln_f.b", lm_ln_b_);
    reg("lm.head.w", head_w_);
    reg("lm.head.b", head_b_);
}

uint32_t MultimodalLM::config_hash() const {
    uint32_t h = 2166136261u;
    const auto mix = [&h](int v) {
        for (int i = 0; i < 4; ++i) {
            h ^= static_cast<uint32_t>((v >> (8 * i)) & 0xff);
            h *= 16777619u;
        }
    };
    mix(config_.d_model);
    mix(config_.n_heads);
    mix(config_.n_lm_layers);
    mix(config_.n_vision_layers);
    mix(config_.d_vision);
    mix(config_.patch_size);
    mix(config_.max_seq_len);
    mix(config_.vocab_size);
    return h;
}

Tensor MultimodalLM::param(const std::string& name) {
    for (size_t i = 0; i < param_names_.size(); ++i)
        if (param_names_[i] == name) return params_[i];
    throw Error("model: no parameter named " + name);
}

void MultimodalLM::freeze() {
    for (Tensor& p : params_) p.set_requires_grad(false);
}

MultimodalLM MultimodalLM::clone() const {
    MultimodalLM copy;
    copy.config_ = config_;
    RngStream dummy(0);
    copy.build(dummy);
    copy.register_params();
    for (size_t i = 0; i < params_.size(); ++i) {
        std::copy(params_[i].vec().begin(), params_[i].vec().end(), copy.params_[i].data());
        copy.params_[i].set_requires_grad(params_[i].requires_grad());
    }
    return copy;
}

Tensor MultimodalLM::run_block(const BlockParams& block, Tensor x, int n_heads, bool causal,
                               std::vector<float>* last_row) {
    const int dh = x.cols() / n_heads;
    const int len = x.rows();

    Tensor h = ops::layer_norm(x, block.ln1_g, block.ln1_b);
    Tensor q = ops::add_bias(ops::matmul(h, block.attn.wq), block.attn.bq);
    Tensor k = ops::add_bias(ops::matmul(h, block.attn.wk), block.attn.bk);
    Tensor v = ops::add_bias(ops::matmul(h, block.attn.wv), block.attn.bv);

    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(n_heads));
    if (last_row) last_row->assign(static_cast<size_t>(len), 0.0f);
    for (int i = 0; i < n_heads; ++i) {
        Tensor qh = ops::slice_cols(q, i * dh, (i + 1) * dh);
        Tensor kh = ops::slice_cols(k, i * dh, (i + 1) * dh);
        Tensor vh = ops::slice_cols(v, i * dh, (i + 1) * dh);
        std::vector<float> probs;
        heads.push_back(ops::attention(qh, kh, vh, causal, last_row ? &probs : nullptr));
        if (last_row) {
            const float* row = probs.data() + static_cast<size_t>(len - 1) * len;
            for (int j = 0; j < len; ++j) (*last_row)[static_cast<size_t>(j)] += row[j] / static_cast<float>(n_heads);
        }
    }
    Tensor cat = n_heads == 1 ? heads[0] : ops::concat_cols(heads);
    Tensor attn_out = ops::add_bias(ops::matmul(cat, block.attn.wo), block.attn.bo);
    x = ops::add(x, attn_out);

    Tensor h2 = ops::layer_norm(x, block.ln2_g, block.ln2_b);
    Tensor f = ops::add_bias(ops::matmul(h2, block.w1), block.b1);
    f = ops::gelu(f);
    f = ops::add_bias(ops::matmul(f, block.w2), block.b2);
    return ops::add(x, f);
}

Tensor MultimodalLM::encode_image(const RasterImage& image) {
    if (image.pixels.size() != static_cast<size_t>(RasterImage::kWidth) * RasterImage::kHeight * RasterImage::kChannels)
        throw BadImageShapeError("encode_image: image buffer has wrong size");
    const int ps = config_.patch_size;
    const int per_side = config_.patches_per_side();
    const int pd = config_.patch_dim();

    std::vector<float> patches(static_cast<size_t>(config_.n_patches()) * pd);
    for (int pr = 0; pr < per_side; ++pr) {
        for (int pc = 0; pc < per_side; ++pc) {
            float* dst = patches.data() + (static_cast<size_t>(pr) * per_side + pc) * pd;
            int t = 0;
            for (int y = 0; y < ps; ++y)
                for (int x = 0; x < ps; ++x)
                    for (int c = 0; c < RasterImage::kChannels; ++c)
                        dst[t++] = image.at(pr * ps + y, pc * ps + x, c);
        }
    }
    Tensor patch_mat = Tensor::from_data({config_.n_patches(), pd}, std::move(patches));
    Tensor x = ops::add_bias(ops::matmul(patch_mat, patch_w_), patch_b_);
    x = ops::add(x, vision_pos_);
    for (auto& block : vision_blocks_) x = run_block(block, x, config_.n_heads, /*causal=*/false, nullptr);
    return ops::layer_norm(x, vision_ln_g_, vision_ln_b_);
}

EmbeddedSequence MultimodalLM::embed_inputs(const RasterImage& image, const TokenSeq& prompt,
                                            const TokenSeq* answer, const PerturbSpec& perturb, RngStream& rng) {
    perturb.validate();
    const RasterImage* input = &image;
    RasterImage perturbed_pixels;
    if (perturb.is_pixel()) {
        if (rng.next_bernoulli(perturb.prob)) {
            perturbed_pixels = perturb_pixels(image, perturb, rng);
            input = &perturbed_pixels;
        }
    }

    Tensor visual = ops::add_bias(ops::matmul(encode_image(*input), proj_w_), proj_b_);
    visual = perturb_visual(visual, perturb, rng);

    std::vector<int> text_ids = prompt.ids;
    if (answer) text_ids.insert(text_ids.end(), answer->ids.begin(), answer->ids.end());
    const int vlen = config_.n_patches();
    const int plen = prompt.length();
    const int alen = answer ? answer->length() : 0;
    if (vlen + plen + alen > config_.max_seq_len)
        throw SequenceTooLongError("embed_inputs: sequence of " + std::to_string(vlen + plen + alen) + " exceeds max_seq_len " +
                                   std::to_string(config_.max_seq_len));
    if (plen == 0) throw ShapeMismatchError("embed_inputs: empty prompt");

    Tensor text = ops::embedding_rows(tok_emb_, text_ids);
    text = perturb_language(text, perturb, rng);

    EmbeddedSequence seq;
    seq.embeddings = ops::concat_rows({visual, text});
    seq.visual_len = vlen;
    seq.prompt_len = plen;
    seq.answer_len = alen;
    seq.modality.assign(static_cast<size_t>(vlen), Modality::visual);
    seq.modality.insert(seq.modality.end(), static_cast<size_t>(plen), Modality::prompt);
    seq.modality.insert(seq.modality.end(), static_cast<size_t>(alen), Modality::answer);
    seq.loss_mask.assign(static_cast<size_t>(vlen + plen), 0);
    seq.loss_mask.insert(seq.loss_mask.end(), static_cast<size_t>(alen), 1);
    seq.token_ids.assign(static_cast<size_t>(vlen), -1);
    seq.token_ids.insert(seq.token_ids.end(), text_ids.begin(), text_ids.end());
    return seq;
}

Tensor MultimodalLM::forward_hidden(const EmbeddedSequence& seq, std::vector<std::vector<float>>* last_row_per_layer) {
    const int len = seq.length();
    if (len > config_.max_seq_len) throw SequenceTooLongError("forward: sequence exceeds max_seq_len");
    Tensor x = ops::add(seq.embeddings, ops::slice_rows(pos_emb_, 0, len));
    if (last_row_per_layer) last_row_per_layer->assign(static_cast<size_t>(config_.n_lm_layers), {});
    for (size_t i = 0; i < lm_blocks_.size(); ++i) {
        std::vector<float>* row = last_row_per_layer ? &(*last_row_per_layer)[i] : nullptr;
        x = run_block(lm_blocks_[i], x, config_.n_heads, /*causal=*/true, row);
    }
    return ops::layer_norm(x, lm_ln_g_, lm_ln_b_);
}

Tensor MultimodalLM::head_logits(const Tensor& hidden) {
    return ops::add_bias(ops::matmul(hidden, head_w_), head_b_);
}

Tensor MultimodalLM::forward_logits(const EmbeddedSequence& seq, std::vector<std::vector<float>>* last_row_per_layer) {
    return head_logits(forward_hidden(seq, last_row_per_layer));
}

GenerationResult MultimodalLM::generate_greedy(const RasterImage& image, const TokenSeq& prompt, int max_new,
                                               bool record_attention) {
    Tape::NoGrad guard;
    GenerationResult result;
    result.attention.visual_len = config_.n_patches();
    result.attention.prompt_len = prompt.length();

    TokenSeq answer;
    const int budget = std::min<int>(max_new, config_.max_seq_len - config_.n_patches() - prompt.length());
    PerturbSpec no_perturb;  // inference is always clean
    RngStream unused(0);
    for (int step = 0; step < budget; ++step) {
        EmbeddedSequence seq = embed_inputs(image, prompt, answer.ids.empty() ? nullptr : &answer, no_perturb, unused);
        std::vector<std::vector<float>> rows;
        Tensor logits = forward_logits(seq, record_attention ? &rows : nullptr);
        if (record_attention) result.attention.rows.push_back(std::move(rows));

        const float* last = logits.data() + static_cast<size_t>(logits.rows() - 1) * logits.cols();
        int best = 0;
        for (int v = 1; v < logits.cols(); ++v)
            if (last[v] > last[best]) best = v;
        answer.ids.push_back(best);
        answer.roles.push_back(TokenRole::answer);
        if (best == Vocabulary::kEos) break;
    }
    result.tokens = std::move(answer);
    return result;
}

namespace {

constexpr char kCkptMagic[4] = {'N', 'B', 'C', 'K'};
constexpr uint16_t kCkptVersion = 1;

void put_u16(std::string& buf, uint16_t v) { buf.append(reinterpret_cast<const char*>(&v), 2); }
void put_u32(std::string& buf, uint32_t v) { buf.append(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::string& buf, uint64_t v) { buf.append(reinterpret_cast<const char*>(&v), 8); }
void put_i64(std::string& buf, int64_t v) { buf.append(reinterpret_cast<const char*>(&v), 8); }
void put_floats(std::string& buf, const float* p, size_t n) {
    buf.append(reinterpret_cast<const char*>(p), n * sizeof(float));
}

struct CkptReader {
    std::string buf;
    size_t pos = 0;
    explicit CkptReader(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw CorruptFileError("cannot open checkpoint: " + path);
        std::ostringstream ss;
        ss << f.rdbuf();
        buf = ss.str();
    }
    void read(void* dst, size_t n) {
        if (pos + n > buf.size()) throw CorruptFileError("checkpoint truncated");
        std::memcpy(dst, buf.data() + pos, n);
        pos += n;
    }
    uint16_t u16() { uint16_t v; read(&v, 2); return v; }
    uint32_t u32() { uint32_t v; read(&v, 4); return v; }
    uint64_t u64() { uint64_t v; read(&v, 8); return v; }
    int64_t i64() { int64_t v; read(&v, 8); return v; }
};

ModelConfig read_config(CkptReader& r) {
    ModelConfig c;
    c.d_model = static_cast<int>(r.u32());
    c.n_heads = static_cast<int>(r.u32());
    c.n_lm_layers = static_cast<int>(r.u32());
    c.n_vision_layers = static_cast<int>(r.u32());
    c.d_vision = static_cast<int>(r.u32());
    c.patch_size = static_cast<int>(r.u32());
    c.max_seq_len = static_cast<int>(r.u32());
    c.vocab_size = static_cast<int>(r.u32());
    return c;
}

}  // namespace

void MultimodalLM::save_checkpoint(const std::string& path, const AdamOptimizer::State* opt_state,
                                   uint64_t rng_seed, uint64_t rng_counter, int64_t step) const {
    std::string buf;
    buf.append(kCkptMagic, 4);
    put_u16(buf, kCkptVersion);
    put_u32(buf, static_cast<uint32_t>(config_.d_model));
    put_u32(buf, static_cast<uint32_t>(config_.n_heads));
    put_u32(buf, static_cast<uint32_t>(config_.n_lm_layers));
    put_u32(buf, static_cast<uint32_t>(config_.n_vision_layers));
    put_u32(buf, static_cast<uint32_t>(config_.d_vision));
    put_u32(buf, static_cast<uint32_t>(config_.patch_size));
    put_u32(buf, static_cast<uint32_t>(config_.max_seq_len));
    put_u32(buf, static_cast<uint32_t>(config_.vocab_size));
    put_i64(buf, step);
    put_u64(buf, rng_seed);
    put_u64(buf, rng_counter);
    buf.push_back(opt_state ? 1 : 0);
    put_u32(buf, static_cast<uint32_t>(params_.size()));
    for (size_t i = 0; i < params_.size(); ++i) {
        const std::string& name = param_names_[i];
        put_u32(buf, static_cast<uint32_t>(name.size()));
        buf.append(name);
        const Shape& shape = params_[i].shape();
        put_u32(buf, static_cast<uint32_t>(shape.size()));
        for (int d : shape) put_u32(buf, static_cast<uint32_t>(d));
        put_floats(buf, params_[i].data(), static_cast<size_t>(params_[i].size()));
    }
    if (opt_state) {
        put_i64(buf, opt_state->step);
        for (size_t i = 0; i < params_.size(); ++i) {
            put_floats(buf, opt_state->m[i].data(), opt_state->m[i].size());
            put_floats(buf, opt_state->v[i].data(), opt_state->v[i].size());
        }
    }
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size())));
    put_u32(buf, crc);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write checkpoint: " + path);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw Error("checkpoint write failed: " + path);
}

MultimodalLM::LoadResult MultimodalLM::load_checkpoint(const std::string& path) {
    CkptReader r(path);
    if (r.buf.size() < 8) throw CorruptFileError("checkpoint too small");
    const uint32_t stored_crc = [&] {
        uint32_t v;
        std::memcpy(&v, r.buf.data() + r.buf.size() - 4, 4);
        return v;
    }();
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(r.buf.data()), static_cast<uInt>(r.buf.size() - 4)));
    if (crc != stored_crc) throw CorruptFileError("checkpoint CRC mismatch");

    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, kCkptMagic, 4) != 0) throw CorruptFileError("bad checkpoint magic");
    const uint16_t version = r.u16();
    if (version != kCkptVersion)
        throw VersionMismatchError("checkpoint version " + std::to_string(version) + ", expected " + std::to_string(kCkptVersion));

    LoadResult result;
    const ModelConfig config = read_config(r);
    result.step = r.i64();
    result.rng_seed = r.u64();
    result.rng_counter = r.u64();
    uint8_t has_opt;
    r.read(&has_opt, 1);
    result.has_opt_state = has_opt != 0;

    RngStream dummy(0);
    result.model = std::unique_ptr<MultimodalLM>(new MultimodalLM(config, dummy));

    const uint32_t n_params = r.u32();
    if (n_params != result.model->params_.size()) throw ConfigMismatchError("checkpoint parameter count mismatch");
    for (size_t i = 0; i < result.model->params_.size(); ++i) {
        const uint32_t name_len = r.u32();
        std::string name(name_len, '\0');
        r.read(name.data(), name_len);
        if (name != result.model->param_names_[i]) throw ConfigMismatchError("checkpoint parameter order mismatch at " + name);
        const uint32_t ndim = r.u32();
        Shape shape(ndim);
        for (auto& d : shape) d = static_cast<int>(r.u32());
        if (shape != result.model->params_[i].shape()) throw ConfigMismatchError("checkpoint shape mismatch at " + name);
        r.read(result.model->params_[i].data(), static_cast<size_t>(result.model->params_[i].size()) * sizeof(float));
    }
    if (result.has_opt_state) {
        result.opt_state.step = r.i64();
        for (size_t i = 0; i < result.model->params_.size(); ++i) {
            const size_t n = static_cast<size_t>(result.model->params_[i].size());
            result.opt_state.m.emplace_back(n);
            result.opt_state.v.emplace_back(n);
            r.read(result.opt_state.m.back().data(), n * sizeof(float));
            r.read(result.opt_state.v.back().data(), n * sizeof(float));
        }
    }
    if (r.pos != r.buf.size() - 4) throw CorruptFileError("checkpoint: trailing bytes");
    return result;
}

void MultimodalLM::load_weights(const std::string& path) {
    LoadResult loaded = load_checkpoint(path);
    if (!(loaded.model->config_ == config_))
        throw ConfigMismatchError("checkpoint config does not match this model");
    for (size_t i = 0; i < params_.size(); ++i)
        std::copy(loaded.model->params_[i].vec().begin(), loaded.model->params_[i].vec().end(), params_[i].data());
}

}  // namespace nb
