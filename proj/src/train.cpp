#include "nb/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "nb/kernels.hpp"

namespace nb {

TrainMode train_mode_from_string(const std::string& s) {
    if (s == "sft") return TrainMode::sft;
    if (s == "dpo") return TrainMode::dpo;
    if (s == "semi") return TrainMode::semi;
    throw ConfigError("unknown training mode: " + s);
}

const char* train_mode_name(TrainMode m) {
    switch (m) {
        case TrainMode::sft: return "sft";
        case TrainMode::dpo: return "dpo";
        case TrainMode::semi: return "semi";
    }
    return "?";
}

namespace {

// Per-token log-probs of the answer under the model, with the perturbation
// applied per spec. Shape (answer_len).
Tensor answer_token_log_probs(MultimodalLM& model, const RasterImage& image, const TokenSeq& prompt,
                              const TokenSeq& answer, const PerturbSpec& perturb, RngStream& rng) {
    if (answer.ids.empty()) throw EmptyBatchError("loss: answer is empty");
    EmbeddedSequence seq = model.embed_inputs(image, prompt, &answer, perturb, rng);
    Tensor hidden = model.forward_hidden(seq);
    const int a_start = seq.visual_len + seq.prompt_len;
    // logits at position p predict the token at p+1
    Tensor rows = ops::slice_rows(hidden, a_start - 1, a_start + seq.answer_len - 1);
    Tensor logits = model.head_logits(rows);
    Tensor lp = ops::log_softmax(logits);
    return ops::gather_cols(lp, answer.ids);
}

Tensor batch_mean(std::vector<Tensor> terms) {
    Tensor total = terms[0];
    for (size_t i = 1; i < terms.size(); ++i) total = ops::add(total, terms[i]);
    return ops::scale(total, 1.0f / static_cast<float>(terms.size()));
}

}  // namespace

Tensor sft_loss(MultimodalLM& policy, const std::vector<const Example*>& batch, const PerturbSpec& perturb,
                RngStream& rng) {
    if (batch.empty()) throw EmptyBatchError("sft_loss: empty batch");
    std::vector<Tensor> terms;
    terms.reserve(batch.size());
    for (size_t i = 0; i < batch.size(); ++i) {
        const Example& e = *batch[i];
        if (!e.answer) throw EmptyBatchError("sft_loss: example without answer");
        RngStream ex_rng = rng.child(i);
        Tensor lp = answer_token_log_probs(policy, e.image, e.prompt, *e.answer, perturb, ex_rng);
        terms.push_back(ops::scale(ops::sum_all(lp), -1.0f / static_cast<float>(e.answer->length())));
    }
    return batch_mean(std::move(terms));
}

double dpo_pair_loss_value(double lp_w_policy, double lp_l_policy, double lp_w_ref, double lp_l_ref, double beta) {
    const double margin = beta * ((lp_w_policy - lp_w_ref) - (lp_l_policy - lp_l_ref));
    return margin >= 0.0 ? std::log1p(std::exp(-margin)) : -margin + std::log1p(std::exp(margin));
}

namespace {

double reference_log_prob(MultimodalLM& reference, const PreferencePair& pair, const TokenSeq& answer) {
    Tape::NoGrad guard;
    PerturbSpec clean;
    RngStream unused(0);
    Tensor lp = answer_token_log_probs(reference, pair.image, pair.prompt, answer, clean, unused);
    // reduce exactly like ops::sum_all so a policy equal to the reference
    // yields a margin of exactly zero
    return static_cast<float>(kernels::sum(lp.data(), static_cast<size_t>(lp.size())));
}

struct PairForward {
    Tensor lp_w_tokens;  // per-token policy log-probs of the preferred answer
    Tensor margin;       // beta * (delta_w - delta_l), scalar
};

PairForward dpo_pair_forward(MultimodalLM& policy, MultimodalLM& reference, const PreferencePair& pair,
                             const DpoConfig& cfg, RngStream& rng) {
    RngStream rng_w = rng.child("w");
    RngStream rng_l = rng.child("l");
    PairForward out;
    out.lp_w_tokens = answer_token_log_probs(policy, pair.image, pair.prompt, pair.preferred, cfg.perturb_w, rng_w);
    Tensor lp_l = answer_token_log_probs(policy, pair.image, pair.prompt, pair.rejected, cfg.perturb_l, rng_l);
    const double ref_w = reference_log_prob(reference, pair, pair.preferred);
    const double ref_l = reference_log_prob(reference, pair, pair.rejected);
    Tensor diff = ops::sub(ops::sum_all(out.lp_w_tokens), ops::sum_all(lp_l));
    out.margin = ops::add_scalar(ops::scale(diff, cfg.beta), static_cast<float>(-cfg.beta * (ref_w - ref_l)));
    return out;
}

}  // namespace

Tensor dpo_loss(MultimodalLM& policy, MultimodalLM& reference, const std::vector<const PreferencePair*>& batch,
                const DpoConfig& cfg, RngStream& rng, DpoParts* parts) {
    if (batch.empty()) throw EmptyBatchError("dpo_loss: empty batch");
    if (cfg.beta <= 0.0f) throw ConfigError("dpo: beta must be positive");
    std::vector<Tensor> terms;
    double margin_acc = 0.0;
    for (size_t i = 0; i < batch.size(); ++i) {
        RngStream pair_rng = rng.child(i);
        PairForward fwd = dpo_pair_forward(policy, reference, *batch[i], cfg, pair_rng);
        margin_acc += static_cast<double>(fwd.margin.item());
        terms.push_back(ops::neg_log_sigmoid(fwd.margin));
    }
    Tensor loss = batch_mean(std::move(terms));
    if (parts) {
        parts->margin = margin_acc / static_cast<double>(batch.size());
        parts->dpo = static_cast<double>(loss.item());
        parts->sft = 0.0;
    }
    return loss;
}

Tensor rl_loss(MultimodalLM& policy, MultimodalLM& reference, const std::vector<const PreferencePair*>& batch,
               const DpoConfig& cfg, RngStream& rng, DpoParts* parts) {
    if (batch.empty()) throw EmptyBatchError("rl_loss: empty batch");
    if (cfg.beta <= 0.0f) throw ConfigError("dpo: beta must be positive");
    std::vector<Tensor> dpo_terms, sft_terms;
    double margin_acc = 0.0;
    for (size_t i = 0; i < batch.size(); ++i) {
        RngStream pair_rng = rng.child(i);
        const PreferencePair& pair = *batch[i];
        PairForward fwd = dpo_pair_forward(policy, reference, pair, cfg, pair_rng);
        margin_acc += static_cast<double>(fwd.margin.item());
        dpo_terms.push_back(ops::neg_log_sigmoid(fwd.margin));
        sft_terms.push_back(
            ops::scale(ops::sum_all(fwd.lp_w_tokens), -1.0f / static_cast<float>(pair.preferred.length())));
    }
    Tensor dpo_term = batch_mean(std::move(dpo_terms));
    Tensor sft_term = batch_mean(std::move(sft_terms));
    if (parts) {
        parts->margin = margin_acc / static_cast<double>(batch.size());
        parts->dpo = static_cast<double>(dpo_term.item());
        parts->sft = static_cast<double>(sft_term.item());
    }
    return ops::add(ops::scale(sft_term, cfg.sft_weight), dpo_term);
}

PseudoLabel generate_pseudo(MultimodalLM& teacher, const RasterImage& image, const TokenSeq& prompt, int max_new) {
    Tape::NoGrad guard;
    PseudoLabel out;
    PerturbSpec clean;
    RngStream unused(0);
    const int budget =
        std::min<int>(max_new, teacher.config().max_seq_len - teacher.config().n_patches() - prompt.length());
    for (int step = 0; step < budget; ++step) {
        EmbeddedSequence seq =
            teacher.embed_inputs(image, prompt, out.tokens.ids.empty() ? nullptr : &out.tokens, clean, unused);
        Tensor hidden = teacher.forward_hidden(seq);
        Tensor logits = teacher.head_logits(ops::slice_rows(hidden, seq.length() - 1, seq.length()));
        const float* row = logits.data();
        const int vocab = logits.cols();
        int best = 0;
        for (int v = 1; v < vocab; ++v)
            if (row[v] > row[best]) best = v;
        double denom = 0.0;
        for (int v = 0; v < vocab; ++v) denom += std::exp(static_cast<double>(row[v]) - static_cast<double>(row[best]));
        out.max_probs.push_back(static_cast<float>(1.0 / denom));
        out.tokens.ids.push_back(best);
        out.tokens.roles.push_back(TokenRole::answer);
        if (best == Vocabulary::kEos) break;
    }
    return out;
}

std::pair<TokenSeq, std::vector<uint8_t>> pseudo_label(MultimodalLM& teacher, const RasterImage& image,
                                                       const TokenSeq& prompt, float threshold, int max_new) {
    PseudoLabel pl = generate_pseudo(teacher, image, prompt, max_new);
    std::vector<uint8_t> keep(pl.max_probs.size());
    for (size_t i = 0; i < keep.size(); ++i) keep[i] = pl.max_probs[i] >= threshold ? 1 : 0;
    return {std::move(pl.tokens), std::move(keep)};
}

Tensor semi_unlabeled_loss(MultimodalLM& student, MultimodalLM& teacher, const std::vector<const Example*>& unlabeled,
                           float threshold, const PerturbSpec& perturb_student, RngStream& rng, double* keep_rate,
                           PseudoCache* cache, int max_new) {
    if (unlabeled.empty()) throw EmptyBatchError("semi_unlabeled_loss: empty batch");
    std::vector<Tensor> terms;
    int64_t kept_total = 0, token_total = 0;
    for (size_t i = 0; i < unlabeled.size(); ++i) {
        const Example& e = *unlabeled[i];
        const PseudoLabel* pl;
        PseudoLabel local;
        if (cache) {
            auto it = cache->find(&e);
            if (it == cache->end()) it = cache->emplace(&e, generate_pseudo(teacher, e.image, e.prompt, max_new)).first;
            pl = &it->second;
        } else {
            local = generate_pseudo(teacher, e.image, e.prompt, max_new);
            pl = &local;
        }
        if (pl->tokens.ids.empty()) continue;
        const int alen = pl->tokens.length();
        token_total += alen;
        std::vector<float> mask(static_cast<size_t>(alen), 0.0f);
        int64_t kept = 0;
        for (int j = 0; j < alen; ++j) {
            if (pl->max_probs[static_cast<size_t>(j)] >= threshold) {
                mask[static_cast<size_t>(j)] = 1.0f;
                ++kept;
            }
        }
        kept_total += kept;
        if (kept == 0) continue;  // contributes exactly zero
        RngStream ex_rng = rng.child(i);
        Tensor lp = answer_token_log_probs(student, e.image, e.prompt, pl->tokens, perturb_student, ex_rng);
        Tensor masked = ops::mul(lp, Tensor::from_data({alen}, std::move(mask)));
        terms.push_back(ops::scale(ops::sum_all(masked), -1.0f / static_cast<float>(alen)));
    }
    if (keep_rate) *keep_rate = token_total > 0 ? static_cast<double>(kept_total) / static_cast<double>(token_total) : 0.0;
    if (terms.empty()) return Tensor::scalar(0.0f);
    Tensor total = terms[0];
    for (size_t i = 1; i < terms.size(); ++i) total = ops::add(total, terms[i]);
    return ops::scale(total, 1.0f / static_cast<float>(unlabeled.size()));
}

Tensor semi_loss(MultimodalLM& student, MultimodalLM& teacher, const std::vector<const Example*>& labeled,
                 const std::vector<const Example*>& unlabeled, const SemiConfig& cfg, RngStream& rng,
                 SemiParts* parts, PseudoCache* cache) {
    RngStream rng_u = rng.child("unlabeled");
    RngStream rng_l = rng.child("labeled");
    double keep = 0.0;
    Tensor unlabeled_term = unlabeled.empty()
                                ? Tensor::scalar(0.0f)
                                : semi_unlabeled_loss(student, teacher, unlabeled, cfg.threshold, cfg.perturb_student,
                                                      rng_u, &keep, cache, cfg.max_pseudo_tokens);
    Tensor sft_term = sft_loss(student, labeled, cfg.perturb_student, rng_l);
    if (parts) {
        parts->unlabeled = static_cast<double>(unlabeled_term.item());
        parts->sft = static_cast<double>(sft_term.item());
        parts->keep_rate = keep;
    }
    return ops::add(unlabeled_term, sft_term);
}

double evaluate_sft_loss(MultimodalLM& model, const std::vector<Example>& examples) {
    Tape::NoGrad guard;
    PerturbSpec clean;
    RngStream unused(0);
    double total = 0.0;
    int64_t count = 0;
    for (const Example& e : examples) {
        if (!e.answer) continue;
        Tensor lp = answer_token_log_probs(model, e.image, e.prompt, *e.answer, clean, unused);
        double ex = 0.0;
        for (int64_t i = 0; i < lp.size(); ++i) ex += static_cast<double>(lp.data()[i]);
        total += -ex / static_cast<double>(lp.size());
        ++count;
    }
    if (count == 0) throw EmptyBatchError("evaluate_sft_loss: no labeled examples");
    return total / static_cast<double>(count);
}

void write_metrics_jsonl(const std::vector<MetricsRow>& rows, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot write metrics file: " + path);
    char line[512];
    for (const MetricsRow& r : rows) {
        std::snprintf(line, sizeof(line),
                      "{\"step\":%lld,\"mode\":\"%s\",\"loss_total\":%.9g,\"loss_sft\":%.9g,\"loss_dpo\":%.9g,"
                      "\"loss_unlabeled\":%.9g,\"keep_rate\":%.9g,\"grad_norm\":%.9g,\"seconds\":%.3f}\n",
                      static_cast<long long>(r.step), r.mode.c_str(), r.loss_total, r.loss_sft, r.loss_dpo,
                      r.loss_unlabeled, r.keep_rate, r.grad_norm, r.seconds);
        f << line;
    }
}

namespace {

std::vector<const Example*> sample_batch(const std::vector<Example>& pool, int batch_size, RngStream& rng) {
    std::vector<const Example*> batch;
    batch.reserve(static_cast<size_t>(batch_size));
    for (int i = 0; i < batch_size; ++i) batch.push_back(&pool[rng.next_below(pool.size())]);
    return batch;
}

float warmup_lr(float lr, float ratio, int64_t step, int total_steps) {
    const int warmup = static_cast<int>(std::ceil(ratio * static_cast<float>(total_steps)));
    if (warmup <= 0 || step >= warmup) return lr;
    return lr * static_cast<float>(step + 1) / static_cast<float>(warmup);
}

struct StepLogger {
    std::vector<MetricsRow>& rows;
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

    void log(int64_t step, const char* mode, double total, double sft, double dpo, double unlabeled, double keep,
             double gnorm) {
        MetricsRow r;
        r.step = step;
        r.mode = mode;
        r.loss_total = total;
        r.loss_sft = sft;
        r.loss_dpo = dpo;
        r.loss_unlabeled = unlabeled;
        r.keep_rate = keep;
        r.grad_norm = gnorm;
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        rows.push_back(std::move(r));
    }
};

void maybe_interval_checkpoint(const MultimodalLM& model, const std::string& out_dir, int interval, int64_t step) {
    if (interval <= 0 || step % interval != 0) return;
    char name[64];
    std::snprintf(name, sizeof(name), "step-%06lld.nbck", static_cast<long long>(step));
    model.save_checkpoint((std::filesystem::path(out_dir) / name).string());
}

// One SFT phase over `pool`; logs rows starting at step_base + 1.
int64_t run_sft_phase(MultimodalLM& model, const std::vector<Example>& pool, const PerturbSpec& perturb, float lr,
                      int batch_size, int steps, float warmup_ratio, RngStream& run_rng, int64_t step_base,
                      const char* mode, StepLogger& logger, const std::string& out_dir, int checkpoint_interval) {
    if (pool.empty()) throw DatasetEmptyError("training: labeled pool is empty");
    AdamOptimizer opt(model.parameters(), lr);
    for (int64_t s = 0; s < steps; ++s) {
        const int64_t step = step_base + s + 1;
        RngStream step_rng = run_rng.child("steps").child(static_cast<uint64_t>(step));
        RngStream batch_rng = step_rng.child("batch");
        RngStream perturb_rng = step_rng.child("perturb");
        auto batch = sample_batch(pool, batch_size, batch_rng);

        Tape tape;
        Tensor loss = sft_loss(model, batch, perturb, perturb_rng);
        const double loss_value = loss.item();
        tape.backward(loss);
        const double gnorm = grad_norm(model.parameters());
        opt.set_lr(warmup_lr(lr, warmup_ratio, s, steps));
        opt.step();
        logger.log(step, mode, loss_value, loss_value, 0.0, 0.0, 0.0, gnorm);
        if (!out_dir.empty()) maybe_interval_checkpoint(model, out_dir, checkpoint_interval, step);
    }
    return step_base + steps;
}

}  // namespace

TrainResult run_training(const TrainRunConfig& cfg, const DatasetSplit& data) {
    TrainResult result;
    StepLogger logger{result.metrics};
    RngStream run_rng(cfg.seed);
    const std::filesystem::path out_dir(cfg.out_dir);
    if (!cfg.out_dir.empty()) std::filesystem::create_directories(out_dir);

    const auto save_final = [&](const MultimodalLM& model, const char* name) {
        if (cfg.out_dir.empty()) return std::string();
        const std::string path = (out_dir / name).string();
        model.save_checkpoint(path, nullptr, cfg.seed, 0, static_cast<int64_t>(result.metrics.size()));
        return path;
    };

    switch (cfg.mode) {
        case TrainMode::sft: {
            if (data.labeled.empty()) throw DatasetEmptyError("sft: labeled split is empty");
            RngStream init_rng = run_rng.child("init");
            MultimodalLM model = cfg.init_checkpoint.empty()
                                     ? MultimodalLM(cfg.model, init_rng)
                                     : std::move(*MultimodalLM::load_checkpoint(cfg.init_checkpoint).model);
            run_sft_phase(model, data.labeled, cfg.sft.perturb, cfg.sft.lr, cfg.sft.batch_size, cfg.sft.steps,
                          cfg.sft.warmup_ratio, run_rng, 0, "sft", logger, cfg.out_dir, cfg.sft.checkpoint_interval);
            result.final_checkpoint = save_final(model, "final.nbck");
            break;
        }
        case TrainMode::dpo: {
            if (cfg.init_checkpoint.empty()) throw ConfigError("dpo: requires an SFT checkpoint as --init");
            if (data.labeled.empty()) throw DatasetEmptyError("dpo: labeled split is empty");
            MultimodalLM policy = std::move(*MultimodalLM::load_checkpoint(cfg.init_checkpoint).model);
            MultimodalLM reference = policy.clone();
            reference.freeze();
            auto pairs = build_preference_pairs(data.labeled, Vocabulary::standard(), run_rng.child("pairs"));
            if (pairs.empty()) throw DatasetEmptyError("dpo: no usable preference pairs (all scenes empty?)");
            AdamOptimizer opt(policy.parameters(), cfg.dpo.lr);
            for (int64_t s = 0; s < cfg.dpo.steps; ++s) {
                const int64_t step = s + 1;
                RngStream step_rng = run_rng.child("steps").child(static_cast<uint64_t>(step));
                RngStream batch_rng = step_rng.child("batch");
                RngStream perturb_rng = step_rng.child("perturb");
                std::vector<const PreferencePair*> batch;
                for (int i = 0; i < cfg.dpo.batch_size; ++i) batch.push_back(&pairs[batch_rng.next_below(pairs.size())]);

                Tape tape;
                DpoParts parts;
                Tensor loss = rl_loss(policy, reference, batch, cfg.dpo, perturb_rng, &parts);
                const double loss_value = loss.item();
                tape.backward(loss);
                const double gnorm = grad_norm(policy.parameters());
                opt.set_lr(warmup_lr(cfg.dpo.lr, cfg.dpo.warmup_ratio, s, cfg.dpo.steps));
                opt.step();
                logger.log(step, "dpo", loss_value, parts.sft, parts.dpo, 0.0, 0.0, gnorm);
            }
            result.final_checkpoint = save_final(policy, "final.nbck");
            break;
        }
        case TrainMode::semi: {
            if (data.labeled.empty()) throw DatasetEmptyError("semi: labeled split is empty");
            RngStream init_rng = run_rng.child("init");
            MultimodalLM model(cfg.model, init_rng);
            int64_t step = 0;
            if (cfg.init_checkpoint.empty()) {
                PerturbSpec clean;
                step = run_sft_phase(model, data.labeled, clean, cfg.semi.lr, cfg.semi.batch_size,
                                     cfg.semi.labeled_steps, cfg.semi.warmup_ratio, run_rng, 0, "semi", logger,
                                     cfg.out_dir, 0);
            } else {
                model = std::move(*MultimodalLM::load_checkpoint(cfg.init_checkpoint).model);
            }
            MultimodalLM teacher = model.clone();
            teacher.freeze();
            if (!cfg.out_dir.empty()) {
                result.teacher_checkpoint = (out_dir / "teacher.nbck").string();
                teacher.save_checkpoint(result.teacher_checkpoint, nullptr, cfg.seed, 0, step);
            }

            MultimodalLM& student = model;
            PseudoCache cache;
            AdamOptimizer opt(student.parameters(), cfg.semi.lr);
            const int unlabeled_batch = cfg.semi.mu * cfg.semi.batch_size;
            for (int64_t s = 0; s < cfg.semi.steps; ++s) {
                ++step;
                RngStream step_rng = run_rng.child("steps").child(static_cast<uint64_t>(step));
                RngStream batch_rng = step_rng.child("batch");
                RngStream perturb_rng = step_rng.child("perturb");
                auto labeled = sample_batch(data.labeled, cfg.semi.batch_size, batch_rng);
                std::vector<const Example*> unlabeled;
                if (!data.unlabeled.empty())
                    for (int i = 0; i < unlabeled_batch; ++i)
                        unlabeled.push_back(&data.unlabeled[batch_rng.next_below(data.unlabeled.size())]);

                Tape tape;
                SemiParts parts;
                Tensor loss = semi_loss(student, teacher, labeled, unlabeled, cfg.semi, perturb_rng, &parts, &cache);
                const double loss_value = loss.item();
                tape.backward(loss);
                const double gnorm = grad_norm(student.parameters());
                opt.set_lr(warmup_lr(cfg.semi.lr, cfg.semi.warmup_ratio, s, cfg.semi.steps));
                opt.step();
                logger.log(step, "semi", loss_value, parts.sft, 0.0, parts.unlabeled, parts.keep_rate, gnorm);
            }
            if (!cfg.out_dir.empty()) {
                student.save_checkpoint((out_dir / "student.nbck").string(), nullptr, cfg.seed, 0, step);
            }
            result.final_checkpoint = save_final(student, "final.nbck");
            break;
        }
    }

    if (cfg.metrics_path != "-") {
        std::string metrics_path = cfg.metrics_path;
        if (metrics_path.empty() && !cfg.out_dir.empty()) metrics_path = (out_dir / "metrics.jsonl").string();
        if (!metrics_path.empty()) write_metrics_jsonl(result.metrics, metrics_path);
    }
    return result;
}

}  // namespace nb
