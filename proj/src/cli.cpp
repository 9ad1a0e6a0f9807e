#include "nb/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "nb/kernels.hpp"

namespace nb::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

void check_keys(const json& j, const std::vector<std::string>& allowed, const std::string& ctx) {
    for (const auto& [key, _] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw ConfigError("config: unknown key '" + ctx + key + "'");
    }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(std::string("config: bad value for '") + key + "'");
    }
}

PerturbSpec parse_perturb(const json& j, const std::string& ctx) {
    check_keys(j, {"kind", "scale", "prob", "dropout_rate"}, ctx);
    PerturbSpec spec;
    std::string kind = "none";
    get_if(j, "kind", kind);
    spec.kind = perturb_kind_from_string(kind);
    get_if(j, "scale", spec.scale);
    get_if(j, "prob", spec.prob);
    get_if(j, "dropout_rate", spec.dropout_rate);
    spec.validate();
    return spec;
}

ordered_json perturb_to_json(const PerturbSpec& spec) {
    ordered_json j;
    j["kind"] = perturb_kind_name(spec.kind);
    j["scale"] = spec.scale;
    j["prob"] = spec.prob;
    j["dropout_rate"] = spec.dropout_rate;
    return j;
}

void apply_override(json& doc, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    const std::string path = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;  // bare strings allowed

    json* node = &doc;
    size_t start = 0;
    for (;;) {
        const size_t dot = path.find('.', start);
        const std::string part = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("--set: empty path segment in '" + path + "'");
        if (dot == std::string::npos) {
            (*node)[part] = value;
            break;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
}

}  // namespace

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
    json doc = json::object();
    if (!path.empty()) {
        std::ifstream f(path);
        if (!f) throw ConfigError("config: cannot open " + path);
        doc = json::parse(f, nullptr, false);
        if (doc.is_discarded()) throw ConfigError("config: invalid JSON in " + path);
        if (!doc.is_object()) throw ConfigError("config: top level must be an object");
    }
    for (const std::string& kv : overrides) apply_override(doc, kv);

    check_keys(doc, {"seed", "model", "perturb", "sft", "dpo", "semi"}, "");
    RunConfig rc;
    get_if(doc, "seed", rc.seed);
    if (doc.contains("model")) {
        const json& m = doc["model"];
        check_keys(m, {"d_model", "n_heads", "n_lm_layers", "n_vision_layers", "d_vision", "patch_size", "max_seq_len"},
                   "model.");
        get_if(m, "d_model", rc.model.d_model);
        get_if(m, "n_heads", rc.model.n_heads);
        get_if(m, "n_lm_layers", rc.model.n_lm_layers);
        get_if(m, "n_vision_layers", rc.model.n_vision_layers);
        get_if(m, "d_vision", rc.model.d_vision);
        get_if(m, "patch_size", rc.model.patch_size);
        get_if(m, "max_seq_len", rc.model.max_seq_len);
    }
    rc.model.vocab_size = Vocabulary::standard().size();
    rc.model.validate();
    if (doc.contains("perturb")) rc.perturb = parse_perturb(doc["perturb"], "perturb.");
    if (doc.contains("sft")) {
        const json& s = doc["sft"];
        check_keys(s, {"lr", "batch_size", "steps", "warmup_ratio", "checkpoint_interval"}, "sft.");
        get_if(s, "lr", rc.sft.lr);
        get_if(s, "batch_size", rc.sft.batch_size);
        get_if(s, "steps", rc.sft.steps);
        get_if(s, "warmup_ratio", rc.sft.warmup_ratio);
        get_if(s, "checkpoint_interval", rc.sft.checkpoint_interval);
    }
    rc.sft.perturb = rc.perturb;
    if (doc.contains("dpo")) {
        const json& d = doc["dpo"];
        check_keys(d, {"beta", "sft_weight", "lr", "batch_size", "steps", "warmup_ratio", "perturb_w", "perturb_l"},
                   "dpo.");
        get_if(d, "beta", rc.dpo.beta);
        get_if(d, "sft_weight", rc.dpo.sft_weight);
        get_if(d, "lr", rc.dpo.lr);
        get_if(d, "batch_size", rc.dpo.batch_size);
        get_if(d, "steps", rc.dpo.steps);
        get_if(d, "warmup_ratio", rc.dpo.warmup_ratio);
        if (d.contains("perturb_w")) rc.dpo.perturb_w = parse_perturb(d["perturb_w"], "dpo.perturb_w.");
        if (d.contains("perturb_l")) rc.dpo.perturb_l = parse_perturb(d["perturb_l"], "dpo.perturb_l.");
        if (rc.dpo.beta <= 0.0f) throw ConfigError("config: dpo.beta must be positive");
    }
    if (doc.contains("semi")) {
        const json& s = doc["semi"];
        check_keys(s,
                   {"threshold", "mu", "lr", "batch_size", "labeled_steps", "steps", "warmup_ratio",
                    "max_pseudo_tokens", "perturb_student"},
                   "semi.");
        get_if(s, "threshold", rc.semi.threshold);
        get_if(s, "mu", rc.semi.mu);
        get_if(s, "lr", rc.semi.lr);
        get_if(s, "batch_size", rc.semi.batch_size);
        get_if(s, "labeled_steps", rc.semi.labeled_steps);
        get_if(s, "steps", rc.semi.steps);
        get_if(s, "warmup_ratio", rc.semi.warmup_ratio);
        get_if(s, "max_pseudo_tokens", rc.semi.max_pseudo_tokens);
        if (s.contains("perturb_student")) rc.semi.perturb_student = parse_perturb(s["perturb_student"], "semi.perturb_student.");
        if (rc.semi.threshold <= 0.0f || rc.semi.threshold > 1.0f)
            throw ConfigError("config: semi.threshold must be in (0,1]");
        if (rc.semi.mu < 1) throw ConfigError("config: semi.mu must be >= 1");
    }

    if (const char* env = std::getenv("NOISEBOOST_SEED")) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(env, &end, 10);
        if (end == env || *end != '\0') throw ConfigError("NOISEBOOST_SEED must be an unsigned integer");
        rc.seed = static_cast<uint64_t>(v);
    }
    return rc;
}

namespace {

ordered_json run_config_to_json(const RunConfig& rc) {
    ordered_json j;
    j["seed"] = rc.seed;
    j["model"] = {{"d_model", rc.model.d_model},
                  {"n_heads", rc.model.n_heads},
                  {"n_lm_layers", rc.model.n_lm_layers},
                  {"n_vision_layers", rc.model.n_vision_layers},
                  {"d_vision", rc.model.d_vision},
                  {"patch_size", rc.model.patch_size},
                  {"max_seq_len", rc.model.max_seq_len}};
    j["perturb"] = perturb_to_json(rc.perturb);
    j["sft"] = {{"lr", rc.sft.lr},
                {"batch_size", rc.sft.batch_size},
                {"steps", rc.sft.steps},
                {"warmup_ratio", rc.sft.warmup_ratio},
                {"checkpoint_interval", rc.sft.checkpoint_interval}};
    j["dpo"] = {{"beta", rc.dpo.beta},
                {"sft_weight", rc.dpo.sft_weight},
                {"lr", rc.dpo.lr},
                {"batch_size", rc.dpo.batch_size},
                {"steps", rc.dpo.steps},
                {"warmup_ratio", rc.dpo.warmup_ratio},
                {"perturb_w", perturb_to_json(rc.dpo.perturb_w)},
                {"perturb_l", perturb_to_json(rc.dpo.perturb_l)}};
    j["semi"] = {{"threshold", rc.semi.threshold},
                 {"mu", rc.semi.mu},
                 {"lr", rc.semi.lr},
                 {"batch_size", rc.semi.batch_size},
                 {"labeled_steps", rc.semi.labeled_steps},
                 {"steps", rc.semi.steps},
                 {"warmup_ratio", rc.semi.warmup_ratio},
                 {"max_pseudo_tokens", rc.semi.max_pseudo_tokens},
                 {"perturb_student", perturb_to_json(rc.semi.perturb_student)}};
    return j;
}

}  // namespace

void dump_effective_config(const RunConfig& rc, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot write effective config: " + path);
    f << run_config_to_json(rc).dump(2) << "\n";
}

int cmd_gen_data(const GenDataArgs& args) {
    if (args.out.empty()) throw ConfigError("gen-data: --out is required");
    if (args.scenes <= 0) throw ConfigError("gen-data: --scenes must be positive");
    fs::create_directories(args.out);

    std::vector<Example> corpus = generate_corpus(args.scenes, RngStream(args.seed).child("corpus"));
    const int total = static_cast<int>(corpus.size());
    int eval_count = args.eval_count >= 0 ? args.eval_count : total / 10;
    if (eval_count >= total) throw ConfigError("gen-data: --eval-count must be below the example count");

    RngStream split_rng = RngStream(args.seed).child("split");
    DatasetSplit split = split_dataset(std::move(corpus), args.labeled_fraction, eval_count, split_rng);

    const fs::path out(args.out);
    serialize_dataset(split.labeled, (out / "labeled.nbds").string());
    serialize_dataset(split.unlabeled, (out / "unlabeled.nbds").string());
    serialize_dataset(split.eval, (out / "eval.nbds").string());

    ordered_json manifest;
    manifest["format"] = "NBDS";
    manifest["version"] = 1;
    manifest["scenes"] = args.scenes;
    manifest["seed"] = args.seed;
    manifest["labeled_fraction"] = args.labeled_fraction;
    manifest["eval_count"] = eval_count;
    manifest["counts"] = {{"labeled", split.labeled.size()},
                          {"unlabeled", split.unlabeled.size()},
                          {"eval", split.eval.size()}};
    manifest["files"] = {{"labeled", "labeled.nbds"}, {"unlabeled", "unlabeled.nbds"}, {"eval", "eval.nbds"}};
    std::ofstream mf(out / "manifest.json", std::ios::trunc);
    if (!mf) throw Error("cannot write manifest");
    mf << manifest.dump(2) << "\n";

    std::printf("gen-data: %d scenes -> %zu labeled / %zu unlabeled / %zu eval examples in %s\n", args.scenes,
                split.labeled.size(), split.unlabeled.size(), split.eval.size(), args.out.c_str());
    return 0;
}

LoadedData load_data_dir(const std::string& dir) {
    const fs::path manifest_path = fs::path(dir) / "manifest.json";
    std::ifstream mf(manifest_path);
    if (!mf) throw DataError("data: cannot open " + manifest_path.string());
    json manifest = json::parse(mf, nullptr, false);
    if (manifest.is_discarded()) throw DataError("data: invalid manifest JSON");

    LoadedData data;
    data.seed = manifest.value("seed", 0ull);
    data.scenes = manifest.value("scenes", 0);
    const json files = manifest.value("files", json::object());
    data.split.labeled = load_dataset((fs::path(dir) / files.value("labeled", "labeled.nbds")).string());
    data.split.unlabeled = load_dataset((fs::path(dir) / files.value("unlabeled", "unlabeled.nbds")).string());
    data.split.eval = load_dataset((fs::path(dir) / files.value("eval", "eval.nbds")).string());
    return data;
}

int cmd_train(const TrainArgs& args) {
    if (args.data_dir.empty()) throw ConfigError("train: --data is required");
    RunConfig rc = load_run_config(args.config_path, args.overrides);
    const TrainMode mode = train_mode_from_string(args.mode);
    if (mode == TrainMode::dpo && args.init_checkpoint.empty())
        throw ConfigError("train: --mode dpo requires --init with an SFT checkpoint");

    LoadedData data = load_data_dir(args.data_dir);

    TrainRunConfig cfg;
    cfg.mode = mode;
    cfg.seed = rc.seed;
    cfg.model = rc.model;
    cfg.sft = rc.sft;
    cfg.dpo = rc.dpo;
    cfg.semi = rc.semi;
    cfg.init_checkpoint = args.init_checkpoint;
    cfg.out_dir = args.out_dir;
    cfg.metrics_path = args.metrics_path;

    fs::create_directories(args.out_dir);
    dump_effective_config(rc, (fs::path(args.out_dir) / "effective_config.json").string());

    TrainResult result = run_training(cfg, data.split);
    const MetricsRow& last = result.metrics.back();
    std::printf("train: mode=%s steps=%zu final_loss=%.6f checkpoint=%s\n", args.mode.c_str(), result.metrics.size(),
                last.loss_total, result.final_checkpoint.c_str());
    return 0;
}

namespace {

std::vector<Scene> dedup_scenes(const std::vector<Example>& examples) {
    std::vector<Scene> scenes;
    std::vector<uint64_t> seen;
    for (const Example& e : examples) {
        if (std::find(seen.begin(), seen.end(), e.scene.scene_id) != seen.end()) continue;
        seen.push_back(e.scene.scene_id);
        scenes.push_back(e.scene);
    }
    return scenes;
}

ordered_json probe_report_json(const ProbeReport& r) {
    ordered_json j;
    j["n"] = r.n;
    j["accuracy"] = r.accuracy;
    j["yes_rate"] = r.yes_rate;
    j["precision"] = r.precision;
    j["recall"] = r.recall;
    j["f1"] = r.f1;
    j["invalid"] = r.invalid;
    return j;
}

ordered_json caption_report_json(const CaptionErrorReport& r) {
    ordered_json counts;
    for (int c = 0; c < kNumCaptionCategories; ++c)
        counts[caption_category_name(static_cast<CaptionCategory>(c))] = r.counts[c];
    ordered_json j;
    j["n"] = r.n;
    j["counts"] = std::move(counts);
    j["hallucination_rate"] = r.hallucination_rate;
    return j;
}

char hex_digit(uint32_t v) { return "0123456789abcdef"[v & 0xf]; }

std::string hash_hex(uint32_t h) {
    std::string s(8, '0');
    for (int i = 7; i >= 0; --i) {
        s[static_cast<size_t>(i)] = hex_digit(h);
        h >>= 4;
    }
    return s;
}

}  // namespace

int cmd_eval(const EvalArgs& args) {
    if (args.checkpoint.empty()) throw ConfigError("eval: --checkpoint is required");
    if (args.data_dir.empty()) throw ConfigError("eval: --data is required");
    if (!args.probes && !args.captions) throw ConfigError("eval: pass --probes and/or --captions");

    auto loaded = MultimodalLM::load_checkpoint(args.checkpoint);
    MultimodalLM& model = *loaded.model;
    LoadedData data = load_data_dir(args.data_dir);
    if (data.split.eval.empty()) throw DataError("eval: dataset has no eval split");
    const Vocabulary& vocab = Vocabulary::standard();

    ordered_json report;
    report["config_hash"] = hash_hex(model.config_hash());
    if (args.probes) {
        const auto probes = probes_from_examples(data.split.eval, vocab, RngStream(data.seed).child("eval-probes"));
        const ProbeReport r = evaluate_probes(model, probes);
        report["probes"] = probe_report_json(r);
        std::printf("eval: probes n=%d accuracy=%.4f yes_rate=%.4f f1=%.4f invalid=%d\n", r.n, r.accuracy, r.yes_rate,
                    r.f1, r.invalid);
    }
    if (args.captions) {
        const auto scenes = dedup_scenes(data.split.eval);
        const CaptionErrorReport r = evaluate_captions(model, scenes, vocab);
        report["captions"] = caption_report_json(r);
        std::printf("eval: captions n=%d correct=%d hallucination_rate=%.4f\n", r.n, r.count(CaptionCategory::correct),
                    r.hallucination_rate);
    }
    std::ofstream f(args.report_path, std::ios::trunc);
    if (!f) throw Error("cannot write report: " + args.report_path);
    f << report.dump(2) << "\n";
    return 0;
}

int cmd_ablate(const AblateArgs& args) {
    if (args.data_dir.empty()) throw ConfigError("ablate: --data is required");
    if (args.seeds < 1) throw ConfigError("ablate: --seeds must be >= 1");
    RunConfig rc = load_run_config(args.config_path, args.overrides);
    LoadedData data = load_data_dir(args.data_dir);

    TrainRunConfig base;
    base.mode = TrainMode::sft;
    base.model = rc.model;
    base.sft = rc.sft;
    base.dpo = rc.dpo;
    base.semi = rc.semi;

    AblationOptions options;
    options.out_dir = args.out_dir;
    options.seeds.clear();
    for (int k = 0; k < args.seeds; ++k) options.seeds.push_back(args.seed_base + static_cast<uint64_t>(k));

    fs::create_directories(args.out_dir);
    dump_effective_config(rc, (fs::path(args.out_dir) / "effective_config.json").string());
    AblationGrid grid = run_ablation_grid(args.probs, args.scales, base, data.split, options);
    write_ablation_csv(grid, (fs::path(args.out_dir) / "grid.csv").string());
    write_ablation_json(grid, (fs::path(args.out_dir) / "grid.json").string());
    std::printf("ablate: %zu x %zu grid, %d seed(s), results in %s\n", args.probs.size(), args.scales.size(),
                args.seeds, args.out_dir.c_str());
    return 0;
}

int cmd_attn_map(const AttnMapArgs& args) {
    if (args.checkpoint.empty()) throw ConfigError("attn-map: --checkpoint is required");
    if (args.data_dir.empty()) throw ConfigError("attn-map: --data is required");

    auto loaded = MultimodalLM::load_checkpoint(args.checkpoint);
    MultimodalLM& model = *loaded.model;
    LoadedData data = load_data_dir(args.data_dir);

    const Scene* scene = nullptr;
    for (const auto* pool : {&data.split.labeled, &data.split.unlabeled, &data.split.eval}) {
        for (const Example& e : *pool)
            if (e.scene.scene_id == args.scene_id) {
                scene = &e.scene;
                break;
            }
        if (scene) break;
    }
    if (!scene) throw SceneNotFoundError("attn-map: scene " + std::to_string(args.scene_id) + " not in dataset");

    const Vocabulary& vocab = Vocabulary::standard();
    GenerationResult gen = model.generate_greedy(rasterize(*scene), caption_prompt(vocab), 32, true);
    const CorrelationMap map = attention_correlation(gen.attention);
    const double mass = visual_attention_mass(map);
    const double anchor = map.steps >= 2 ? anchor_column_score(map) : 0.0;
    write_pgm(map, args.out_base + ".pgm");
    write_map_sidecar(map, mass, anchor, args.out_base + ".json");
    std::printf("attn-map: scene=%llu steps=%d context=%d visual_attention_mass=%.6f anchor_column_score=%.6f\n",
                static_cast<unsigned long long>(args.scene_id), map.steps, map.context, mass, anchor);
    std::printf("attn-map: caption: %s\n", gen.tokens.text(vocab).c_str());
    return 0;
}

int run_main(int argc, char** argv) {
    CLI::App app{"noiseboost: a desk-scale multimodal training lab with feature-noise regularization"};
    app.require_subcommand(1);
    int threads = 0;
    bool serial = false;
    app.add_option("--threads", threads, "OpenMP thread count (0 = runtime default)");
    app.add_flag("--serial", serial, "force the serial kernel backend");

    GenDataArgs gen_args;
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic shape-captioning dataset");
    gen->add_option("--out", gen_args.out, "output directory")->required();
    gen->add_option("--scenes", gen_args.scenes, "number of scenes");
    gen->add_option("--seed", gen_args.seed, "generation seed");
    gen->add_option("--labeled-fraction", gen_args.labeled_fraction, "labeled fraction (0.3, 0.5 or 1.0)");
    gen->add_option("--eval-count", gen_args.eval_count, "held-out eval examples");

    TrainArgs train_args;
    auto* train = app.add_subcommand("train", "train a model (sft, dpo or semi)");
    train->add_option("--mode", train_args.mode, "sft | dpo | semi");
    train->add_option("--config", train_args.config_path, "JSON run config");
    train->add_option("--data", train_args.data_dir, "dataset directory");
    train->add_option("--init", train_args.init_checkpoint, "initial checkpoint (required for dpo)");
    train->add_option("--out", train_args.out_dir, "output directory");
    train->add_option("--metrics", train_args.metrics_path, "metrics JSONL path");
    train->add_option("--set", train_args.overrides, "config override key=value (repeatable)");

    EvalArgs eval_args;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--checkpoint", eval_args.checkpoint, "checkpoint path");
    eval->add_option("--data", eval_args.data_dir, "dataset directory");
    eval->add_option("--report", eval_args.report_path, "report JSON path");
    eval->add_flag("--probes", eval_args.probes, "run the yes/no probe evaluation");
    eval->add_flag("--captions", eval_args.captions, "run the caption judge evaluation");

    AblateArgs ablate_args;
    auto* ablate = app.add_subcommand("ablate", "noise prob x scale ablation grid");
    ablate->add_option("--data", ablate_args.data_dir, "dataset directory");
    ablate->add_option("--out", ablate_args.out_dir, "output directory");
    ablate->add_option("--config", ablate_args.config_path, "JSON run config");
    ablate->add_option("--probs", ablate_args.probs, "noise trigger probabilities")->delimiter(',');
    ablate->add_option("--scales", ablate_args.scales, "noise scales")->delimiter(',');
    ablate->add_option("--seeds", ablate_args.seeds, "seeds per cell");
    ablate->add_option("--seed-base", ablate_args.seed_base, "first seed value");
    ablate->add_option("--set", ablate_args.overrides, "config override key=value (repeatable)");

    AttnMapArgs attn_args;
    auto* attn = app.add_subcommand("attn-map", "export a token correlation heatmap");
    attn->add_option("--checkpoint", attn_args.checkpoint, "checkpoint path");
    attn->add_option("--data", attn_args.data_dir, "dataset directory");
    attn->add_option("--scene-id", attn_args.scene_id, "scene id to visualize");
    attn->add_option("--out", attn_args.out_base, "output base path (.pgm/.json)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (threads > 0) kernels::set_threads(threads);
        if (serial) kernels::set_backend(kernels::Backend::serial);
        if (gen->parsed()) return cmd_gen_data(gen_args);
        if (train->parsed()) return cmd_train(train_args);
        if (eval->parsed()) return cmd_eval(eval_args);
        if (ablate->parsed()) return cmd_ablate(ablate_args);
        if (attn->parsed()) return cmd_attn_map(attn_args);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const NonFiniteError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}

}  // namespace nb::cli
