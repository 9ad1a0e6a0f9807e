#include "nb/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace nb {

CorrelationMap attention_correlation(const AttentionRecord& record, int layer) {
    if (record.empty()) throw EmptyRecordError("attention_correlation: empty record");
    const int n_layers = static_cast<int>(record.rows[0].size());
    if (layer < 0) layer = n_layers - 1;
    if (layer >= n_layers) throw Error("attention_correlation: layer out of range");

    CorrelationMap map;
    map.steps = record.steps();
    for (int i = 0; i < map.steps; ++i)
        map.context = std::max(map.context, static_cast<int>(record.rows[static_cast<size_t>(i)][static_cast<size_t>(layer)].size()));
    map.values.assign(static_cast<size_t>(map.steps) * map.context, 0.0f);
    map.row_context.resize(static_cast<size_t>(map.steps));
    for (int i = 0; i < map.steps; ++i) {
        const auto& row = record.rows[static_cast<size_t>(i)][static_cast<size_t>(layer)];
        map.row_context[static_cast<size_t>(i)] = static_cast<int>(row.size());
        std::copy(row.begin(), row.end(), map.values.begin() + static_cast<size_t>(i) * map.context);
    }
    map.column_modality.resize(static_cast<size_t>(map.context));
    for (int j = 0; j < map.context; ++j) {
        if (j < record.visual_len) map.column_modality[static_cast<size_t>(j)] = Modality::visual;
        else if (j < record.visual_len + record.prompt_len) map.column_modality[static_cast<size_t>(j)] = Modality::prompt;
        else map.column_modality[static_cast<size_t>(j)] = Modality::answer;
    }
    return map;
}

double visual_attention_mass(const CorrelationMap& map) {
    if (map.steps == 0) throw EmptyRecordError("visual_attention_mass: empty map");
    double total = 0.0;
    for (int i = 0; i < map.steps; ++i) {
        double row_mass = 0.0;
        for (int j = 0; j < map.context; ++j)
            if (map.column_modality[static_cast<size_t>(j)] == Modality::visual) row_mass += map.at(i, j);
        total += row_mass;
    }
    return total / map.steps;
}

double anchor_column_score(const CorrelationMap& map) {
    if (map.steps < 2) throw TooFewRowsError("anchor_column_score: need at least 2 rows");
    double best = 0.0;
    for (int j = 0; j < map.context; ++j) {
        if (map.column_modality[static_cast<size_t>(j)] == Modality::visual) continue;
        double acc = 0.0;
        int rows = 0;
        for (int i = 0; i < map.steps; ++i) {
            if (map.row_context[static_cast<size_t>(i)] <= j) continue;
            acc += map.at(i, j);
            ++rows;
        }
        if (rows > 0) best = std::max(best, acc / rows);
    }
    return best;
}

std::optional<bool> probe_answer_from_tokens(const TokenSeq& generated) {
    for (int id : generated.ids) {
        if (id == Vocabulary::kPad || id == Vocabulary::kBos || id == Vocabulary::kEos) continue;
        if (id == Vocabulary::kYes) return true;
        if (id == Vocabulary::kNo) return false;
        return std::nullopt;  // first content token is something else
    }
    return std::nullopt;
}

ProbeReport evaluate_probes(const ProbeAnswerer& answerer, const std::vector<ProbeQuestion>& probes) {
    if (probes.empty()) throw EmptyBatchError("evaluate_probes: no probes");
    ProbeReport r;
    r.n = static_cast<int>(probes.size());
    int predicted_yes = 0;
    for (const ProbeQuestion& p : probes) {
        const std::optional<bool> predicted = answerer(p);
        if (!predicted) {
            ++r.invalid;  // counted wrong; a missed yes when the answer was yes
            if (p.answer_yes) ++r.fn;
            else ++r.tn;  // it did not claim yes
            continue;
        }
        if (*predicted) ++predicted_yes;
        if (*predicted && p.answer_yes) ++r.tp;
        else if (*predicted && !p.answer_yes) ++r.fp;
        else if (!*predicted && p.answer_yes) ++r.fn;
        else ++r.tn;
        if (*predicted == p.answer_yes) ++r.correct;
    }
    r.accuracy = static_cast<double>(r.correct) / r.n;
    r.yes_rate = static_cast<double>(predicted_yes) / r.n;
    r.precision = r.tp + r.fp > 0 ? static_cast<double>(r.tp) / (r.tp + r.fp) : 0.0;
    r.recall = r.tp + r.fn > 0 ? static_cast<double>(r.tp) / (r.tp + r.fn) : 0.0;
    r.f1 = r.precision + r.recall > 0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
    return r;
}

ProbeReport evaluate_probes(MultimodalLM& model, const std::vector<ProbeQuestion>& probes) {
    return evaluate_probes(
        [&model](const ProbeQuestion& p) {
            GenerationResult gen = model.generate_greedy(p.image, p.prompt, 4, false);
            return probe_answer_from_tokens(gen.tokens);
        },
        probes);
}

const char* caption_category_name(CaptionCategory c) {
    switch (c) {
        case CaptionCategory::correct: return "correct";
        case CaptionCategory::object: return "object";
        case CaptionCategory::color: return "color";
        case CaptionCategory::number: return "number";
        case CaptionCategory::position: return "position";
        case CaptionCategory::hallucination: return "hallucination";
        case CaptionCategory::other: return "other";
    }
    return "?";
}

ClaimJudgment judge_claim(const Scene& scene, const CaptionClaim& claim) {
    if (scene.has_exact(claim.color, claim.shape, claim.position)) return ClaimJudgment::correct;
    if (scene.has_pair(claim.color, claim.shape)) return ClaimJudgment::position;
    for (const auto& o : scene.objects)
        if (o.shape == claim.shape && o.position() == claim.position) return ClaimJudgment::color;
    for (const auto& o : scene.objects)
        if (o.color == claim.color && o.position() == claim.position) return ClaimJudgment::object;
    return ClaimJudgment::hallucination;
}

CaptionCategory judge_caption(const Scene& scene, const TokenSeq& caption, const Vocabulary& vocab) {
    const auto parsed = parse_caption(caption, vocab);
    if (!parsed) return CaptionCategory::other;
    bool any_halluc = false, any_object = false, any_color = false, any_position = false;
    for (const CaptionClaim& claim : parsed->claims) {
        switch (judge_claim(scene, claim)) {
            case ClaimJudgment::correct: break;
            case ClaimJudgment::position: any_position = true; break;
            case ClaimJudgment::color: any_color = true; break;
            case ClaimJudgment::object: any_object = true; break;
            case ClaimJudgment::hallucination: any_halluc = true; break;
        }
    }
    if (any_halluc) return CaptionCategory::hallucination;
    if (any_object) return CaptionCategory::object;
    if (any_color) return CaptionCategory::color;
    if (any_position) return CaptionCategory::position;
    if (parsed->claims.size() != scene.objects.size()) return CaptionCategory::number;
    return CaptionCategory::correct;
}

CaptionErrorReport evaluate_captions(MultimodalLM& model, const std::vector<Scene>& scenes, const Vocabulary& vocab,
                                     int max_new) {
    if (scenes.empty()) throw EmptyBatchError("evaluate_captions: no scenes");
    CaptionErrorReport report;
    report.n = static_cast<int>(scenes.size());
    for (const Scene& scene : scenes) {
        const RasterImage image = rasterize(scene);
        GenerationResult gen = model.generate_greedy(image, caption_prompt(vocab), max_new, false);
        const CaptionCategory cat = judge_caption(scene, gen.tokens, vocab);
        ++report.counts[static_cast<int>(cat)];
    }
    report.hallucination_rate = static_cast<double>(report.count(CaptionCategory::hallucination)) / report.n;
    return report;
}

double mean_visual_attention_mass(MultimodalLM& model, const std::vector<Scene>& scenes, const Vocabulary& vocab,
                                  int max_new) {
    if (scenes.empty()) throw EmptyBatchError("mean_visual_attention_mass: no scenes");
    double total = 0.0;
    for (const Scene& scene : scenes) {
        const RasterImage image = rasterize(scene);
        GenerationResult gen = model.generate_greedy(image, caption_prompt(vocab), max_new, true);
        total += visual_attention_mass(attention_correlation(gen.attention));
    }
    return total / static_cast<double>(scenes.size());
}

void write_pgm(const CorrelationMap& map, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write PGM: " + path);
    float max_v = 0.0f;
    for (float v : map.values) max_v = std::max(max_v, v);
    f << "P5\n" << map.context << " " << map.steps << "\n255\n";
    for (float v : map.values) {
        const int byte = max_v > 0.0f ? static_cast<int>(std::lround(255.0f * v / max_v)) : 0;
        f.put(static_cast<char>(std::clamp(byte, 0, 255)));
    }
}

namespace {

const char* modality_label(Modality m) {
    switch (m) {
        case Modality::visual: return "visual";
        case Modality::prompt: return "prompt";
        case Modality::answer: return "generated";
    }
    return "?";
}

}  // namespace

void write_map_sidecar(const CorrelationMap& map, double visual_mass, double anchor_score, const std::string& path) {
    nlohmann::ordered_json j;
    j["steps"] = map.steps;
    j["context"] = map.context;
    nlohmann::ordered_json cols = nlohmann::ordered_json::array();
    for (Modality m : map.column_modality) cols.push_back(modality_label(m));
    j["columns"] = std::move(cols);
    j["row_context"] = map.row_context;
    j["visual_attention_mass"] = visual_mass;
    j["anchor_column_score"] = anchor_score;
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot write sidecar: " + path);
    f << j.dump(2) << "\n";
}

namespace {

std::vector<Scene> eval_scenes(const DatasetSplit& data) {
    std::vector<Scene> scenes;
    std::vector<uint64_t> seen;
    for (const Example& e : data.eval) {
        if (std::find(seen.begin(), seen.end(), e.scene.scene_id) != seen.end()) continue;
        seen.push_back(e.scene.scene_id);
        scenes.push_back(e.scene);
    }
    return scenes;
}

struct CellEval {
    double probe_acc, hall_rate, visual_mass, final_loss;
};

CellEval evaluate_cell(MultimodalLM& model, const DatasetSplit& data, const std::vector<Scene>& scenes,
                       uint64_t seed, int attention_scenes) {
    const Vocabulary& vocab = Vocabulary::standard();
    CellEval out;
    const auto probes = probes_from_examples(data.eval, vocab, RngStream(seed).child("eval-probes"));
    out.probe_acc = evaluate_probes(model, probes).accuracy;
    out.hall_rate = evaluate_captions(model, scenes, vocab).hallucination_rate;
    std::vector<Scene> attn(scenes.begin(),
                            scenes.begin() + std::min<size_t>(scenes.size(), static_cast<size_t>(attention_scenes)));
    out.visual_mass = mean_visual_attention_mass(model, attn, vocab);
    out.final_loss = evaluate_sft_loss(model, data.labeled);
    return out;
}

}  // namespace

AblationGrid run_ablation_grid(const std::vector<double>& probs, const std::vector<double>& scales,
                               const TrainRunConfig& base, const DatasetSplit& data, const AblationOptions& options) {
    if (probs.empty() || scales.empty()) throw ConfigError("ablation: prob and scale axes must be non-empty");
    if (options.seeds.empty()) throw ConfigError("ablation: need at least one seed");
    AblationGrid grid;
    grid.probs = probs;
    grid.scales = scales;

    const std::filesystem::path out_dir(options.out_dir);
    if (!options.out_dir.empty()) std::filesystem::create_directories(out_dir);
    const std::vector<Scene> scenes = eval_scenes(data);

    for (size_t pi = 0; pi < probs.size(); ++pi) {
        for (size_t si = 0; si < scales.size(); ++si) {
            AblationCellResult cell;
            cell.prob = probs[pi];
            cell.scale = scales[si];
            for (size_t ki = 0; ki < options.seeds.size(); ++ki) {
                const uint64_t seed = options.seeds[ki];
                char tag[96];
                std::snprintf(tag, sizeof(tag), "cell_p%zu_s%zu_seed%llu", pi, si,
                              static_cast<unsigned long long>(seed));
                const std::filesystem::path cell_json = out_dir / (std::string(tag) + ".json");

                if (!options.out_dir.empty() && std::filesystem::exists(cell_json)) {
                    std::ifstream in(cell_json);
                    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
                    if (!j.is_discarded() && j.contains("probe_acc")) {
                        cell.probe_acc.push_back(j["probe_acc"].get<double>());
                        cell.hall_rate.push_back(j["hall_rate"].get<double>());
                        cell.visual_mass.push_back(j["visual_mass"].get<double>());
                        cell.final_loss.push_back(j["final_loss"].get<double>());
                        continue;
                    }
                }

                TrainRunConfig cfg = base;
                cfg.mode = TrainMode::sft;
                cfg.seed = seed;
                cfg.sft.perturb.kind = PerturbKind::gaussian_feature;
                cfg.sft.perturb.prob = static_cast<float>(probs[pi]);
                cfg.sft.perturb.scale = static_cast<float>(scales[si]);
                cfg.out_dir = options.out_dir.empty() ? "" : (out_dir / tag).string();
                cfg.metrics_path = "-";
                TrainResult tr = run_training(cfg, data);

                MultimodalLM model = cfg.out_dir.empty()
                                         ? throw Error("ablation: out_dir required")
                                         : std::move(*MultimodalLM::load_checkpoint(tr.final_checkpoint).model);
                const CellEval ev = evaluate_cell(model, data, scenes, seed, options.attention_scenes);
                cell.probe_acc.push_back(ev.probe_acc);
                cell.hall_rate.push_back(ev.hall_rate);
                cell.visual_mass.push_back(ev.visual_mass);
                cell.final_loss.push_back(ev.final_loss);

                if (!options.out_dir.empty()) {
                    nlohmann::ordered_json j;
                    j["prob"] = probs[pi];
                    j["scale"] = scales[si];
                    j["seed"] = seed;
                    j["probe_acc"] = ev.probe_acc;
                    j["hall_rate"] = ev.hall_rate;
                    j["visual_mass"] = ev.visual_mass;
                    j["final_loss"] = ev.final_loss;
                    j["checkpoint"] = tr.final_checkpoint;
                    std::ofstream out(cell_json, std::ios::trunc);
                    out << j.dump(2) << "\n";
                }
            }
            grid.cells.push_back(std::move(cell));
        }
    }
    return grid;
}

namespace {

struct MeanStd {
    double mean = 0.0, sd = 0.0;
};

MeanStd mean_std(const std::vector<double>& xs) {
    MeanStd ms;
    if (xs.empty()) return ms;
    for (double x : xs) ms.mean += x;
    ms.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double acc = 0.0;
        for (double x : xs) acc += (x - ms.mean) * (x - ms.mean);
        ms.sd = std::sqrt(acc / static_cast<double>(xs.size() - 1));
    }
    return ms;
}

}  // namespace

void write_ablation_csv(const AblationGrid& grid, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot write ablation csv: " + path);
    f << "prob,scale,seeds,probe_acc_mean,probe_acc_std,hall_rate_mean,hall_rate_std,"
         "visual_mass_mean,visual_mass_std,final_loss_mean,final_loss_std\n";
    char line[512];
    for (const auto& cell : grid.cells) {
        const MeanStd pa = mean_std(cell.probe_acc), hr = mean_std(cell.hall_rate), vm = mean_std(cell.visual_mass),
                      fl = mean_std(cell.final_loss);
        std::snprintf(line, sizeof(line), "%g,%g,%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", cell.prob, cell.scale,
                      cell.probe_acc.size(), pa.mean, pa.sd, hr.mean, hr.sd, vm.mean, vm.sd, fl.mean, fl.sd);
        f << line;
    }
}

void write_ablation_json(const AblationGrid& grid, const std::string& path) {
    nlohmann::ordered_json j;
    j["probs"] = grid.probs;
    j["scales"] = grid.scales;
    nlohmann::ordered_json cells = nlohmann::ordered_json::array();
    for (const auto& cell : grid.cells) {
        nlohmann::ordered_json c;
        c["prob"] = cell.prob;
        c["scale"] = cell.scale;
        c["probe_acc"] = cell.probe_acc;
        c["hall_rate"] = cell.hall_rate;
        c["visual_mass"] = cell.visual_mass;
        c["final_loss"] = cell.final_loss;
        cells.push_back(std::move(c));
    }
    j["cells"] = std::move(cells);
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot write ablation json: " + path);
    f << j.dump(2) << "\n";
}

}  // namespace nb
