// uapdet: train a small CNN, generate universal adversarial perturbations,
// calibrate and run the activation-statistics detector, and report metrics.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "uapdet/attacks.hpp"
#include "uapdet/bench.hpp"
#include "uapdet/data.hpp"
#include "uapdet/detector.hpp"
#include "uapdet/metrics.hpp"
#include "uapdet/model.hpp"

namespace fs = std::filesystem;
using namespace uapdet;
using nlohmann::json;

namespace {

struct CommonOpts {
    std::string dataset_dir;
    std::string dataset_kind = "mnist";
    std::string out_dir = ".";
    uint64_t seed = 1;
    int64_t val_size = 5000;
    int64_t clean_per_class = 100;
};

struct LoadedData {
    ImageBatch train;       // training split (baseline samples excluded from validation)
    ImageBatch validation;  // clean held-out split from the training set
    ImageBatch test;        // the dataset's test set
    ImageBatch clean_baseline;
};

std::string resolve_dataset_dir(const CommonOpts& opts) {
    if (!opts.dataset_dir.empty()) return opts.dataset_dir;
    if (const char* env = std::getenv("UAPDET_DATASET")) return env;
    throw ArgumentError("no dataset directory: pass --dataset or set UAPDET_DATASET");
}

LoadedData load_data(const CommonOpts& opts) {
    const std::string dir = resolve_dataset_dir(opts);
    std::pair<ImageBatch, ImageBatch> sets;
    if (opts.dataset_kind == "mnist") {
        sets = load_mnist(dir);
    } else if (opts.dataset_kind == "cifar10") {
        std::vector<std::string> train_files;
        for (int i = 1; i <= 5; ++i)
            train_files.push_back(resolve_dataset_file(dir, "data_batch_" + std::to_string(i) + ".bin"));
        sets = load_cifar10(train_files, resolve_dataset_file(dir, "test_batch.bin"));
    } else {
        throw ArgumentError("unknown dataset kind: " + opts.dataset_kind);
    }
    SplitSpec spec;
    spec.seed = opts.seed;
    spec.n_validation = opts.val_size;
    spec.n_clean_per_class = opts.clean_per_class;
    DatasetSplits splits = make_splits(sets.first, spec);
    LoadedData out;
    out.clean_baseline = sample_clean_baseline(splits.train, spec);
    out.train = std::move(splits.train);
    out.validation = std::move(splits.validation);
    out.test = std::move(sets.second);
    return out;
}

std::string out_path(const CommonOpts& opts, const std::string& name) {
    fs::create_directories(opts.out_dir);
    return (fs::path(opts.out_dir) / name).string();
}

void write_json(const std::string& path, const json& j) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw FormatError("cannot create file: " + path);
    f << j.dump(2) << "\n";
}

// Every run records its seeds and input-file hashes for reproducibility.
void write_manifest(const CommonOpts& opts, const std::string& command, const json& options,
                    const std::vector<std::string>& inputs, const std::vector<std::string>& outputs) {
    json j;
    j["command"] = command;
    j["seed"] = opts.seed;
    j["options"] = options;
    json in = json::object();
    for (const auto& p : inputs) in[p] = fnv1a64_file(p);
    j["input_hashes"] = in;
    j["outputs"] = outputs;
    write_json(out_path(opts, "manifest-" + command + ".json"), j);
}

float epsilon_from_255(float e255) { return e255 / 255.0f; }

struct DetectorStack {
    std::vector<std::pair<ActivationBaseline, DetectorConfig>> members;

    static DetectorStack load(const std::vector<std::string>& config_paths,
                              const std::vector<std::string>& baseline_paths) {
        if (config_paths.size() != baseline_paths.size())
            throw ArgumentError("each --detector needs a matching --baseline");
        DetectorStack s;
        for (size_t i = 0; i < config_paths.size(); ++i) {
            DetectorConfig cfg = load_detector_config(config_paths[i]);
            ActivationBaseline base = load_baseline(baseline_paths[i]);
            if (cfg.layer != base.layer || cfg.kind != base.kind)
                throw ArgumentError("detector config " + cfg.label() + " does not match baseline " +
                                    config_label(base.layer, base.kind));
            s.members.emplace_back(std::move(base), std::move(cfg));
        }
        return s;
    }

    std::vector<DetectionResult> score_batch(const SmallCnn& model, const ImageBatch& batch) const {
        std::vector<std::string> taps;
        for (const auto& [b, d] : members) taps.push_back(d.layer);
        PredictResult pr = predict(model, batch, taps);
        std::vector<DetectionResult> out;
        for (const auto& [b, d] : members)
            out.push_back(score_aggregates(aggregate_batch(pr.taps.at(d.layer), d.kind), b, d));
        return out;
    }
};

int cmd_train(const CommonOpts& opts, const Hyperparams& hp, const std::string& model_out) {
    LoadedData data = load_data(opts);
    Checkpoint ck = train(data.train, data.validation, hp);
    const std::string path = out_path(opts, model_out);
    save_checkpoint(path, ck);
    std::cout << "saved " << path << " (validation accuracy " << ck.meta.final_accuracy << ")\n";
    write_manifest(opts, "train",
                   json{{"lr", hp.lr},
                        {"momentum", hp.momentum},
                        {"epochs", hp.epochs},
                        {"batch_size", hp.batch_size},
                        {"val_size", opts.val_size}},
                   {}, {path});
    return 0;
}

int cmd_baseline(const CommonOpts& opts, const std::string& model_path, const std::string& layer,
                 const std::string& agg) {
    LoadedData data = load_data(opts);
    SmallCnn model = model_from_checkpoint(load_checkpoint(model_path));
    std::vector<std::string> layers;
    if (layer == "all")
        layers = tap_names();
    else
        layers.push_back(layer);
    const Aggregation kind = parse_aggregation(agg);
    std::vector<std::string> outputs;
    for (const auto& k : layers) {
        ActivationBaseline b = fit_baseline(model, data.clean_baseline, k, kind);
        const std::string path = out_path(opts, "baseline-" + config_label(k, kind) + ".uapb");
        save_baseline(path, b);
        outputs.push_back(path);
        std::cout << "saved " << path << " (" << b.channels() << " channels, " << b.sample_count
                  << " clean samples)\n";
    }
    write_manifest(opts, "baseline", json{{"layer", layer}, {"aggregation", agg}}, {model_path}, outputs);
    return 0;
}

int cmd_attack(const CommonOpts& opts, const std::string& kind, const std::string& model_path,
               AttackConfig cfg, float epsilon255, int64_t subset, const std::string& baseline_path,
               const std::string& uap_out) {
    LoadedData data = load_data(opts);
    SmallCnn model = model_from_checkpoint(load_checkpoint(model_path));
    cfg.epsilon = epsilon_from_255(epsilon255);
    cfg.seed = opts.seed;
    ImageBatch attack_set = data.train;
    if (subset > 0 && subset < attack_set.size()) attack_set = attack_set.slice(0, subset);

    Perturbation result;
    std::vector<std::string> inputs{model_path};
    if (kind == "sgd") {
        result = sgd_uap(model, attack_set, cfg);
    } else if (kind == "sgd-layer") {
        result = sgd_layer(model, attack_set, cfg);
    } else if (kind == "perlin") {
        ImageBatch search = data.validation.size() > 2000 ? data.validation.slice(0, 2000) : data.validation;
        result = perlin_uap(model, search, cfg);
    } else if (kind == "patch") {
        result = eot_patch(model, attack_set, cfg);
    } else if (kind == "baseline-feature") {
        if (baseline_path.empty()) throw ArgumentError("baseline-feature requires --defense-baseline");
        ActivationBaseline base = load_baseline(baseline_path);
        inputs.push_back(baseline_path);
        result = baseline_feature_uap(model, attack_set, base, cfg);
    } else {
        throw ArgumentError("unknown attack kind: " + kind);
    }
    const std::string path = out_path(opts, uap_out.empty() ? ("uap-" + kind + ".uapp") : uap_out);
    save_perturbation(path, result);
    std::cout << "saved " << path << "\n";
    write_manifest(opts, "attack-" + kind, cfg.to_json(), inputs, {path});
    return 0;
}

int cmd_calibrate(const CommonOpts& opts, const std::string& model_path,
                  const std::vector<std::string>& attack_files, float r, int64_t eval_size,
                  const std::string& tag) {
    if (attack_files.empty()) throw ArgumentError("calibrate: give at least one --attacks file");
    LoadedData data = load_data(opts);
    SmallCnn model = model_from_checkpoint(load_checkpoint(model_path));

    // evaluation pool: half of the validation split drives the AUC grid,
    // the other half calibrates the threshold on clean scores
    const int64_t half = data.validation.size() / 2;
    ImageBatch grid_eval = data.validation.slice(0, std::min(half, eval_size));
    ImageBatch threshold_eval = data.validation.slice(half, data.validation.size());

    std::vector<ImageBatch> perturbed;
    for (const auto& f : attack_files)
        perturbed.push_back(apply_perturbation(grid_eval, load_perturbation(f), opts.seed));

    CalibrationResult cal = calibrate_detector(model, data.clean_baseline, grid_eval, perturbed, tap_names());
    ActivationBaseline baseline = fit_baseline(model, data.clean_baseline, cal.chosen.layer, cal.chosen.kind);
    DetectorConfig cfg = cal.chosen;
    cfg.fp_rate = r;
    cfg.threshold = calibrate_threshold(
        score_aggregates(
            aggregate_batch(tap_activations(model, threshold_eval, cfg.layer), cfg.kind), baseline, cfg)
            .scores,
        r);

    const std::string base_path = out_path(opts, "baseline-" + tag + ".uapb");
    const std::string cfg_path = out_path(opts, "detector-" + tag + ".json");
    const std::string grid_path = out_path(opts, "calibration-" + tag + ".json");
    save_baseline(base_path, baseline);
    save_detector_config(cfg_path, cfg);
    write_json(grid_path, cal.to_json());
    std::cout << "calibrated " << cfg.label() << " t=" << cfg.top_fraction << " theta=" << cfg.threshold
              << " (target fp " << r << ")\n";
    std::vector<std::string> inputs{model_path};
    inputs.insert(inputs.end(), attack_files.begin(), attack_files.end());
    write_manifest(opts, "calibrate-" + tag, json{{"r", r}, {"attacks", attack_files}}, inputs,
                   {base_path, cfg_path, grid_path});
    return 0;
}

int cmd_detect(const CommonOpts& opts, const std::string& model_path, const std::string& config_path,
               const std::string& baseline_path, const std::string& perturbation_path,
               const std::string& split) {
    LoadedData data = load_data(opts);
    SmallCnn model = model_from_checkpoint(load_checkpoint(model_path));
    DetectorStack stack = DetectorStack::load({config_path}, {baseline_path});

    ImageBatch batch = split == "test" ? data.test : data.validation;
    std::vector<std::string> inputs{model_path, config_path, baseline_path};
    if (!perturbation_path.empty()) {
        batch = apply_perturbation(batch, load_perturbation(perturbation_path), opts.seed);
        inputs.push_back(perturbation_path);
    }
    DetectionResult r = stack.score_batch(model, batch)[0];
    int64_t flagged = 0;
    double mean_score = 0.0;
    for (size_t i = 0; i < r.flags.size(); ++i) {
        flagged += r.flags[i];
        mean_score += r.scores[i];
    }
    mean_score /= static_cast<double>(r.scores.size());
    const double rate = static_cast<double>(flagged) / static_cast<double>(r.flags.size());
    json j{{"config", r.config.label()},
           {"split", split},
           {"perturbed", !perturbation_path.empty()},
           {"n", r.flags.size()},
           {"flagged", flagged},
           {"flag_rate", rate},
           {"mean_score", mean_score}};
    const std::string path = out_path(opts, "detection.json");
    write_json(path, j);
    std::cout << j.dump(2) << "\n";
    write_manifest(opts, "detect", json{{"split", split}}, inputs, {path});
    return 0;
}

int cmd_evaluate(const CommonOpts& opts, const std::string& model_path,
                 const std::string& perturbation_path, const std::vector<std::string>& config_paths,
                 const std::vector<std::string>& baseline_paths, const std::string& report_name) {
    LoadedData data = load_data(opts);
    SmallCnn model = model_from_checkpoint(load_checkpoint(model_path));
    const Perturbation p = load_perturbation(perturbation_path);
    const ImageBatch& clean = data.test;
    const ImageBatch adv = apply_perturbation(clean, p, opts.seed);

    EvalReport report;
    report.kind = perturbation_kind(p);
    report.n_perturbed = adv.size();
    report.n_clean = clean.size();
    const json prov = json::parse(perturbation_provenance(p), nullptr, false);
    if (!prov.is_discarded()) {
        report.attack = prov.value("attack", "unknown");
        if (prov.contains("config")) {
            const auto& c = prov["config"];
            report.epsilon_or_area =
                report.kind == "mask" ? c.value("epsilon", 0.0f) : c.value("area_fraction", 0.0f);
            if (c.contains("target_class")) {
                const int tgt = c["target_class"].get<int>();
                report.tsr = tsr_from_labels(predict(model, adv).labels, tgt);
            }
        }
    }
    const PredictResult clean_pred = predict(model, clean);
    const PredictResult adv_pred = predict(model, adv);
    report.uer = uer_from_labels(adv_pred.labels, clean.labels);

    std::vector<std::string> inputs{model_path, perturbation_path};
    std::vector<std::string> outputs;
    if (!config_paths.empty()) {
        DetectorStack stack = DetectorStack::load(config_paths, baseline_paths);
        inputs.insert(inputs.end(), config_paths.begin(), config_paths.end());
        inputs.insert(inputs.end(), baseline_paths.begin(), baseline_paths.end());
        const auto clean_results = stack.score_batch(model, clean);
        const auto adv_results = stack.score_batch(model, adv);
        for (size_t i = 0; i < clean_results.size(); ++i) {
            const RocCurve roc = roc_auc(adv_results[i].scores, clean_results[i].scores);
            report.auc[adv_results[i].config.label()] = roc.auc;
            const std::string roc_path =
                out_path(opts, "roc-" + adv_results[i].config.label() + ".csv");
            write_roc_csv(roc_path, roc);
            outputs.push_back(roc_path);
        }
        const CombinedDetection clean_comb = combined_flag(clean_results);
        const CombinedDetection adv_comb = combined_flag(adv_results);
        const AsrCp rates = asr_cp(adv_comb.flags, adv_pred.labels, clean.labels, clean_comb.flags,
                                   clean_pred.labels, clean.labels);
        report.asr = rates.asr;
        report.cp = rates.cp;
        for (uint8_t f : adv_comb.flags) report.flagged_perturbed += f;
        for (uint8_t f : clean_comb.flags) report.flagged_clean += f;
    }
    const std::string path = out_path(opts, report_name);
    write_json(path, report.to_json());
    outputs.push_back(path);
    std::cout << report.to_json().dump(2) << "\n";
    write_manifest(opts, "evaluate", json{{"perturbation", perturbation_path}}, inputs, outputs);
    return 0;
}

int cmd_bench(const CommonOpts& opts, const std::string& model_path,
              const std::vector<std::string>& config_paths, const std::vector<std::string>& baseline_paths,
              const BenchConfig& bcfg) {
    LoadedData data = load_data(opts);
    SmallCnn model = model_from_checkpoint(load_checkpoint(model_path));
    DetectorStack stack = DetectorStack::load(config_paths, baseline_paths);
    LatencyReport report = bench_latency(model, data.test, stack.members, bcfg);
    EvalReport wrapper;
    wrapper.attack = "none";
    wrapper.kind = "bench";
    wrapper.n_clean = bcfg.batch_size;
    wrapper.latency = report;
    const std::string path = out_path(opts, "latency.json");
    write_json(path, wrapper.to_json()["latency"]);
    std::cout << "plain " << report.plain_image_ms() << " ms/image, combined "
              << report.combined_image_ms() << " ms/image, added "
              << report.added_latency_image_ms() << " ms/image\n";
    std::vector<std::string> inputs{model_path};
    inputs.insert(inputs.end(), config_paths.begin(), config_paths.end());
    inputs.insert(inputs.end(), baseline_paths.begin(), baseline_paths.end());
    write_manifest(opts, "bench",
                   json{{"batch_size", bcfg.batch_size}, {"repetitions", bcfg.repetitions}}, inputs, {path});
    return 0;
}

int cmd_report(const CommonOpts& opts, const std::vector<std::string>& eval_jsons,
               const std::string& csv_name) {
    if (eval_jsons.empty()) throw ArgumentError("report: give at least one evaluation JSON");
    std::vector<json> reports;
    std::vector<std::string> auc_labels;
    for (const auto& p : eval_jsons) {
        std::ifstream f(p);
        if (!f) throw FormatError("cannot open file: " + p);
        json j;
        f >> j;
        if (j.contains("auc"))
            for (auto& [k, v] : j["auc"].items())
                if (std::find(auc_labels.begin(), auc_labels.end(), k) == auc_labels.end())
                    auc_labels.push_back(k);
        reports.push_back(std::move(j));
    }
    const std::string path = out_path(opts, csv_name);
    std::ofstream f(path, std::ios::trunc);
    f << "attack,kind,epsilon_or_area,uer,tsr,asr,cp";
    for (const auto& l : auc_labels) f << ",auc_" << l;
    f << "\n";
    for (const auto& j : reports) {
        f << j.value("attack", "") << "," << j.value("kind", "") << "," << j.value("epsilon_or_area", 0.0)
          << "," << j.value("uer", 0.0) << ",";
        if (j.contains("tsr")) f << j["tsr"].get<double>();
        f << ",";
        if (j.contains("asr")) f << j["asr"].get<double>();
        f << ",";
        if (j.contains("cp")) f << j["cp"].get<double>();
        for (const auto& l : auc_labels) {
            f << ",";
            if (j.contains("auc") && j["auc"].contains(l)) f << j["auc"][l].get<double>();
        }
        f << "\n";
    }
    std::cout << "wrote " << path << " (" << reports.size() << " rows)\n";
    write_manifest(opts, "report", json{{"inputs", eval_jsons}}, eval_jsons, {path});
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"universal adversarial perturbation generation and real-time detection"};
    app.require_subcommand(1);

    CommonOpts opts;
    app.add_option("--dataset", opts.dataset_dir, "dataset root (or env UAPDET_DATASET)");
    app.add_option("--dataset-kind", opts.dataset_kind, "mnist | cifar10")->capture_default_str();
    app.add_option("--out", opts.out_dir, "output directory")->capture_default_str();
    app.add_option("--seed", opts.seed, "seed for splits, attacks, placements")->capture_default_str();
    app.add_option("--val-size", opts.val_size, "validation split size")->capture_default_str();
    app.add_option("--clean-per-class", opts.clean_per_class, "trusted clean samples per class")
        ->capture_default_str();

    // train
    auto* train_cmd = app.add_subcommand("train", "train the classifier");
    Hyperparams hp;
    std::string model_out = "model.uaps";
    train_cmd->add_option("--lr", hp.lr)->capture_default_str();
    train_cmd->add_option("--momentum", hp.momentum)->capture_default_str();
    train_cmd->add_option("--epochs", hp.epochs)->capture_default_str();
    train_cmd->add_option("--batch-size", hp.batch_size)->capture_default_str();
    train_cmd->add_option("--model-out", model_out)->capture_default_str();

    // baseline
    auto* baseline_cmd = app.add_subcommand("baseline", "fit clean activation statistics");
    std::string model_path, layer = "all", agg = "mean";
    baseline_cmd->add_option("--model", model_path)->required();
    baseline_cmd->add_option("--layer", layer, "tap name or 'all'")->capture_default_str();
    baseline_cmd->add_option("--aggregation", agg, "mean | std")->capture_default_str();

    // attack
    auto* attack_cmd = app.add_subcommand("attack", "generate a universal perturbation");
    std::string attack_kind, attack_model, defense_baseline, uap_out;
    AttackConfig acfg;
    float epsilon255 = 32.0f;
    int64_t subset = 0;
    int target_class = -1;
    attack_cmd->add_option("kind", attack_kind, "sgd | sgd-layer | perlin | patch | baseline-feature")
        ->required();
    attack_cmd->add_option("--model", attack_model)->required();
    attack_cmd->add_option("--epsilon", epsilon255, "l-inf bound on the 0-255 pixel scale")
        ->capture_default_str();
    attack_cmd->add_option("--iterations", acfg.iterations)->capture_default_str();
    attack_cmd->add_option("--alpha", acfg.step_size, "step size on the 0-1 scale (default epsilon/10)");
    attack_cmd->add_option("--batch-size", acfg.batch_size)->capture_default_str();
    attack_cmd->add_option("--target", target_class, "target class (targeted attacks)");
    attack_cmd->add_option("--layer", acfg.target_layer, "tap for sgd-layer / baseline-feature");
    attack_cmd->add_option("--lambda", acfg.lambda, "penalty weight for baseline-feature")
        ->capture_default_str();
    attack_cmd->add_option("--area", acfg.area_fraction, "patch area fraction of the image")
        ->capture_default_str();
    attack_cmd->add_option("--subset", subset, "cap the attack training subset");
    attack_cmd->add_option("--defense-baseline", defense_baseline, "baseline file (baseline-feature)");
    attack_cmd->add_option("--uap-out", uap_out, "output perturbation file name");

    // calibrate
    auto* calibrate_cmd = app.add_subcommand("calibrate", "choose layer/aggregation/t and threshold");
    std::string cal_model, cal_tag = "mask";
    std::vector<std::string> cal_attacks;
    float cal_r = 0.05f;
    int64_t cal_eval = 2000;
    calibrate_cmd->add_option("--model", cal_model)->required();
    calibrate_cmd->add_option("--attacks", cal_attacks, "perturbation files used for the AUC grid")
        ->required();
    calibrate_cmd->add_option("--r", cal_r, "target false-positive rate")->capture_default_str();
    calibrate_cmd->add_option("--eval-size", cal_eval)->capture_default_str();
    calibrate_cmd->add_option("--tag", cal_tag, "artifact tag (e.g. mask, patch)")->capture_default_str();

    // detect
    auto* detect_cmd = app.add_subcommand("detect", "flag a data split with a calibrated detector");
    std::string det_model, det_config, det_baseline, det_uap, det_split = "val";
    detect_cmd->add_option("--model", det_model)->required();
    detect_cmd->add_option("--detector", det_config)->required();
    detect_cmd->add_option("--baseline", det_baseline)->required();
    detect_cmd->add_option("--perturbation", det_uap, "optional perturbation applied before detection");
    detect_cmd->add_option("--split", det_split, "val | test")->capture_default_str();

    // evaluate
    auto* eval_cmd = app.add_subcommand("evaluate", "full metrics for one perturbation");
    std::string eval_model, eval_uap, eval_report_name = "eval.json";
    std::vector<std::string> eval_configs, eval_baselines;
    eval_cmd->add_option("--model", eval_model)->required();
    eval_cmd->add_option("--perturbation", eval_uap)->required();
    eval_cmd->add_option("--detector", eval_configs, "detector config JSON (repeatable)");
    eval_cmd->add_option("--baseline", eval_baselines, "baseline file per detector");
    eval_cmd->add_option("--report-name", eval_report_name)->capture_default_str();

    // bench
    auto* bench_cmd = app.add_subcommand("bench", "inference and detection latency");
    std::string bench_model;
    std::vector<std::string> bench_configs, bench_baselines;
    BenchConfig bcfg;
    bench_cmd->add_option("--model", bench_model)->required();
    bench_cmd->add_option("--detector", bench_configs, "detector config JSON (repeatable)");
    bench_cmd->add_option("--baseline", bench_baselines, "baseline file per detector");
    bench_cmd->add_option("--batch", bcfg.batch_size)->capture_default_str();
    bench_cmd->add_option("--reps", bcfg.repetitions)->capture_default_str();
    bench_cmd->add_option("--warmup", bcfg.warmup)->capture_default_str();

    // report
    auto* report_cmd = app.add_subcommand("report", "aggregate evaluation JSONs into a CSV");
    std::vector<std::string> report_inputs;
    std::string report_csv = "report.csv";
    report_cmd->add_option("--inputs", report_inputs, "evaluation JSON files")->required();
    report_cmd->add_option("--csv", report_csv)->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        hp.seed = opts.seed;
        if (train_cmd->parsed()) return cmd_train(opts, hp, model_out);
        if (baseline_cmd->parsed()) return cmd_baseline(opts, model_path, layer, agg);
        if (attack_cmd->parsed()) {
            if (target_class >= 0) acfg.target_class = target_class;
            return cmd_attack(opts, attack_kind, attack_model, acfg, epsilon255, subset, defense_baseline,
                              uap_out);
        }
        if (calibrate_cmd->parsed())
            return cmd_calibrate(opts, cal_model, cal_attacks, cal_r, cal_eval, cal_tag);
        if (detect_cmd->parsed())
            return cmd_detect(opts, det_model, det_config, det_baseline, det_uap, det_split);
        if (eval_cmd->parsed())
            return cmd_evaluate(opts, eval_model, eval_uap, eval_configs, eval_baselines, eval_report_name);
        if (bench_cmd->parsed())
            return cmd_bench(opts, bench_model, bench_configs, bench_baselines, bcfg);
        if (report_cmd->parsed()) return cmd_report(opts, report_inputs, report_csv);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
