#pragma once

// Command-line front end. Kept in a header (with a thin main() in tools/) so
// the test suite can drive every subcommand in-process and assert on exit
// codes without spawning binaries.
//
// Exit codes: 0 success, 1 runtime error (I/O, numeric, shape), 2 usage or
// configuration error (unknown flag, unknown config key, out-of-range value).

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mugs/audit.hpp"
#include "mugs/eval.hpp"

namespace mugs {

namespace cli_detail {

// Shared plumbing for the subcommands that start from a checkpoint: restore
// the trainer (self-describing file; no config needed) and expose the frozen
// teacher for feature extraction.
struct RestoredRun {
    Trainer trainer;
    explicit RestoredRun(const std::string& path) : trainer(Trainer::from_checkpoint(load_checkpoint(path))) {}
    const Network& teacher() const { return trainer.pair().teacher(); }
    int64_t feature_size() const { return trainer.config().image_size_global; }
};

inline FeatureBank bank_for(const RestoredRun& run, const std::string& dir, bool coarse_labels,
                            const NormalizeStats& stats, const std::string& split) {
    Dataset ds = load_dataset(dir);
    FeatureBank bank = extract_features(run.teacher(), ds, run.feature_size(), stats, 64, split);
    if (coarse_labels)
        for (auto& label : bank.labels) label = coarse_of(label);
    return bank;
}

}  // namespace cli_detail

inline int cli_main(int argc, const char* const* argv) {
    CLI::App app{"mugs: multi-granular self-supervised pretraining and evaluation"};
    app.require_subcommand(1);

    // ----- gen-synth -----------------------------------------------------
    auto* gen = app.add_subcommand("gen-synth", "generate the synthetic hierarchical dataset");
    uint64_t gen_seed = 1;
    std::string gen_out = "data/synth";
    int64_t gen_n_per_fine = 16, gen_size = 32;
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--out", gen_out, "output directory (images.bin + labels.csv)");
    gen->add_option("--n-per-fine", gen_n_per_fine, "images per fine class (8 fine classes)")
        ->check(CLI::PositiveNumber);
    gen->add_option("--size", gen_size, "square image size in pixels")->check(CLI::Range(8, 4096));
    gen->callback([&] {
        Dataset ds = synth_hierarchical_dataset(gen_seed, 2, 2, 2, gen_n_per_fine, gen_size);
        save_dataset(ds, gen_out);
        std::cout << "gen-synth: wrote " << ds.count << " images (" << ds.class_count
                  << " fine classes, " << gen_size << "px) to " << gen_out << "\n";
    });

    // ----- pretrain -------------------------------------------------------
    auto* pre = app.add_subcommand("pretrain", "run self-supervised pretraining");
    std::string pre_config, pre_resume, pre_dataset, pre_out;
    double lam_in = 0, lam_lg = 0, lam_g = 0;
    int64_t pre_epochs = 0;
    uint64_t pre_seed = 0;
    auto* opt_config = pre->add_option("--config", pre_config, "TrainConfig JSON file");
    auto* opt_resume =
        pre->add_option("--resume", pre_resume, "checkpoint to continue from (ignores --config)");
    opt_resume->excludes(opt_config);
    auto* opt_dataset = pre->add_option("--dataset", pre_dataset, "override dataset directory");
    auto* opt_out = pre->add_option("--out", pre_out, "override output directory");
    auto* opt_epochs = pre->add_option("--epochs", pre_epochs, "override epoch count");
    auto* opt_seed = pre->add_option("--seed", pre_seed, "override seed");
    auto* opt_lin = pre->add_option("--lambda-in", lam_in, "override instance loss weight");
    auto* opt_llg = pre->add_option("--lambda-lg", lam_lg, "override local-group loss weight");
    auto* opt_lg = pre->add_option("--lambda-g", lam_g, "override group loss weight");
    pre->callback([&] {
        auto apply_overrides = [&](TrainConfig& cfg) {
            if (opt_dataset->count()) cfg.dataset_dir = pre_dataset;
            if (opt_out->count()) cfg.out_dir = pre_out;
            if (opt_epochs->count()) cfg.epochs = pre_epochs;
            if (opt_seed->count()) cfg.seed = pre_seed;
            if (opt_lin->count()) cfg.lambda_in = static_cast<float>(lam_in);
            if (opt_llg->count()) cfg.lambda_lg = static_cast<float>(lam_lg);
            if (opt_lg->count()) cfg.lambda_g = static_cast<float>(lam_g);
            cfg.validate();
        };
        const bool resuming = opt_resume->count() > 0;
        Trainer trainer = [&] {
            if (resuming) {
                CheckpointData ckpt = load_checkpoint(pre_resume);
                apply_overrides(ckpt.config);
                return Trainer::from_checkpoint(ckpt);
            }
            TrainConfig cfg =
                opt_config->count() ? TrainConfig::from_file(pre_config) : TrainConfig{};
            apply_overrides(cfg);
            return Trainer(cfg);
        }();
        std::filesystem::create_directories(trainer.config().out_dir);
        MetricsWriter metrics(trainer.config().out_dir + "/metrics.csv", resuming);
        trainer.run(&metrics);
        std::cout << "pretrain: " << trainer.step() << " steps done, checkpoint "
                  << trainer.config().out_dir << "/checkpoint_last.mgck, metrics "
                  << trainer.config().out_dir << "/metrics.csv\n";
    });

    // ----- eval-knn -------------------------------------------------------
    auto* knn = app.add_subcommand("eval-knn", "weighted-vote kNN on frozen teacher features");
    std::string knn_ckpt, knn_train, knn_test;
    double knn_tau = 0.07;
    bool knn_coarse = false;
    std::vector<int64_t> knn_ks = {10, 20, 50, 100};
    knn->add_option("--checkpoint", knn_ckpt, "pretraining checkpoint")->required();
    knn->add_option("--train", knn_train, "training-split dataset directory")->required();
    knn->add_option("--test", knn_test, "test-split dataset directory")->required();
    knn->add_option("--tau", knn_tau, "vote temperature")->check(CLI::PositiveNumber);
    knn->add_option("--k", knn_ks,
                    "neighbor counts to sweep (values above the train-bank size are skipped)");
    knn->add_flag("--coarse", knn_coarse, "evaluate 2-class coarse labels instead of fine");
    knn->callback([&] {
        cli_detail::RestoredRun run(knn_ckpt);
        const NormalizeStats stats = compute_dataset_stats(load_dataset(knn_train));
        FeatureBank train = cli_detail::bank_for(run, knn_train, knn_coarse, stats, "train");
        FeatureBank test = cli_detail::bank_for(run, knn_test, knn_coarse, stats, "test");
        std::vector<int64_t> ks;
        for (int64_t k : knn_ks)
            if (k <= train.size()) ks.push_back(k);
        if (ks.empty())
            throw ConfigError("eval-knn: every requested k exceeds the train bank size " +
                              std::to_string(train.size()));
        KnnSweep sweep = knn_classify(train, test, ks, static_cast<float>(knn_tau));
        for (const auto& [k, acc] : sweep.per_k)
            std::cout << "eval-knn: k=" << k << " accuracy=" << acc << "\n";
        std::cout << "eval-knn: best k=" << sweep.best_k << " accuracy=" << sweep.best << "\n";
    });

    // ----- eval-linear ----------------------------------------------------
    auto* lin = app.add_subcommand("eval-linear", "linear probe on frozen teacher features");
    std::string lin_ckpt, lin_train, lin_test;
    int64_t lin_epochs = 30, lin_batch = 128;
    double lin_lr = 0.1;
    uint64_t lin_seed = 0;
    bool lin_coarse = false;
    lin->add_option("--checkpoint", lin_ckpt, "pretraining checkpoint")->required();
    lin->add_option("--train", lin_train, "training-split dataset directory")->required();
    lin->add_option("--test", lin_test, "test-split dataset directory")->required();
    lin->add_option("--epochs", lin_epochs, "probe epochs")->check(CLI::NonNegativeNumber);
    lin->add_option("--lr", lin_lr, "probe base learning rate")->check(CLI::PositiveNumber);
    lin->add_option("--batch", lin_batch, "probe batch size")->check(CLI::PositiveNumber);
    lin->add_option("--seed", lin_seed, "probe init/shuffle seed");
    lin->add_flag("--coarse", lin_coarse, "evaluate 2-class coarse labels instead of fine");
    lin->callback([&] {
        cli_detail::RestoredRun run(lin_ckpt);
        const NormalizeStats stats = compute_dataset_stats(load_dataset(lin_train));
        FeatureBank train = cli_detail::bank_for(run, lin_train, lin_coarse, stats, "train");
        FeatureBank test = cli_detail::bank_for(run, lin_test, lin_coarse, stats, "test");
        const float acc = linear_probe(train, test, lin_epochs, static_cast<float>(lin_lr),
                                       lin_batch, lin_seed);
        std::cout << "eval-linear: accuracy=" << acc << "\n";
    });

    // ----- export-features ------------------------------------------------
    auto* exp = app.add_subcommand("export-features", "extract teacher features to an MGFT file");
    std::string exp_ckpt, exp_data, exp_out, exp_split = "all";
    exp->add_option("--checkpoint", exp_ckpt, "pretraining checkpoint")->required();
    exp->add_option("--data", exp_data, "dataset directory")->required();
    exp->add_option("--out", exp_out, "output MGFT path")->required();
    exp->add_option("--split", exp_split, "split name recorded alongside the bank");
    exp->callback([&] {
        cli_detail::RestoredRun run(exp_ckpt);
        Dataset ds = load_dataset(exp_data);
        FeatureBank bank =
            extract_features(run.teacher(), ds, run.feature_size(), compute_dataset_stats(ds), 64,
                             exp_split);
        save_feature_bank(bank, exp_out);
        std::cout << "export-features: wrote " << bank.size() << " features (dim " << bank.dim()
                  << ") to " << exp_out << "\n";
    });

    // ----- audit ------------------------------------------------------------
    auto* aud = app.add_subcommand("audit", "gradient, equation, and structure verification");
    uint64_t aud_seed = 5;
    std::string aud_out;
    aud->add_option("--seed", aud_seed, "audit instance seed");
    aud->add_option("--out", aud_out, "write the JSON report to this path");
    aud->callback([&] {
        AuditReport report = run_full_audit(aud_seed);
        for (const auto& c : report.cases)
            std::cout << (c.passed ? "[PASS] " : "[FAIL] ") << c.name << " max_error="
                      << c.max_error << " tolerance=" << c.tolerance << "\n";
        std::cout << "audit: " << report.cases.size() << " cases, "
                  << (report.all_passed() ? "all passed" : "FAILURES PRESENT") << "\n";
        if (!aud_out.empty()) {
            std::ofstream os(aud_out, std::ios::trunc);
            if (!os) throw Error("cannot open for writing: " + aud_out);
            os << report.to_json().dump(2) << "\n";
        }
        if (!report.all_passed()) throw Error("audit failed");
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // prints help, exits 0
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace mugs
