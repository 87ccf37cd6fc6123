// Command-line front end: reproducible pipelines over the simulation,
// training, inversion and evaluation modules. Exit codes: 0 success, 2 usage
// error, 3 runtime/numeric failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "ect/dataset.hpp"
#include "ect/forward.hpp"
#include "ect/geometry.hpp"
#include "ect/gradcheck.hpp"
#include "ect/inverse.hpp"
#include "ect/metrics.hpp"
#include "ect/network.hpp"
#include "ect/phantom.hpp"
#include "ect/threading.hpp"

namespace fs = std::filesystem;
using namespace ect;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require_dir(const std::string& path) {
    if (!fs::is_directory(path)) throw UsageError("not a directory: " + path);
}

void require_file(const std::string& path) {
    if (!fs::is_regular_file(path)) throw UsageError("no such file: " + path);
}

// ---- gen-data ----

struct GenDataArgs {
    std::string kind;
    int count = 0;
    std::uint64_t seed = 0;
    std::string out;
    int threads = 0;
    DomainSpec domain;
    PhysicalPermittivity phys;
    PhantomSpec phantom;
    NoiseModel noise;
};

void add_gen_data(CLI::App& app, GenDataArgs& a) {
    CLI::App* cmd = app.add_subcommand("gen-data", "simulate a synthetic phantom dataset");
    cmd->add_option("--kind", a.kind, "phantom family: microsphere|biofilm")->required();
    cmd->add_option("--count", a.count, "number of samples")->required();
    cmd->add_option("--seed", a.seed, "master RNG seed");
    cmd->add_option("--out", a.out, "output dataset directory")->required();
    cmd->add_option("--threads", a.threads, "worker threads (default: all cores)");
    cmd->add_option("--noise-std", a.noise.std, "recorded noise std (applied at train time)");
    cmd->add_option("--eps-background", a.phys.eps_background, "background rel. permittivity");
    cmd->add_option("--eps-inclusion", a.phys.eps_inclusion, "inclusion rel. permittivity");
    cmd->add_option("--width", a.domain.width_um, "imaging window width, um");
    cmd->add_option("--depth", a.domain.depth_um, "imaging window depth, um");
    cmd->add_option("--pad-side", a.domain.pad_side_um, "lateral padding, um");
    cmd->add_option("--pad-top", a.domain.pad_top_um, "top padding, um");
    cmd->add_option("--electrodes", a.domain.n_electrodes, "electrode count");
    cmd->add_option("--pitch", a.domain.pitch_um, "electrode pitch, um");
    cmd->add_option("--electrode-width", a.domain.electrode_width_um, "electrode width, um");
    cmd->add_option("--resolution", a.domain.elements_per_um, "mesh elements per um");
    cmd->add_option("--sphere-count-min", a.phantom.count_min, "min microspheres");
    cmd->add_option("--sphere-count-max", a.phantom.count_max, "max microspheres");
    cmd->add_option("--radius-min", a.phantom.radius_min, "min sphere radius, um");
    cmd->add_option("--radius-max", a.phantom.radius_max, "max sphere radius, um");
    cmd->add_option("--depth-min", a.phantom.depth_min, "min sphere center depth, um");
    cmd->add_option("--depth-max", a.phantom.depth_max, "max sphere center depth, um");
    cmd->add_option("--base-min", a.phantom.base_thickness_min, "min film thickness, um");
    cmd->add_option("--base-max", a.phantom.base_thickness_max, "max film thickness, um");
    cmd->add_option("--rough-min", a.phantom.roughness_amp_min, "min roughness amplitude, um");
    cmd->add_option("--rough-max", a.phantom.roughness_amp_max, "max roughness amplitude, um");
    cmd->add_option("--corr-min", a.phantom.corr_length_min, "min roughness corr. length, um");
    cmd->add_option("--corr-max", a.phantom.corr_length_max, "max roughness corr. length, um");

    cmd->callback([&a] {
        if (a.kind == "microsphere")
            a.phantom.kind = PhantomKind::microsphere;
        else if (a.kind == "biofilm")
            a.phantom.kind = PhantomKind::biofilm;
        else
            throw UsageError("unknown --kind: " + a.kind);
        if (a.count <= 0) throw UsageError("--count must be positive");
        a.phantom.img_h = a.domain.depth_um;
        a.phantom.img_w = a.domain.width_um;
        try {
            a.domain.validate();
            a.phantom.validate();
            a.phys.validate();
            a.noise.validate();
        } catch (const InvalidSpecError& e) {
            throw UsageError(e.what());
        }

        const Dataset ds =
            build_dataset(a.count, a.phantom, a.domain, a.phys, a.noise, a.seed, a.threads);
        write_dataset(ds, a.out);
        std::cout << "wrote " << ds.manifest.count << " samples (" << ds.manifest.m << "x"
                  << ds.manifest.n << " measurements, " << ds.manifest.img_h << "x"
                  << ds.manifest.img_w << " images) to " << a.out << "\n"
                  << "kind " << a.kind << ", seed " << ds.manifest.seed << ", noise std "
                  << ds.manifest.noise_std << ", normalization " << ds.manifest.normalization
                  << "\n";
    });
}

// ---- shared loading helpers ----

Dataset load_split(const std::string& dir, const std::string& which) {
    require_dir(dir);
    const Dataset full = read_dataset(dir);
    if (which == "all") return full;
    const auto parts = split(full, SplitFractions{}, full.manifest.seed);
    if (which == "train") return parts[0];
    if (which == "val") return parts[1];
    if (which == "test") return parts[2];
    throw UsageError("unknown --split: " + which + " (train|val|test|all)");
}

SensitivityMatrix load_or_build_sensitivity(const Dataset& ds, const std::string& path) {
    const DatasetManifest& m = ds.manifest;
    if (fs::is_regular_file(path)) {
        std::cout << "loading cached sensitivity matrix " << path << "\n";
        return read_sensitivity(path, m.m, m.n, m.img_h, m.img_w);
    }
    std::cout << "building sensitivity matrix (" << m.n << " background solves)...\n";
    SensitivityMatrix J = sensitivity_matrix(m.domain_spec, m.physical, m.m);
    write_sensitivity(J, path);
    std::cout << "cached to " << path << "\n";
    return J;
}

struct PredictorArgs {
    std::string model_path;
    std::string baseline;
    std::string sensitivity_path;
};

// Builds the (capacitance -> image) map from either a trained model or a
// classical baseline. Keeps the loaded state alive via shared_ptr captures.
Predictor make_predictor(const PredictorArgs& pa, const Dataset& ds, const std::string& data_dir,
                         std::string& name) {
    if (!pa.model_path.empty() && !pa.baseline.empty())
        throw UsageError("--model and --baseline are mutually exclusive");
    if (!pa.model_path.empty()) {
        require_file(pa.model_path);
        auto model = std::make_shared<TrainedModel<float>>(load_model(pa.model_path));
        name = "model:" + pa.model_path;
        return [model](const CapacitanceMatrix& c) { return predict(*model, c); };
    }
    if (pa.baseline.empty()) throw UsageError("one of --model or --baseline is required");
    if (pa.baseline != "tikhonov" && pa.baseline != "landweber" && pa.baseline != "lbp")
        throw UsageError("unknown --baseline: " + pa.baseline + " (tikhonov|landweber|lbp)");

    std::string jpath = pa.sensitivity_path;
    if (jpath.empty()) jpath = (fs::path(data_dir) / "sensitivity.ectj").string();
    auto J = std::make_shared<SensitivityMatrix>(load_or_build_sensitivity(ds, jpath));
    name = "baseline:" + pa.baseline;
    const std::string kind = pa.baseline;
    return [J, kind](const CapacitanceMatrix& c) {
        const std::vector<double> y = flatten_measurements(c);
        if (kind == "tikhonov") return tikhonov_iterative(y, *J);
        if (kind == "landweber") return landweber(y, *J);
        return linear_back_projection(y, *J);
    };
}

// ---- train ----

struct TrainArgs {
    std::string data;
    std::string out;
    std::string history;
    std::string loss = "smoothl1,focal,dice";
    TrainConfig cfg;
};

void add_train(CLI::App& app, TrainArgs& a) {
    CLI::App* cmd = app.add_subcommand("train", "train the reconstruction network");
    cmd->add_option("--data", a.data, "dataset directory")->required();
    cmd->add_option("--out", a.out, "output model file (.ectm)")->required();
    cmd->add_option("--history", a.history, "per-epoch history file (default <out>.history)");
    cmd->add_option("--epochs", a.cfg.epochs, "training epochs");
    cmd->add_option("--batch", a.cfg.batch, "mini-batch size");
    cmd->add_option("--lr", a.cfg.lr, "Adam learning rate");
    cmd->add_option("--seed", a.cfg.seed, "training seed");
    cmd->add_option("--noise-std", a.cfg.noise_std, "train-time measurement noise std")
        ->default_val(-1.0);
    cmd->add_option("--loss", a.loss, "loss terms: smoothl1[,focal][,dice]");
    cmd->add_option("--threads", a.cfg.threads, "worker threads");

    cmd->callback([&a] {
        a.cfg.use_smooth_l1 = a.cfg.use_focal = a.cfg.use_dice = false;
        std::stringstream ss(a.loss);
        std::string term;
        while (std::getline(ss, term, ',')) {
            if (term == "smoothl1")
                a.cfg.use_smooth_l1 = true;
            else if (term == "focal")
                a.cfg.use_focal = true;
            else if (term == "dice")
                a.cfg.use_dice = true;
            else
                throw UsageError("unknown loss term: " + term);
        }
        if (!a.cfg.use_smooth_l1 && !a.cfg.use_focal && !a.cfg.use_dice)
            throw UsageError("--loss must enable at least one term");

        require_dir(a.data);
        const Dataset full = read_dataset(a.data);
        if (a.cfg.noise_std < 0.0) a.cfg.noise_std = full.manifest.noise_std;
        try {
            a.cfg.validate();
        } catch (const InvalidSpecError& e) {
            throw UsageError(e.what());
        }
        // the 80/10/10 split is keyed to the dataset seed so every command
        // sees the same partition
        const auto parts = split(full, SplitFractions{}, full.manifest.seed);
        std::cout << "training on " << parts[0].manifest.count << " samples, validating on "
                  << parts[1].manifest.count << " (" << a.cfg.epochs << " epochs, batch "
                  << a.cfg.batch << ", lr " << a.cfg.lr << ", noise " << a.cfg.noise_std
                  << ", loss " << a.loss << ")\n";

        NetworkConfig net = NetworkConfig::standard();
        net.m = full.manifest.m;
        net.n = full.manifest.n;
        const TrainResult result = train(parts[0], parts[1], net, a.cfg);
        save_model(result.model, a.out);
        const std::string hist = a.history.empty() ? a.out + ".history" : a.history;
        write_history(result.history, hist);
        for (const EpochStats& e : result.history) std::cout << history_line(e) << "\n";
        std::cout << "best val_cc " << result.model.final_val_cc << ", val_iou "
                  << result.model.final_val_iou << "; model " << a.out << ", history " << hist
                  << "\n";
    });
}

// ---- eval ----

struct EvalArgs {
    std::string data;
    std::string split_name = "test";
    std::string out;
    PredictorArgs pred;
    int threads = 0;
};

void add_eval(CLI::App& app, EvalArgs& a) {
    CLI::App* cmd = app.add_subcommand("eval", "evaluate a model or baseline on a dataset split");
    cmd->add_option("--data", a.data, "dataset directory")->required();
    cmd->add_option("--split", a.split_name, "train|val|test|all");
    cmd->add_option("--out", a.out, "metrics report (JSON)")->required();
    cmd->add_option("--model", a.pred.model_path, "trained model file");
    cmd->add_option("--baseline", a.pred.baseline, "tikhonov|landweber|lbp");
    cmd->add_option("--sensitivity", a.pred.sensitivity_path,
                    "sensitivity matrix cache (default ./sensitivity.ectj)");
    cmd->add_option("--threads", a.threads, "worker threads");

    cmd->callback([&a] {
        if (a.threads > 0) set_thread_count(a.threads);
        const Dataset part = load_split(a.data, a.split_name);
        std::string name;
        const Predictor predictor = make_predictor(a.pred, part, a.data, name);
        const MetricsReport report = evaluate(predictor, part, name);
        write_report(report, a.out);
        std::printf("%s on %s/%s (%d samples):\n", name.c_str(), a.data.c_str(),
                    a.split_name.c_str(), report.count);
        std::printf("  mse %.6f  ssim %.4f  psnr %.3f  cc %.4f  iou %.4f\n", report.means.mse,
                    report.means.ssim, report.means.psnr, report.means.cc, report.means.iou);
        std::cout << "report written to " << a.out << "\n";
    });
}

// ---- reconstruct ----

struct ReconstructArgs {
    std::string data;
    std::string split_name = "all";
    int index = 0;
    std::string out;
    std::string truth_out;
    PredictorArgs pred;
};

void add_reconstruct(CLI::App& app, ReconstructArgs& a) {
    CLI::App* cmd = app.add_subcommand("reconstruct", "reconstruct one sample to a PGM image");
    cmd->add_option("--data", a.data, "dataset directory")->required();
    cmd->add_option("--split", a.split_name, "train|val|test|all");
    cmd->add_option("--index", a.index, "sample index within the split")->required();
    cmd->add_option("--out", a.out, "output PGM")->required();
    cmd->add_option("--truth-out", a.truth_out, "also export the ground truth PGM");
    cmd->add_option("--model", a.pred.model_path, "trained model file");
    cmd->add_option("--baseline", a.pred.baseline, "tikhonov|landweber|lbp");
    cmd->add_option("--sensitivity", a.pred.sensitivity_path, "sensitivity matrix cache");

    cmd->callback([&a] {
        const Dataset part = load_split(a.data, a.split_name);
        if (a.index < 0 || a.index >= static_cast<int>(part.samples.size()))
            throw UsageError("--index out of range (split has " +
                             std::to_string(part.samples.size()) + " samples)");
        std::string name;
        const Predictor predictor = make_predictor(a.pred, part, a.data, name);
        const Sample& s = part.samples[a.index];
        CapacitanceMatrix c(part.manifest.m, part.manifest.n);
        for (std::size_t i = 0; i < c.values.size(); ++i) c.values[i] = s.capacitance[i];
        write_pgm(predictor(c), a.out);
        if (!a.truth_out.empty()) {
            PermittivityImage truth(part.manifest.img_h, part.manifest.img_w);
            for (std::size_t i = 0; i < truth.size(); ++i) truth.values()[i] = s.image[i];
            write_pgm(truth, a.truth_out);
        }
        std::cout << "wrote " << a.out << " (" << name << ")\n";
    });
}

// ---- stitch ----

struct StitchArgs {
    std::vector<std::string> inputs;
    int overlap = 0;
    std::string out;
};

void add_stitch(CLI::App& app, StitchArgs& a) {
    CLI::App* cmd = app.add_subcommand("stitch", "concatenate window PGMs into a wide image");
    cmd->add_option("--inputs", a.inputs, "window PGM files, left to right")->required();
    cmd->add_option("--overlap", a.overlap, "cross-fade overlap in pixels");
    cmd->add_option("--out", a.out, "output PGM")->required();

    cmd->callback([&a] {
        std::vector<PermittivityImage> windows;
        for (const std::string& p : a.inputs) {
            require_file(p);
            windows.push_back(read_pgm(p));
        }
        const PermittivityImage wide = stitch(windows, a.overlap);
        write_pgm(wide, a.out);
        std::cout << "stitched " << windows.size() << " windows into " << wide.height() << "x"
                  << wide.width() << " -> " << a.out << "\n";
    });
}

// ---- gradcheck ----

void add_gradcheck(CLI::App& app, double& step) {
    CLI::App* cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    cmd->add_option("--step", step, "central-difference step");
    cmd->callback([&step] {
        const auto cases = run_gradient_suite(step);
        double worst = 0.0;
        for (const auto& c : cases) {
            std::printf("  %-28s max rel error %.3e\n", c.name.c_str(), c.max_rel_error);
            worst = std::max(worst, c.max_rel_error);
        }
        std::printf("max relative error: %.3e (threshold 1e-4)\n", worst);
        if (worst >= 1e-4) throw NumericError("gradient check failed", worst);
    });
}

// ---- export-image ----

struct ExportArgs {
    std::string data;
    std::string split_name = "all";
    int index = 0;
    std::string out;
};

void add_export_image(CLI::App& app, ExportArgs& a) {
    CLI::App* cmd = app.add_subcommand("export-image", "export a stored ground truth as PGM");
    cmd->add_option("--data", a.data, "dataset directory")->required();
    cmd->add_option("--split", a.split_name, "train|val|test|all");
    cmd->add_option("--index", a.index, "sample index within the split")->required();
    cmd->add_option("--out", a.out, "output PGM")->required();

    cmd->callback([&a] {
        const Dataset part = load_split(a.data, a.split_name);
        if (a.index < 0 || a.index >= static_cast<int>(part.samples.size()))
            throw UsageError("--index out of range (split has " +
                             std::to_string(part.samples.size()) + " samples)");
        PermittivityImage img(part.manifest.img_h, part.manifest.img_w);
        for (std::size_t i = 0; i < img.size(); ++i) img.values()[i] = part.samples[a.index].image[i];
        write_pgm(img, a.out);
        std::cout << "wrote " << a.out << "\n";
    });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"microscale planar ECT toolkit: simulation, reconstruction, evaluation"};
    app.require_subcommand(1);
    app.footer("Every subcommand is reproducible from its flags plus --seed.\n"
               "Thread count: --threads flag, else ECT_THREADS, else all cores.");

    GenDataArgs gen_args;
    TrainArgs train_args;
    EvalArgs eval_args;
    ReconstructArgs rec_args;
    StitchArgs stitch_args;
    ExportArgs export_args;
    double gradcheck_step = 1e-5;

    add_gen_data(app, gen_args);
    add_train(app, train_args);
    add_eval(app, eval_args);
    add_reconstruct(app, rec_args);
    add_stitch(app, stitch_args);
    add_gradcheck(app, gradcheck_step);
    add_export_image(app, export_args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return 0;  // --help / --version
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const InvalidSpecError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const InvalidInputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return 0;
}
