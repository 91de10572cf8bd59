// Command-line entry point: blob data generation, expert trajectory
// recording, distillation, evaluation and the hypergradient check.
//
// Exit codes: 0 ok, 2 usage/config, 3 IO/training, 4 divergence,
// 5 check failure.

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "hotm/data.hpp"
#include "hotm/digest.hpp"
#include "hotm/distill.hpp"
#include "hotm/errors.hpp"
#include "hotm/eval.hpp"
#include "hotm/expert.hpp"
#include "hotm/model.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hotm;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitDivergence = 4;
constexpr int kExitCheckFailed = 5;

void write_json_file(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
    }
    return j;
}

// ------------------------------ distill config ------------------------------

json distill_config_to_json(const DistillConfig& cfg) {
    return json{{"iterations", cfg.iterations},
                {"expert_span", cfg.expert_span},
                {"student_steps", cfg.student_steps},
                {"t_min", cfg.t_min},
                {"t_max", cfg.t_max},
                {"ho_weight", cfg.ho_weight},
                {"kappa_base", cfg.kappa_base},
                {"kappa_growth", cfg.kappa_growth},
                {"kappa_period", cfg.kappa_period},
                {"granularity", granularity_name(cfg.granularity)},
                {"outer_lr_images", cfg.outer_lr_images},
                {"outer_lr_alpha", cfg.outer_lr_alpha},
                {"outer_momentum", cfg.outer_momentum},
                {"eps", cfg.eps},
                {"ho_enabled", cfg.ho_enabled},
                {"e2c_enabled", cfg.e2c_enabled},
                {"seed", cfg.seed},
                {"ipc", cfg.ipc},
                {"alpha_init", cfg.alpha_init},
                {"log_units", cfg.log_units},
                {"max_segment_retries", cfg.max_segment_retries}};
}

DistillConfig distill_config_from_json(const json& j) {
    DistillConfig cfg;
    for (const auto& [key, value] : j.items()) {
        if (key == "iterations") cfg.iterations = value.get<int64_t>();
        else if (key == "expert_span") cfg.expert_span = value.get<int>();
        else if (key == "student_steps") cfg.student_steps = value.get<int>();
        else if (key == "t_min") cfg.t_min = value.get<int>();
        else if (key == "t_max") cfg.t_max = value.get<int>();
        else if (key == "ho_weight") cfg.ho_weight = value.get<double>();
        else if (key == "kappa_base") cfg.kappa_base = value.get<double>();
        else if (key == "kappa_growth") cfg.kappa_growth = value.get<double>();
        else if (key == "kappa_period") cfg.kappa_period = value.get<int64_t>();
        else if (key == "granularity") cfg.granularity = parse_granularity(value.get<std::string>());
        else if (key == "outer_lr_images") cfg.outer_lr_images = value.get<double>();
        else if (key == "outer_lr_alpha") cfg.outer_lr_alpha = value.get<double>();
        else if (key == "outer_momentum") cfg.outer_momentum = value.get<double>();
        else if (key == "eps") cfg.eps = value.get<double>();
        else if (key == "ho_enabled") cfg.ho_enabled = value.get<bool>();
        else if (key == "e2c_enabled") cfg.e2c_enabled = value.get<bool>();
        else if (key == "seed") cfg.seed = value.get<uint64_t>();
        else if (key == "ipc") cfg.ipc = value.get<int>();
        else if (key == "alpha_init") cfg.alpha_init = value.get<double>();
        else if (key == "log_units") cfg.log_units = value.get<bool>();
        else if (key == "max_segment_retries") cfg.max_segment_retries = value.get<int>();
        else throw ConfigError("unknown distill config key '" + key + "'");
    }
    return cfg;
}

std::vector<Trajectory> load_expert_pool(const fs::path& dir) {
    std::vector<fs::path> entries;
    if (!fs::is_directory(dir)) throw IoError("expert directory " + dir.string() + " not found");
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_directory() && fs::exists(e.path() / "manifest.json")) {
            entries.push_back(e.path());
        }
    }
    std::sort(entries.begin(), entries.end());
    if (entries.empty()) throw IoError("no trajectories under " + dir.string());
    std::vector<Trajectory> pool;
    pool.reserve(entries.size());
    for (const auto& p : entries) pool.push_back(load_trajectory(p));
    return pool;
}

void run_parallel(size_t count, int jobs, const std::function<void(size_t)>& fn) {
    if (jobs <= 1 || count <= 1) {
        for (size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    std::vector<std::thread> threads;
    size_t n_threads = std::min<size_t>(static_cast<size_t>(jobs), count);
    std::exception_ptr failure;
    std::mutex failure_mutex;
    for (size_t t = 0; t < n_threads; ++t) {
        threads.emplace_back([&]() {
            while (true) {
                size_t i = next.fetch_add(1);
                if (i >= count) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& t : threads) t.join();
    if (failure) std::rethrow_exception(failure);
}

std::vector<uint64_t> seed_list(int count) {
    std::vector<uint64_t> seeds(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) seeds[static_cast<size_t>(i)] = static_cast<uint64_t>(i);
    return seeds;
}

// ------------------------------- subcommands --------------------------------

struct GenDataArgs {
    std::string out;
    int classes = 3;
    int per_class = 200;
    int hw = 8;
    uint64_t seed = 0;
};

int cmd_gen_data(const GenDataArgs& a) {
    LabeledDataset ds = generate_blobs(a.classes, a.per_class, a.hw, a.seed);
    save_dataset(ds, a.out);
    write_json_file(fs::path(a.out) / "resolved_config.json",
                    json{{"gen_data", {{"classes", a.classes},
                                       {"per_class", a.per_class},
                                       {"hw", a.hw},
                                       {"seed", a.seed}}}});
    std::cout << "wrote " << ds.n() << " images (" << a.classes << " classes) to " << a.out
              << "\n";
    return 0;
}

struct GenExpertsArgs {
    std::string data;
    std::string out;
    int count = 10;
    int epochs = 20;
    std::string arch = "convnet:d=2:w=16:norm=instance";
    uint64_t seed = 0;
    double lr = 0.01;
    int batch = 256;
    int jobs = 1;
};

int cmd_gen_experts(const GenExpertsArgs& a) {
    if (a.count < 1) throw InputError("--count must be at least 1");
    LabeledDataset real = load_dataset(a.data);
    ArchSpec arch = parse_arch(a.arch);
    arch.in_c = static_cast<int>(real.c());
    arch.in_h = static_cast<int>(real.h());
    arch.in_w = static_cast<int>(real.w());
    arch.num_classes = real.class_count;
    arch.validate();

    fs::create_directories(a.out);
    run_parallel(static_cast<size_t>(a.count), a.jobs, [&](size_t i) {
        uint64_t seed = a.seed + i;
        Trajectory traj = train_teacher(real, arch, a.epochs, a.lr, a.batch, seed);
        char name[32];
        std::snprintf(name, sizeof(name), "expert_%03zu", i);
        save_trajectory(traj, fs::path(a.out) / name);
    });
    write_json_file(fs::path(a.out) / "resolved_config.json",
                    json{{"gen_experts",
                          {{"arch", arch.to_json()},
                           {"count", a.count},
                           {"epochs", a.epochs},
                           {"teacher_lr", a.lr},
                           {"batch_size", a.batch},
                           {"seed", a.seed}}}});
    std::cout << "wrote " << a.count << " trajectories (" << arch.to_string() << ", T=" << a.epochs
              << ") to " << a.out << "\n";
    return 0;
}

struct DistillArgs {
    std::string config;
    std::string experts;
    std::string data;
    std::string out;
};

int cmd_distill(const DistillArgs& a, const json& overrides) {
    json root = read_json_file(a.config);
    json section = root.value("distill", json::object());
    for (const auto& [key, value] : root.items()) {
        if (key != "distill") throw ConfigError("unknown config section '" + key + "'");
    }
    for (const auto& [key, value] : overrides.items()) section[key] = value;
    DistillConfig cfg = distill_config_from_json(section);
    cfg.validate();

    LabeledDataset real = load_dataset(a.data);
    std::vector<Trajectory> pool = load_expert_pool(a.experts);
    DistillResult result = run_distillation(real, pool, cfg);

    fs::create_directories(a.out);
    LabeledDataset distilled_view{result.distilled.images, result.distilled.labels,
                                  result.distilled.class_count};
    save_dataset(distilled_view, a.out);
    write_json_file(fs::path(a.out) / "alpha.json", json{{"alpha", result.distilled.alpha}});
    write_json_file(fs::path(a.out) / "resolved_config.json",
                    json{{"distill", distill_config_to_json(cfg)},
                         {"paths", {{"experts", a.experts}, {"data", a.data}, {"out", a.out}}}});

    std::ofstream log(fs::path(a.out) / "distill_log.jsonl", std::ios::trunc);
    if (!log) throw IoError("cannot write distill_log.jsonl");
    for (const auto& entry : result.log) {
        json line{{"iteration", entry.iteration}, {"loss", entry.loss},
                  {"l_tm", entry.l_tm},           {"l_hotm", entry.l_hotm},
                  {"selected_frac", entry.selected_frac}, {"kappa", entry.kappa},
                  {"alpha", entry.alpha}};
        if (cfg.log_units) {
            line["unit_losses"] = entry.unit_losses;
            line["v"] = entry.selected;
        }
        log << line.dump() << '\n';
    }
    std::cout << "distilled " << result.distilled.images.shape()[0] << " images in "
              << cfg.iterations << " iterations, alpha=" << result.distilled.alpha << ", wrote "
              << a.out << "\n";
    return 0;
}

struct EvalArgs {
    std::string distilled;
    std::string test;
    std::string archs = "convnet:d=2:w=16:norm=instance";
    int seeds = 5;
    int epochs = 100;
    std::optional<double> lr;
    std::string out;
    int jobs = 1;
};

int cmd_eval(const EvalArgs& a) {
    LabeledDataset train = load_dataset(a.distilled);
    LabeledDataset test = load_dataset(a.test);

    SyntheticDataset distilled;
    distilled.images = train.images;
    distilled.labels = train.labels;
    distilled.class_count = train.class_count;
    distilled.ipc = static_cast<int>(train.n()) / train.class_count;
    fs::path alpha_path = fs::path(a.distilled) / "alpha.json";
    if (fs::exists(alpha_path)) {
        distilled.alpha = read_json_file(alpha_path).at("alpha").get<float>();
    } else if (!a.lr) {
        throw ConfigError("no alpha.json next to the dataset; pass --lr");
    }

    std::vector<ArchSpec> archs;
    std::istringstream is(a.archs);
    std::string item;
    while (std::getline(is, item, ',')) {
        if (item.empty()) continue;
        ArchSpec spec = parse_arch(item);
        spec.in_c = static_cast<int>(train.c());
        spec.in_h = static_cast<int>(train.h());
        spec.in_w = static_cast<int>(train.w());
        spec.num_classes = train.class_count;
        spec.validate();
        archs.push_back(spec);
    }
    if (archs.empty()) throw InputError("--arch lists no architectures");

    auto reports = cross_arch(distilled, test, archs, seed_list(a.seeds), a.epochs, a.lr, a.jobs);

    size_t name_width = 4;
    for (const auto& r : reports) name_width = std::max(name_width, r.arch.to_string().size());
    std::printf("%-*s  %s\n", static_cast<int>(name_width), "arch", "accuracy(%)");
    json out_reports = json::array();
    for (const auto& r : reports) {
        std::printf("%-*s  %s\n", static_cast<int>(name_width), r.arch.to_string().c_str(),
                    r.mean_std_percent().c_str());
        out_reports.push_back(r.to_json());
    }
    fs::path report_path = a.out.empty() ? fs::path(a.distilled) / "eval_report.json"
                                         : fs::path(a.out);
    write_json_file(report_path, json{{"seeds", a.seeds},
                                      {"epochs", a.epochs},
                                      {"reports", out_reports}});
    return 0;
}

struct GradcheckArgs {
    std::string scale = "tiny";
    double tol = 1e-3;
    double fd_step = 1e-3;
};

int cmd_gradcheck(const GradcheckArgs& a) {
    if (a.scale != "tiny") throw InputError("unknown --scale '" + a.scale + "'");
    GradCheckReport report = run_hypergradient_check(a.fd_step);
    std::printf("checked %d hypergradients (pixels + alpha)\n", report.checked);
    std::printf("max rel err   %.3e\n", report.max_rel_err);
    std::printf("alpha rel err %.3e\n", report.alpha_rel_err);
    std::printf("elapsed       %.2fs\n", report.seconds);
    if (!(report.max_rel_err < a.tol)) {
        std::fprintf(stderr, "gradcheck failed: %.3e exceeds tolerance %.3e\n", report.max_rel_err,
                     a.tol);
        return kExitCheckFailed;
    }
    return 0;
}

int classify_error() {
    try {
        throw;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const ConstructionError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const InputError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const DimensionError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const ContractError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const DivergenceError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitDivergence;
    } catch (const Error& e) {
        // Training, integrity, version and IO failures.
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitIo;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitIo;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dataset distillation via trajectory matching with a shape-wise potential "
                 "and easy-to-complex unit selection"};
    app.require_subcommand(1);

    GenDataArgs gd;
    auto* gen_data = app.add_subcommand("gen-data", "generate a blob-image dataset");
    gen_data->add_option("--out", gd.out, "output dataset directory")->required();
    gen_data->add_option("--classes", gd.classes, "number of classes");
    gen_data->add_option("--per-class", gd.per_class, "samples per class");
    gen_data->add_option("--hw", gd.hw, "image side in pixels");
    gen_data->add_option("--seed", gd.seed, "generator seed");

    GenExpertsArgs ge;
    auto* gen_experts = app.add_subcommand("gen-experts", "train teachers and record trajectories");
    gen_experts->add_option("--data", ge.data, "training dataset directory")->required();
    gen_experts->add_option("--out", ge.out, "output trajectory directory")->required();
    gen_experts->add_option("--count", ge.count, "number of teachers (seeds S..S+C-1)");
    gen_experts->add_option("--epochs", ge.epochs, "teacher epochs T");
    gen_experts->add_option("--arch", ge.arch, "architecture, e.g. convnet:d=2:w=16:norm=instance");
    gen_experts->add_option("--seed", ge.seed, "first teacher seed");
    gen_experts->add_option("--lr", ge.lr, "teacher learning rate");
    gen_experts->add_option("--batch", ge.batch, "teacher batch size");
    gen_experts->add_option("--jobs", ge.jobs, "parallel teacher trainings");

    DistillArgs di;
    auto* distill = app.add_subcommand("distill", "optimize a synthetic dataset");
    distill->add_option("--config", di.config, "JSON config file")->required();
    distill->add_option("--experts", di.experts, "trajectory pool directory")->required();
    distill->add_option("--data", di.data, "real dataset directory")->required();
    distill->add_option("--out", di.out, "output directory")->required();
    // Field overrides; values take precedence over the config file.
    int64_t ov_iterations = 0;
    uint64_t ov_seed = 0;
    int ov_ipc = 0, ov_span = 0, ov_steps = 0, ov_tmin = 0, ov_tmax = 0;
    double ov_how = 0, ov_kb = 0, ov_kg = 0, ov_lri = 0, ov_lra = 0, ov_mom = 0, ov_ainit = 0;
    int64_t ov_kp = 0;
    std::string ov_gran;
    bool ov_ho = true, ov_e2c = true, ov_logu = false;
    auto* o_it = distill->add_option("--iterations", ov_iterations, "override iterations");
    auto* o_seed = distill->add_option("--seed", ov_seed, "override seed");
    auto* o_ipc = distill->add_option("--ipc", ov_ipc, "override images per class");
    auto* o_span = distill->add_option("--expert-span", ov_span, "override expert span M");
    auto* o_steps = distill->add_option("--student-steps", ov_steps, "override student steps N");
    auto* o_tmin = distill->add_option("--t-min", ov_tmin, "override sampling floor");
    auto* o_tmax = distill->add_option("--t-max", ov_tmax, "override sampling ceiling");
    auto* o_how = distill->add_option("--ho-weight", ov_how, "override potential weight");
    auto* o_kb = distill->add_option("--kappa-base", ov_kb, "override threshold base");
    auto* o_kg = distill->add_option("--kappa-growth", ov_kg, "override threshold growth");
    auto* o_kp = distill->add_option("--kappa-period", ov_kp, "override threshold period");
    auto* o_gran = distill->add_option("--granularity", ov_gran, "override unit granularity");
    auto* o_lri = distill->add_option("--lr-images", ov_lri, "override image learning rate");
    auto* o_lra = distill->add_option("--lr-alpha", ov_lra, "override alpha learning rate");
    auto* o_mom = distill->add_option("--momentum", ov_mom, "override outer momentum");
    auto* o_ainit = distill->add_option("--alpha-init", ov_ainit, "override initial alpha");
    auto* o_ho = distill->add_option("--ho-enabled", ov_ho, "toggle the potential term");
    auto* o_e2c = distill->add_option("--e2c-enabled", ov_e2c, "toggle unit selection");
    auto* o_logu = distill->add_option("--log-units", ov_logu, "log per-unit losses");

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "train fresh networks on a distilled set");
    eval_cmd->add_option("--distilled", ev.distilled, "distilled dataset directory")->required();
    eval_cmd->add_option("--test", ev.test, "test dataset directory")->required();
    eval_cmd->add_option("--arch", ev.archs, "comma-separated architectures");
    eval_cmd->add_option("--seeds", ev.seeds, "number of evaluation seeds");
    eval_cmd->add_option("--epochs", ev.epochs, "training epochs per seed");
    double ev_lr = 0.0;
    auto* o_evlr = eval_cmd->add_option("--lr", ev_lr, "override the stored alpha");
    eval_cmd->add_option("--out", ev.out, "report path (default: <distilled>/eval_report.json)");
    eval_cmd->add_option("--jobs", ev.jobs, "parallel seed evaluations");

    GradcheckArgs gc;
    auto* gradcheck = app.add_subcommand("gradcheck", "hypergradient finite-difference check");
    gradcheck->add_option("--scale", gc.scale, "instance size (tiny)");
    gradcheck->add_option("--tol", gc.tol, "max relative error accepted");
    gradcheck->add_option("--fd-step", gc.fd_step, "central difference step");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (gen_data->parsed()) return cmd_gen_data(gd);
        if (gen_experts->parsed()) return cmd_gen_experts(ge);
        if (distill->parsed()) {
            json overrides = json::object();
            if (o_it->count()) overrides["iterations"] = ov_iterations;
            if (o_seed->count()) overrides["seed"] = ov_seed;
            if (o_ipc->count()) overrides["ipc"] = ov_ipc;
            if (o_span->count()) overrides["expert_span"] = ov_span;
            if (o_steps->count()) overrides["student_steps"] = ov_steps;
            if (o_tmin->count()) overrides["t_min"] = ov_tmin;
            if (o_tmax->count()) overrides["t_max"] = ov_tmax;
            if (o_how->count()) overrides["ho_weight"] = ov_how;
            if (o_kb->count()) overrides["kappa_base"] = ov_kb;
            if (o_kg->count()) overrides["kappa_growth"] = ov_kg;
            if (o_kp->count()) overrides["kappa_period"] = ov_kp;
            if (o_gran->count()) overrides["granularity"] = ov_gran;
            if (o_lri->count()) overrides["outer_lr_images"] = ov_lri;
            if (o_lra->count()) overrides["outer_lr_alpha"] = ov_lra;
            if (o_mom->count()) overrides["outer_momentum"] = ov_mom;
            if (o_ainit->count()) overrides["alpha_init"] = ov_ainit;
            if (o_ho->count()) overrides["ho_enabled"] = ov_ho;
            if (o_e2c->count()) overrides["e2c_enabled"] = ov_e2c;
            if (o_logu->count()) overrides["log_units"] = ov_logu;
            return cmd_distill(di, overrides);
        }
        if (eval_cmd->parsed()) {
            if (o_evlr->count()) ev.lr = ev_lr;
            return cmd_eval(ev);
        }
        if (gradcheck->parsed()) return cmd_gradcheck(gc);
    } catch (...) {
        return classify_error();
    }
    return kExitUsage;
}
