// cglbench: command-line driver for datasets, runs, campaigns and analysis.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "cglbench/cglbench.hpp"

namespace {

using namespace cglbench;

struct Options {
    // data
    std::string dataset;
    std::string profile = "ucla";
    std::size_t seqs_per_class = 60;
    double noise = 0.05;
    std::string out;
    // backbone
    std::string backbone = "gcn";
    std::size_t depth = 2;
    std::size_t width = 64;
    std::size_t head_width = 64;
    std::size_t temporal_kernel = 9;
    // trainer
    std::size_t epochs = 100;
    double lr = 0.001;
    std::string optimizer = "adam";
    // method
    std::vector<std::string> methods;
    std::optional<double> memory_strength, lambda_l, lambda_t, beta, lambda_dist, temperature, frac_memories;
    // campaign
    std::uint64_t seed = 0;
    std::size_t repeats = 1;
    std::size_t orders = 10;
    std::string mode = "task-sampled";
    std::size_t classes_per_task = 2;
    std::string store = "results";
    std::size_t workers = 0;
    std::string preset;
    std::vector<std::size_t> widths, depths;
    std::string axis;
    // analysis
    std::string report;
    std::string scatter;
};

/// Sections a config key may appear in; the key names the long flag.
const std::map<std::string, std::vector<std::string>> kConfigSections = {
    {"data", {"dataset", "profile", "seqs-per-class", "noise", "out"}},
    {"backbone", {"backbone", "depth", "width", "head-width", "temporal-kernel"}},
    {"trainer", {"epochs", "lr", "optimizer"}},
    {"method",
     {"method", "memory-strength", "lambda-l", "lambda-t", "beta", "lambda-dist", "temperature", "frac-memories"}},
    {"campaign",
     {"seed", "repeats", "orders", "mode", "classes-per-task", "store", "workers", "preset", "widths", "depths", "axis"}},
    {"output", {"report", "scatter"}},
};

/// Fills options not given on the command line from a config file.
void apply_config(CLI::App& sub, const std::string& path) {
    const auto cfg = ConfigFile::load(path);
    for (const auto& [full, value] : cfg.values()) {
        const auto dot = full.find('.');
        const std::string section = dot == std::string::npos ? "" : full.substr(0, dot);
        const std::string key = dot == std::string::npos ? full : full.substr(dot + 1);
        const auto sec = kConfigSections.find(section);
        if (sec == kConfigSections.end() ||
            std::find(sec->second.begin(), sec->second.end(), key) == sec->second.end()) {
            throw ConfigError(path + ": unknown key '" + full + "'");
        }
        CLI::Option* opt = nullptr;
        try {
            opt = sub.get_option("--" + key);
        } catch (const CLI::OptionNotFound&) {
            throw ConfigError(path + ": key '" + full + "' does not apply to '" + sub.get_name() + "'");
        }
        if (opt->count() > 0) continue;
        std::stringstream items(value);
        std::string item;
        if (opt->get_expected_max() > 1) {
            while (std::getline(items, item, ',')) opt->add_result(item);
        } else {
            opt->add_result(value);
        }
        opt->run_callback();
    }
}

DatasetProfile profile_named(const std::string& name) {
    if (name == "ucla") return ucla_profile();
    if (name == "ntu") return ntu_profile();
    throw CLI::ValidationError("--profile", "expected ucla or ntu");
}

std::string dataset_name(const std::string& path) { return std::filesystem::path(path).stem().string(); }

MethodConfig method_config(const Options& o, const std::string& name) {
    MethodConfig c = MethodConfig::defaults(parse_method(name));
    if (o.memory_strength) c.memory_strength = *o.memory_strength;
    if (o.lambda_l) c.lambda_l = *o.lambda_l;
    if (o.lambda_t) c.lambda_t = *o.lambda_t;
    if (o.beta) c.beta = *o.beta;
    if (o.lambda_dist) c.lambda_dist = *o.lambda_dist;
    if (o.temperature) c.temperature = *o.temperature;
    if (o.frac_memories) c.frac_memories = *o.frac_memories;
    c.validate();
    return c;
}

ExperimentPlan make_plan(const Options& o) {
    ExperimentPlan plan;
    plan.dataset = dataset_name(o.dataset);
    std::vector<std::string> names = o.methods;
    if (names.empty() || (names.size() == 1 && names[0] == "all")) {
        names.clear();
        for (Method m : kAllMethods) names.push_back(to_string(m));
    }
    for (const auto& n : names) plan.methods.push_back(method_config(o, n));
    plan.mode = parse_order_mode(o.mode);
    plan.orders = o.orders;
    plan.repeats = o.repeats;
    plan.classes_per_task = o.classes_per_task;
    plan.backbone.kind = parse_backbone_kind(o.backbone);
    plan.backbone.depth = o.depth;
    plan.backbone.width = o.width;
    plan.backbone.head_width = o.head_width;
    plan.backbone.temporal_kernel = o.temporal_kernel;
    plan.trainer.epochs = o.epochs;
    plan.trainer.learning_rate = o.lr;
    if (o.optimizer == "adam") {
        plan.trainer.optimizer = OptimizerKind::adam;
    } else if (o.optimizer == "sgd") {
        plan.trainer.optimizer = OptimizerKind::sgd;
    } else {
        throw CLI::ValidationError("--optimizer", "expected adam or sgd");
    }
    plan.master_seed = o.seed;
    return plan;
}

struct Loaded {
    Dataset ds;
    SkeletonGraph graph;
};

Loaded load(const Options& o) {
    if (o.dataset.empty()) throw CLI::RequiredError("--dataset");
    if (!std::filesystem::exists(o.dataset)) throw CLI::ValidationError("--dataset", "file not found: " + o.dataset);
    Loaded l{load_dataset(o.dataset), {}};
    l.graph = graph_for_joints(l.ds.profile.joints);
    return l;
}

/// Applies full-protocol values to options the user did not set.
void apply_preset(CLI::App& sub, Options& o) {
    if (o.preset.empty()) return;
    if (o.preset != "paper") throw CLI::ValidationError("--preset", "only 'paper' is defined");
    auto unset = [&](const char* flag) {
        try {
            return sub.get_option(flag)->count() == 0;
        } catch (const CLI::OptionNotFound&) {
            return false;
        }
    };
    if (unset("--epochs")) o.epochs = 100;
    if (unset("--lr")) o.lr = 0.001;
    if (unset("--repeats")) o.repeats = 5;
    if (unset("--orders")) o.orders = 100;
    if (unset("--mode") && sub.get_name() == "order-campaign") o.mode = "task-exhaustive";
}

void print_record(const RunRecord& r) {
    nlohmann::json j = {{"key", r.key.str()}, {"hash", r.hash}, {"AA", r.final_aa}};
    if (r.final_af) j["AF"] = *r.final_af;
    std::cout << j.dump() << std::endl;
}

int cmd_gen_data(const Options& o) {
    if (o.out.empty()) throw CLI::RequiredError("--out");
    SyntheticProfile p;
    p.shape = profile_named(o.profile);
    p.seqs_per_class = o.seqs_per_class;
    p.noise_sigma = o.noise;
    const Dataset ds = generate_synthetic(p, o.seed);
    save_dataset(ds, o.out);
    std::cout << "wrote " << ds.size() << " sequences to " << o.out << " (hash " << RunKey::hex64(ds.content_hash())
              << ")\n";
    return 0;
}

int cmd_run(const Options& o, bool campaign) {
    ExperimentPlan plan = make_plan(o);
    if (!campaign) plan.mode = OrderMode::canonical;
    const auto data = load(o);
    ResultStore store(o.store);
    const auto progress = run_plan(plan, data.ds, data.graph, store, o.workers, print_record);
    std::cerr << progress.ran << " run(s) executed, " << progress.skipped << " already in " << o.store << "\n";
    if (progress.skipped > 0) {
        // Report cells that an earlier invocation already stored.
        for (const auto& c : enumerate_cells(plan, data.ds)) print_record(store.get(c.key()));
    }
    return 0;
}

int cmd_sweep(const Options& o) {
    std::vector<std::size_t> widths = o.widths;
    std::vector<std::size_t> depths = o.depths;
    if (!o.axis.empty()) {
        if (!widths.empty() || !depths.empty()) throw RunError("--axis cannot be combined with --widths/--depths");
        if (o.axis == "width") {
            widths = default_sweep_values(SweepAxis::width);
        } else if (o.axis == "depth") {
            depths = default_sweep_values(SweepAxis::depth);
        } else {
            throw CLI::ValidationError("--axis", "expected width or depth");
        }
    }
    const SweepAxis axis = sweep_axis(widths, depths);
    ExperimentPlan plan = make_plan(o);
    plan.mode = OrderMode::canonical;
    const auto data = load(o);
    ResultStore store(o.store);
    const auto points = run_architecture_sweep(plan, axis, axis == SweepAxis::width ? widths : depths, data.ds,
                                               data.graph, store, o.workers);
    std::cout << "method,axis,value,arch,AA_mean,AA_std,AF_mean,AF_std\n";
    for (const auto& p : points) {
        std::cout << p.method << ',' << (axis == SweepAxis::width ? "width" : "depth") << ',' << p.value << ','
                  << p.arch << ',' << p.aa.mean << ',' << p.aa.std << ',' << p.af.mean << ',' << p.af.std << '\n';
    }
    return 0;
}

int cmd_grid(const Options& o) {
    if (o.methods.size() != 1) throw CLI::ValidationError("--method", "grid-search takes exactly one method");
    ExperimentPlan plan = make_plan(o);
    const auto data = load(o);
    const Method m = parse_method(o.methods.front());
    const auto grid = HyperGrid::standard().for_method(m);
    const auto result = grid_search(grid, plan, data.ds, data.graph, o.workers);
    nlohmann::json j = {{"best", result.best.relevant_json()}, {"candidates", nlohmann::json::array()}};
    for (const auto& c : result.candidates) {
        j["candidates"].push_back({{"config", c.config.relevant_json()}, {"val_AA", c.val_aa}, {"val_AF", c.val_af}});
    }
    if (!o.out.empty()) {
        std::ofstream(o.out) << j.dump(2) << '\n';
    }
    std::cout << j.dump(2) << '\n';
    return 0;
}

std::vector<RunRecord> verified_records(const std::string& dir) {
    if (!std::filesystem::is_directory(dir)) throw StoreError("no records: '" + dir + "' is not a result store");
    ResultStore store(dir);
    if (store.size() == 0) throw StoreError("no records in '" + dir + "'");
    store.verify();
    return store.records();
}

std::size_t task_count(const std::vector<RunRecord>& records) {
    std::size_t b = 0;
    for (const auto& r : records) b = std::max(b, r.matrix.tasks());
    return b;
}

int cmd_analyze(const Options& o) {
    const auto records = verified_records(o.store);
    const auto report = metric_report(records);
    const std::string report_path = o.report.empty() ? (std::filesystem::path(o.store) / "report.json").string() : o.report;
    std::ofstream(report_path) << report.dump(2) << '\n';
    const std::string scatter_path =
        o.scatter.empty() ? (std::filesystem::path(o.store) / "scatter.csv").string() : o.scatter;
    std::ofstream csv(scatter_path);
    emit_scatter(csv, scatter_points(records), task_count(records));
    std::cout << report.dump(2) << '\n';
    std::cerr << records.size() << " record(s) verified; report " << report_path << ", scatter " << scatter_path
              << "\n";
    return 0;
}

int cmd_emit_plots(const Options& o) {
    const auto records = verified_records(o.store);
    if (o.out.empty()) {
        emit_scatter(std::cout, scatter_points(records), task_count(records));
    } else {
        std::ofstream csv(o.out);
        emit_scatter(csv, scatter_points(records), task_count(records));
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Continual graph learning benchmark harness"};
    app.require_subcommand(1);
    Options o;
    std::string config;

    auto add_config = [&](CLI::App* sub) {
        sub->add_option("--config", config, "key = value config file; command-line flags take precedence")
            ->check(CLI::ExistingFile);
    };
    auto add_data = [&](CLI::App* sub) {
        sub->add_option("--dataset", o.dataset, "dataset file (.cglskel binary or .jsonl)");
        sub->add_option("--classes-per-task", o.classes_per_task, "classes per task");
    };
    auto add_backbone = [&](CLI::App* sub) {
        sub->add_option("--backbone", o.backbone, "gcn or stgcn-lite");
        sub->add_option("--depth", o.depth, "graph layers");
        sub->add_option("--width", o.width, "hidden units per graph layer");
        sub->add_option("--head-width", o.head_width, "hidden units of the classifier head");
        sub->add_option("--temporal-kernel", o.temporal_kernel, "stgcn-lite temporal kernel (odd)");
    };
    auto add_trainer = [&](CLI::App* sub) {
        sub->add_option("--epochs", o.epochs, "full-batch epochs per task");
        sub->add_option("--lr", o.lr, "learning rate");
        sub->add_option("--optimizer", o.optimizer, "adam or sgd");
    };
    auto add_method = [&](CLI::App* sub) {
        sub->add_option("--method", o.methods, "method name(s) or 'all'")->delimiter(',');
        sub->add_option("--memory-strength", o.memory_strength, "EWC/MAS lambda, GEM margin");
        sub->add_option("--lambda-l", o.lambda_l, "TWP loss-importance weight");
        sub->add_option("--lambda-t", o.lambda_t, "TWP topology-importance weight");
        sub->add_option("--beta", o.beta, "TWP gradient-norm weight");
        sub->add_option("--lambda-dist", o.lambda_dist, "LwF distillation weight");
        sub->add_option("--temperature", o.temperature, "LwF temperature");
        sub->add_option("--frac-memories", o.frac_memories, "GEM/Replay memory fraction");
    };
    auto add_campaign = [&](CLI::App* sub) {
        sub->add_option("--seed", o.seed, "master seed");
        sub->add_option("--repeats", o.repeats, "repeats per order");
        sub->add_option("--store", o.store, "result store directory");
        sub->add_option("--workers", o.workers, "parallel runs (capped by CGLBENCH_WORKERS)");
        sub->add_option("--preset", o.preset, "'paper': protocol values for unset flags");
    };

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic skeleton dataset");
    add_config(gen);
    gen->add_option("--out", o.out, "output file (.cglskel or .jsonl)");
    gen->add_option("--profile", o.profile, "ucla (20 joints, 52 frames) or ntu (25 joints, 300 frames)");
    gen->add_option("--seqs-per-class", o.seqs_per_class, "sequences per class");
    gen->add_option("--noise", o.noise, "coordinate noise sigma");
    gen->add_option("--seed", o.seed, "generator seed");

    auto* run = app.add_subcommand("run", "train methods on the canonical curriculum");
    auto* campaign = app.add_subcommand("order-campaign", "task-order or class-order sensitivity campaign");
    auto* sweep = app.add_subcommand("sweep-arch", "width or depth sweep on the canonical curriculum");
    auto* grid = app.add_subcommand("grid-search", "hyperparameter grid search on validation splits");
    for (auto* sub : {run, campaign, sweep, grid}) {
        add_config(sub);
        add_data(sub);
        add_backbone(sub);
        add_trainer(sub);
        add_method(sub);
        add_campaign(sub);
    }
    campaign->add_option("--mode", o.mode, "canonical, task-exhaustive, task-sampled or class-sampled");
    campaign->add_option("--orders", o.orders, "number of sampled orders");
    sweep->add_option("--widths", o.widths, "width values")->delimiter(',');
    sweep->add_option("--depths", o.depths, "depth values")->delimiter(',');
    sweep->add_option("--axis", o.axis, "width or depth with the default value lists");
    grid->add_option("--out", o.out, "write the search result JSON here");

    auto* analyze = app.add_subcommand("analyze", "verify a store and write metric report and scatter data");
    add_config(analyze);
    analyze->add_option("--store", o.store, "result store directory");
    analyze->add_option("--report", o.report, "report JSON path (default <store>/report.json)");
    analyze->add_option("--scatter", o.scatter, "scatter CSV path (default <store>/scatter.csv)");

    auto* plots = app.add_subcommand("emit-plots", "write AA/AF scatter CSV with the AF bound line");
    add_config(plots);
    plots->add_option("--store", o.store, "result store directory");
    plots->add_option("--out", o.out, "CSV path (default stdout)");

    try {
        app.parse(argc, argv);
        CLI::App* sub = app.get_subcommands().front();
        if (!config.empty()) apply_config(*sub, config);
        apply_preset(*sub, o);
        if (sub == gen) return cmd_gen_data(o);
        if (sub == run) return cmd_run(o, false);
        if (sub == campaign) return cmd_run(o, true);
        if (sub == sweep) return cmd_sweep(o);
        if (sub == grid) return cmd_grid(o);
        if (sub == analyze) return cmd_analyze(o);
        if (sub == plots) return cmd_emit_plots(o);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
