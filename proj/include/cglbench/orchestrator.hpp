#pragma once

// Campaign driver: seeded run cells, a file-per-record result store, order
// and architecture campaigns, grid search and a small config-file reader.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "cglbench/backbone.hpp"
#include "cglbench/data.hpp"
#include "cglbench/methods.hpp"
#include "cglbench/metrics.hpp"
#include "cglbench/random.hpp"
#include "json.hpp"

namespace cglbench {

class RunError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class StoreError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Keys and seeds

struct RunKey {
    std::string method;
    std::string order_id;
    std::size_t repeat = 0;
    std::string arch;
    std::string dataset;

    auto operator<=>(const RunKey&) const = default;

    [[nodiscard]] std::string str() const {
        return method + "|" + order_id + "|r" + std::to_string(repeat) + "|" + arch + "|" + dataset;
    }

    /// File-system safe rendering of str().
    [[nodiscard]] std::string file_stem() const {
        std::string out;
        for (char c : str()) {
            const bool keep = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '-' ||
                              c == '.' || c == '_' || c == '=';
            out += keep ? c : (c == '|' ? '~' : '_');
        }
        return out + "-" + hex64(fnv1a(str())).substr(0, 8);
    }

    [[nodiscard]] nlohmann::json to_json() const {
        return {{"method", method}, {"order_id", order_id}, {"repeat", repeat}, {"arch", arch}, {"dataset", dataset}};
    }
    static RunKey from_json(const nlohmann::json& j) {
        return {j.at("method").get<std::string>(), j.at("order_id").get<std::string>(),
                j.at("repeat").get<std::size_t>(), j.at("arch").get<std::string>(), j.at("dataset").get<std::string>()};
    }

    static std::string hex64(std::uint64_t v) {
        static constexpr char digits[] = "0123456789abcdef";
        std::string s(16, '0');
        for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
        return s;
    }
};

/// Splits depend on (master seed, repeat) only, so every method and order in
/// a repeat sees the same train/val/test partition.
inline std::uint64_t split_seed_for(std::uint64_t master, std::size_t repeat) {
    return derive_seed(master, "split/" + std::to_string(repeat));
}

/// Per-run seed: hash of the master seed and the run coordinates.
inline std::uint64_t run_seed_for(std::uint64_t master, const RunKey& key) {
    return derive_seed(master, "run/" + key.method + "/" + key.order_id + "/" + std::to_string(key.repeat) + "/" +
                                   key.arch);
}

// ---------------------------------------------------------------------------
// Records

struct RunRecord {
    RunKey key;
    nlohmann::json method_config;
    std::uint64_t seed = 0;
    std::uint64_t split_seed = 0;
    std::vector<std::size_t> task_order;
    std::vector<int> class_order;
    AccuracyMatrix matrix;
    std::map<int, double> class_accuracies;
    double final_aa = 0.0;
    std::optional<double> final_af;
    double wall_time_ms = 0.0;
    std::string hash;

    /// Everything except wall time and the hash itself.
    [[nodiscard]] nlohmann::json payload() const {
        nlohmann::json classes = nlohmann::json::object();
        for (const auto& [c, a] : class_accuracies) classes[std::to_string(c)] = a;
        nlohmann::json j = {{"key", key.to_json()},
                            {"method_config", method_config},
                            {"seed", seed},
                            {"split_seed", split_seed},
                            {"task_order", task_order},
                            {"class_order", class_order},
                            {"accuracy_matrix", matrix.rows()},
                            {"class_accuracies", classes},
                            {"summary", {{"AA", final_aa}, {"AF", final_af ? nlohmann::json(*final_af) : nlohmann::json()}}}};
        return j;
    }

    [[nodiscard]] std::string compute_hash() const { return RunKey::hex64(fnv1a(payload().dump())); }

    [[nodiscard]] nlohmann::json to_json() const {
        nlohmann::json j = payload();
        j["wall_time_ms"] = wall_time_ms;
        j["hash"] = hash;
        return j;
    }

    static RunRecord from_json(const nlohmann::json& j) {
        RunRecord r;
        r.key = RunKey::from_json(j.at("key"));
        r.method_config = j.at("method_config");
        r.seed = j.at("seed").get<std::uint64_t>();
        r.split_seed = j.at("split_seed").get<std::uint64_t>();
        r.task_order = j.at("task_order").get<std::vector<std::size_t>>();
        r.class_order = j.at("class_order").get<std::vector<int>>();
        r.matrix = AccuracyMatrix::from_rows(j.at("accuracy_matrix").get<std::vector<std::vector<double>>>());
        for (auto it = j.at("class_accuracies").begin(); it != j.at("class_accuracies").end(); ++it) {
            r.class_accuracies[std::stoi(it.key())] = it.value().get<double>();
        }
        r.final_aa = j.at("summary").at("AA").get<double>();
        if (!j.at("summary").at("AF").is_null()) r.final_af = j["summary"]["AF"].get<double>();
        r.wall_time_ms = j.value("wall_time_ms", 0.0);
        r.hash = j.at("hash").get<std::string>();
        return r;
    }
};

/// Throws unless the stored hash and summaries match a recomputation.
inline void verify_record(const RunRecord& r) {
    if (r.compute_hash() != r.hash) throw StoreError("hash mismatch for record " + r.key.str());
    const std::size_t b = r.matrix.tasks();
    if (b == 0) throw StoreError("empty accuracy matrix in record " + r.key.str());
    if (average_accuracy(r.matrix, b) != r.final_aa) throw StoreError("stored AA disagrees for " + r.key.str());
    if (b >= 2) {
        if (!r.final_af || average_forgetting(r.matrix, b) != *r.final_af) {
            throw StoreError("stored AF disagrees for " + r.key.str());
        }
    }
}

// ---------------------------------------------------------------------------
// Store

/// One JSON file per record plus `index.json` listing (key, file, hash)
/// sorted by key. Safe for concurrent put() from one process.
class ResultStore {
public:
    explicit ResultStore(std::filesystem::path dir) : dir_(std::move(dir)) {
        std::filesystem::create_directories(dir_ / "records");
        for (const auto& entry : std::filesystem::directory_iterator(dir_ / "records")) {
            if (entry.path().extension() != ".json") continue;
            const auto r = read_file(entry.path());
            index_[r.key] = {entry.path().filename().string(), r.hash};
        }
    }

    [[nodiscard]] const std::filesystem::path& dir() const noexcept { return dir_; }

    [[nodiscard]] bool contains(const RunKey& key) const {
        std::lock_guard lock(mutex_);
        return index_.count(key) != 0;
    }

    [[nodiscard]] std::size_t size() const {
        std::lock_guard lock(mutex_);
        return index_.size();
    }

    void put(const RunRecord& record) {
        const std::string file = record.key.file_stem() + ".json";
        const auto final_path = dir_ / "records" / file;
        const auto tmp = dir_ / "records" / (file + ".tmp");
        {
            std::ofstream out(tmp, std::ios::trunc);
            if (!out) throw StoreError("cannot write '" + tmp.string() + "'");
            out << record.to_json().dump(1) << '\n';
        }
        std::lock_guard lock(mutex_);
        if (index_.count(record.key)) {
            std::filesystem::remove(tmp);
            throw StoreError("duplicate record key " + record.key.str());
        }
        std::filesystem::rename(tmp, final_path);
        index_[record.key] = {file, record.hash};
        write_index_locked();
    }

    [[nodiscard]] RunRecord get(const RunKey& key) const {
        std::string file;
        {
            std::lock_guard lock(mutex_);
            const auto it = index_.find(key);
            if (it == index_.end()) throw StoreError("no record for " + key.str());
            file = it->second.first;
        }
        return read_file(dir_ / "records" / file);
    }

    /// All records in key order.
    [[nodiscard]] std::vector<RunRecord> records() const {
        std::vector<std::string> files;
        {
            std::lock_guard lock(mutex_);
            for (const auto& [k, v] : index_) files.push_back(v.first);
        }
        std::vector<RunRecord> out;
        for (const auto& f : files) out.push_back(read_file(dir_ / "records" / f));
        return out;
    }

    /// Sorted (key, hash) listing; equal for stores holding equal records.
    [[nodiscard]] std::vector<std::pair<std::string, std::string>> fingerprint() const {
        std::lock_guard lock(mutex_);
        std::vector<std::pair<std::string, std::string>> out;
        for (const auto& [k, v] : index_) out.emplace_back(k.str(), v.second);
        return out;
    }

    /// Verifies every record; returns the number checked.
    std::size_t verify() const {
        const auto all = records();
        for (const auto& r : all) verify_record(r);
        return all.size();
    }

private:
    static RunRecord read_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw StoreError("cannot read '" + path.string() + "'");
        try {
            return RunRecord::from_json(nlohmann::json::parse(in));
        } catch (const nlohmann::json::exception& e) {
            throw StoreError("malformed record '" + path.string() + "': " + e.what());
        }
    }

    void write_index_locked() const {
        nlohmann::json entries = nlohmann::json::array();
        for (const auto& [k, v] : index_) entries.push_back({{"key", k.str()}, {"file", v.first}, {"hash", v.second}});
        const auto tmp = dir_ / "index.json.tmp";
        {
            std::ofstream out(tmp, std::ios::trunc);
            out << nlohmann::json{{"records", entries}}.dump(1) << '\n';
        }
        std::filesystem::rename(tmp, dir_ / "index.json");
    }

    std::filesystem::path dir_;
    mutable std::mutex mutex_;
    std::map<RunKey, std::pair<std::string, std::string>> index_;
};

// ---------------------------------------------------------------------------
// Single run

struct RunCell {
    std::string label;  // method label used in the key
    MethodConfig method;
    BackboneConfig backbone;
    TrainerConfig trainer;
    Curriculum curriculum;
    std::size_t repeat = 0;
    std::uint64_t master_seed = 0;
    std::uint64_t split_seed = 0;
    std::string dataset;

    [[nodiscard]] RunKey key() const {
        return {label, curriculum.order_id(), repeat, backbone.arch_key(), dataset};
    }
};

struct RunOutput {
    RunRecord record;
    /// Rows evaluated on the validation split (only when requested).
    std::optional<AccuracyMatrix> validation;
};

/// Trains through the curriculum, evaluating after every task.
inline RunOutput run_curriculum(const RunCell& cell, const SampleBank& bank, const SkeletonGraph& graph,
                                bool with_validation = false) {
    const RunKey key = cell.key();
    const auto start = std::chrono::steady_clock::now();
    try {
        const std::size_t b = cell.curriculum.tasks.size();
        RunRecord rec;
        rec.key = key;
        rec.method_config = cell.method.relevant_json();
        rec.seed = run_seed_for(cell.master_seed, key);
        rec.split_seed = cell.split_seed;
        rec.task_order = cell.curriculum.task_order();
        rec.class_order = cell.curriculum.class_order();
        rec.matrix = AccuracyMatrix(b);
        AccuracyMatrix val(b);

        TrainerConfig trainer = cell.trainer;
        trainer.seed = rec.seed;
        BackboneConfig backbone = cell.backbone;
        backbone.input_feature_length = bank.feature_length();
        backbone.num_classes = bank.profile().num_classes;
        Model model = build_backbone(backbone, graph, rec.seed);
        MethodState state;
        const TrainingContext ctx{bank, graph};
        for (std::size_t k = 0; k < b; ++k) {
            train_task(model, state, cell.curriculum.tasks[k], cell.method, trainer, ctx);
            const auto row = evaluate(model, cell.curriculum, k, ctx, Split::test);
            for (std::size_t j = 0; j <= k; ++j) rec.matrix.set(k + 1, j + 1, row.task_accuracy[j]);
            if (k + 1 == b) rec.class_accuracies = row.class_accuracy;
            if (with_validation) {
                const auto vrow = evaluate(model, cell.curriculum, k, ctx, Split::val);
                for (std::size_t j = 0; j <= k; ++j) val.set(k + 1, j + 1, vrow.task_accuracy[j]);
            }
        }
        rec.final_aa = average_accuracy(rec.matrix, b);
        if (b >= 2) rec.final_af = average_forgetting(rec.matrix, b);
        rec.hash = rec.compute_hash();
        rec.wall_time_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        RunOutput out{std::move(rec), std::nullopt};
        if (with_validation) out.validation = std::move(val);
        return out;
    } catch (const std::exception& e) {
        throw RunError("run " + key.str() + " failed: " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Parallel execution

/// Worker count after applying the CGLBENCH_WORKERS cap.
inline std::size_t effective_workers(std::size_t requested) {
    std::size_t n = requested == 0 ? std::max(1u, std::thread::hardware_concurrency()) : requested;
    if (const char* env = std::getenv("CGLBENCH_WORKERS")) {
        try {
            const long cap = std::stol(env);
            if (cap >= 1) n = std::min(n, static_cast<std::size_t>(cap));
        } catch (const std::exception&) {
            throw RunError(std::string("CGLBENCH_WORKERS is not a number: '") + env + "'");
        }
    }
    return std::max<std::size_t>(1, n);
}

/// Calls fn(i) for i in [0, n) on `workers` threads. The exception of the
/// lowest failing index is rethrown after all workers stop.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    workers = std::min(std::max<std::size_t>(workers, 1), std::max<std::size_t>(n, 1));
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::vector<std::exception_ptr> errors(n);
    auto body = [&] {
        while (!failed.load()) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n) break;
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
                failed = true;
            }
        }
    };
    if (workers == 1) {
        body();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(body);
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

// ---------------------------------------------------------------------------
// Plans

enum class OrderMode { canonical, task_exhaustive, task_sampled, class_sampled };

inline std::string to_string(OrderMode m) {
    switch (m) {
        case OrderMode::canonical: return "canonical";
        case OrderMode::task_exhaustive: return "task-exhaustive";
        case OrderMode::task_sampled: return "task-sampled";
        case OrderMode::class_sampled: return "class-sampled";
    }
    return "unknown";
}

inline OrderMode parse_order_mode(const std::string& s) {
    for (OrderMode m : {OrderMode::canonical, OrderMode::task_exhaustive, OrderMode::task_sampled,
                        OrderMode::class_sampled}) {
        if (to_string(m) == s) return m;
    }
    throw RunError("unknown order mode '" + s + "' (canonical, task-exhaustive, task-sampled, class-sampled)");
}

struct ExperimentPlan {
    std::string dataset = "synthetic";
    std::vector<MethodConfig> methods;
    OrderMode mode = OrderMode::canonical;
    /// Number of sampled orders for the sampled modes.
    std::size_t orders = 100;
    std::size_t repeats = 5;
    std::size_t classes_per_task = 2;
    std::uint64_t permutation_cap = 120;
    BackboneConfig backbone;
    TrainerConfig trainer;
    std::uint64_t master_seed = 0;

    void validate() const {
        if (repeats == 0) throw RunError("repeats must be at least 1");
        if (methods.empty()) throw RunError("plan lists no methods");
        for (const auto& m : methods) m.validate();
        backbone.validate();
        if ((mode == OrderMode::task_sampled || mode == OrderMode::class_sampled) && orders == 0) {
            throw RunError("sampled order modes need at least one order");
        }
    }
};

/// Presentation orders shared by every method and repeat of the plan. Task
/// orders are permutations of canonical task ids; class orders are full
/// class permutations.
struct OrderList {
    std::vector<std::vector<std::size_t>> task_orders;
    std::vector<std::vector<int>> class_orders;
    [[nodiscard]] std::size_t size() const noexcept { return task_orders.size() + class_orders.size(); }
};

inline OrderList plan_orders(const ExperimentPlan& plan, std::size_t num_classes) {
    if (plan.classes_per_task == 0 || num_classes % plan.classes_per_task != 0) {
        throw RunError("classes cannot be grouped " + std::to_string(plan.classes_per_task) + " per task");
    }
    const std::size_t b = num_classes / plan.classes_per_task;
    OrderList out;
    switch (plan.mode) {
        case OrderMode::canonical: {
            std::vector<std::size_t> id(b);
            std::iota(id.begin(), id.end(), 0);
            out.task_orders.push_back(std::move(id));
            break;
        }
        case OrderMode::task_exhaustive:
            if (b > 20 || factorial(b) > plan.permutation_cap) {
                throw RunError(std::to_string(b) + "! task orders exceed the cap of " +
                               std::to_string(plan.permutation_cap) + "; use --mode task-sampled");
            }
            out.task_orders = all_permutations(b);
            break;
        case OrderMode::task_sampled:
            out.task_orders = sample_permutations(b, plan.orders, derive_seed(plan.master_seed, "orders/task"));
            break;
        case OrderMode::class_sampled:
            out.class_orders = sample_class_orders(num_classes, plan.classes_per_task, plan.orders,
                                                   derive_seed(plan.master_seed, "orders/class"));
            break;
    }
    return out;
}

inline std::vector<RunCell> enumerate_cells(const ExperimentPlan& plan, const Dataset& ds) {
    plan.validate();
    const OrderList orders = plan_orders(plan, ds.profile.num_classes);
    std::vector<RunCell> cells;
    for (std::size_t r = 0; r < plan.repeats; ++r) {
        const std::uint64_t split_seed = split_seed_for(plan.master_seed, r);
        const Curriculum canonical = build_canonical_tasks(ds, plan.classes_per_task, split_seed);
        std::vector<Curriculum> curricula;
        for (const auto& p : orders.task_orders) curricula.push_back(permute_task_order(canonical, p));
        for (const auto& c : orders.class_orders) curricula.push_back(build_tasks(ds, c, plan.classes_per_task, split_seed));
        for (const auto& m : plan.methods) {
            for (const auto& cur : curricula) {
                RunCell cell;
                cell.label = to_string(m.method);
                cell.method = m;
                cell.backbone = plan.backbone;
                cell.trainer = plan.trainer;
                cell.curriculum = cur;
                cell.repeat = r;
                cell.master_seed = plan.master_seed;
                cell.split_seed = split_seed;
                cell.dataset = plan.dataset;
                cells.push_back(std::move(cell));
            }
        }
    }
    return cells;
}

struct CampaignProgress {
    std::size_t total = 0;
    std::size_t skipped = 0;
    std::size_t ran = 0;
};

/// Runs every cell not already in the store. Re-invoking after an
/// interruption completes the same store.
inline CampaignProgress run_cells(const std::vector<RunCell>& cells, const SampleBank& bank, const SkeletonGraph& graph,
                                  ResultStore& store, std::size_t workers,
                                  const std::function<void(const RunRecord&)>& on_record = {}) {
    CampaignProgress progress;
    progress.total = cells.size();
    std::vector<std::size_t> todo;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (store.contains(cells[i].key())) {
            ++progress.skipped;
        } else {
            todo.push_back(i);
        }
    }
    std::mutex report;
    parallel_for(todo.size(), effective_workers(workers), [&](std::size_t t) {
        const auto out = run_curriculum(cells[todo[t]], bank, graph);
        store.put(out.record);
        if (on_record) {
            std::lock_guard lock(report);
            on_record(out.record);
        }
    });
    progress.ran = todo.size();
    return progress;
}

inline CampaignProgress run_plan(const ExperimentPlan& plan, const Dataset& ds, const SkeletonGraph& graph,
                                 ResultStore& store, std::size_t workers,
                                 const std::function<void(const RunRecord&)>& on_record = {}) {
    const SampleBank bank(ds, plan.backbone.kind);
    return run_cells(enumerate_cells(plan, ds), bank, graph, store, workers, on_record);
}

// ---------------------------------------------------------------------------
// Analysis

/// Order campaigns per (method, repeat, order family) from stored records.
struct CampaignGroup {
    std::string method;
    std::size_t repeat = 0;
    std::string arch;
    std::string dataset;
    OrderCampaignRecord task_level{UnitKind::task, {}, {}};
    OrderCampaignRecord class_level{UnitKind::klass, {}, {}};
    OrderCampaignRecord task_family_classes{UnitKind::klass, {}, {}};
    OrderCampaignRecord class_family_classes{UnitKind::klass, {}, {}};
};

inline std::vector<CampaignGroup> group_campaigns(const std::vector<RunRecord>& records) {
    std::map<std::tuple<std::string, std::string, std::string, std::size_t>, CampaignGroup> groups;
    for (const auto& r : records) {
        auto& g = groups[{r.key.dataset, r.key.arch, r.key.method, r.key.repeat}];
        g.method = r.key.method;
        g.repeat = r.key.repeat;
        g.arch = r.key.arch;
        g.dataset = r.key.dataset;
        const std::size_t b = r.matrix.tasks();
        const bool task_family = r.key.order_id.rfind("task:", 0) == 0;
        if (task_family) {
            std::map<int, double> per_task;
            for (std::size_t pos = 0; pos < b; ++pos) {
                per_task[static_cast<int>(r.task_order.at(pos))] = r.matrix.at(b, pos + 1);
            }
            g.task_level.add(r.key.order_id, std::move(per_task));
            g.task_family_classes.add(r.key.order_id, r.class_accuracies);
        } else {
            g.class_family_classes.add(r.key.order_id, r.class_accuracies);
        }
        g.class_level.add(r.key.order_id, r.class_accuracies);
    }
    std::vector<CampaignGroup> out;
    for (auto& [k, g] : groups) out.push_back(std::move(g));
    return out;
}

struct MethodSummary {
    std::vector<double> aa, af, aopd_task, mopd_task, aopd_class, mopd_class;
};

/// {dataset/arch -> {method -> {metric -> {mean, std, n}}}}; OPD entries are
/// per-repeat values over that repeat's orders.
inline nlohmann::json metric_report(const std::vector<RunRecord>& records) {
    if (records.empty()) throw StoreError("no records");
    std::map<std::string, std::map<std::string, MethodSummary>> table;
    for (const auto& r : records) {
        auto& s = table[r.key.dataset + "/" + r.key.arch][r.key.method];
        s.aa.push_back(r.final_aa);
        if (r.final_af) s.af.push_back(*r.final_af);
    }
    for (const auto& g : group_campaigns(records)) {
        auto& s = table[g.dataset + "/" + g.arch][g.method];
        if (g.task_level.orders() >= 2) {
            s.aopd_task.push_back(aopd(g.task_level));
            s.mopd_task.push_back(mopd(g.task_level));
        }
        if (g.class_level.orders() >= 2) {
            s.aopd_class.push_back(aopd(g.class_level));
            s.mopd_class.push_back(mopd(g.class_level));
        }
    }
    auto entry = [](const std::vector<double>& v) -> nlohmann::json {
        if (v.empty()) return nullptr;
        const auto ms = mean_std(v);
        return {{"mean", ms.mean}, {"std", ms.std}, {"n", v.size()}};
    };
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [group, methods] : table) {
        for (const auto& [method, s] : methods) {
            out[group][method] = {{"AA", entry(s.aa)},
                                  {"AF", entry(s.af)},
                                  {"AOPD_task", entry(s.aopd_task)},
                                  {"MOPD_task", entry(s.mopd_task)},
                                  {"AOPD_class", entry(s.aopd_class)},
                                  {"MOPD_class", entry(s.mopd_class)}};
        }
    }
    return out;
}

/// One scatter point per record (final AA, final AF).
inline std::vector<ScatterPoint> scatter_points(const std::vector<RunRecord>& records) {
    std::vector<ScatterPoint> out;
    for (const auto& r : records) {
        if (r.final_af) out.push_back({r.key.method, r.final_aa, *r.final_af});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Architecture sweep

enum class SweepAxis { width, depth };

inline const std::vector<std::size_t>& default_sweep_values(SweepAxis axis) {
    static const std::vector<std::size_t> widths{32, 64, 128, 256, 512};
    static const std::vector<std::size_t> depths{1, 2, 4, 8, 16};
    return axis == SweepAxis::width ? widths : depths;
}

/// Exactly one of `widths` / `depths` must be non-empty.
inline SweepAxis sweep_axis(const std::vector<std::size_t>& widths, const std::vector<std::size_t>& depths) {
    if (!widths.empty() && !depths.empty()) throw RunError("an architecture sweep varies exactly one axis");
    if (widths.empty() && depths.empty()) throw RunError("architecture sweep needs widths or depths");
    return widths.empty() ? SweepAxis::depth : SweepAxis::width;
}

struct SweepPoint {
    std::string method;
    std::string arch;
    std::size_t value = 0;
    MeanStd aa;
    MeanStd af;
};

/// Width sweeps keep the head at its default width and depth at default;
/// depth sweeps keep the width at default.
inline std::vector<ExperimentPlan> sweep_plans(const ExperimentPlan& base, SweepAxis axis,
                                               const std::vector<std::size_t>& values) {
    std::vector<ExperimentPlan> plans;
    const BackboneConfig defaults;
    for (auto v : values) {
        ExperimentPlan p = base;
        p.backbone.depth = defaults.depth;
        p.backbone.width = defaults.width;
        p.backbone.head_width = defaults.head_width;
        if (axis == SweepAxis::width) {
            p.backbone.width = v;
        } else {
            p.backbone.depth = v;
        }
        plans.push_back(std::move(p));
    }
    return plans;
}

inline std::vector<SweepPoint> run_architecture_sweep(const ExperimentPlan& base, SweepAxis axis,
                                                      const std::vector<std::size_t>& values, const Dataset& ds,
                                                      const SkeletonGraph& graph, ResultStore& store,
                                                      std::size_t workers) {
    std::vector<SweepPoint> points;
    for (const auto& plan : sweep_plans(base, axis, values)) {
        run_plan(plan, ds, graph, store, workers);
        const auto cells = enumerate_cells(plan, ds);
        for (const auto& m : plan.methods) {
            std::vector<double> aa, af;
            for (const auto& c : cells) {
                if (c.method.method != m.method) continue;
                const auto r = store.get(c.key());
                aa.push_back(r.final_aa);
                if (r.final_af) af.push_back(*r.final_af);
            }
            SweepPoint pt;
            pt.method = to_string(m.method);
            pt.arch = plan.backbone.arch_key();
            pt.value = axis == SweepAxis::width ? plan.backbone.width : plan.backbone.depth;
            pt.aa = mean_std(aa);
            if (!af.empty()) pt.af = mean_std(af);
            points.push_back(pt);
        }
    }
    return points;
}

// ---------------------------------------------------------------------------
// Grid search

/// Candidate hyperparameters per method.
struct HyperGrid {
    std::map<Method, std::vector<MethodConfig>> candidates;

    static HyperGrid standard() {
        HyperGrid g;
        for (double s : {1.0, 100.0, 1e4, 1e6}) {
            for (Method m : {Method::ewc, Method::mas}) {
                auto c = MethodConfig::defaults(m);
                c.memory_strength = s;
                g.candidates[m].push_back(c);
            }
        }
        for (double ll : {100.0, 1e4}) {
            for (double lt : {100.0, 1e4}) {
                for (double beta : {0.01, 0.1}) {
                    auto c = MethodConfig::defaults(Method::twp);
                    c.lambda_l = ll;
                    c.lambda_t = lt;
                    c.beta = beta;
                    g.candidates[Method::twp].push_back(c);
                }
            }
        }
        for (double ld : {0.1, 1.0, 10.0}) {
            for (double t : {0.2, 2.0, 20.0}) {
                auto c = MethodConfig::defaults(Method::lwf);
                c.lambda_dist = ld;
                c.temperature = t;
                g.candidates[Method::lwf].push_back(c);
            }
        }
        for (double s : {0.05, 0.5, 5.0}) {
            for (double f : {0.05, 0.1, 0.2}) {
                auto c = MethodConfig::defaults(Method::gem);
                c.memory_strength = s;
                c.frac_memories = f;
                g.candidates[Method::gem].push_back(c);
            }
        }
        for (double f : {0.05, 0.1, 0.2}) {
            auto c = MethodConfig::defaults(Method::replay);
            c.frac_memories = f;
            g.candidates[Method::replay].push_back(c);
        }
        g.candidates[Method::bare] = {MethodConfig::defaults(Method::bare)};
        g.candidates[Method::joint] = {MethodConfig::defaults(Method::joint)};
        return g;
    }

    [[nodiscard]] const std::vector<MethodConfig>& for_method(Method m) const& {
        static const std::vector<MethodConfig> none;
        const auto it = candidates.find(m);
        return it == candidates.end() ? none : it->second;
    }
    /// Copies out of a temporary grid instead of dangling.
    [[nodiscard]] std::vector<MethodConfig> for_method(Method m) && { return std::as_const(*this).for_method(m); }
};

struct GridCandidateResult {
    MethodConfig config;
    double val_aa = 0.0;
    double val_af = 0.0;
};

struct GridSearchResult {
    MethodConfig best;
    std::vector<GridCandidateResult> candidates;
};

/// Picks the candidate with the highest final validation AA on the canonical
/// curriculum (repeat 0); ties go to lower AF, then to the earlier candidate.
inline GridSearchResult grid_search(const std::vector<MethodConfig>& grid, const ExperimentPlan& base,
                                    const Dataset& ds, const SkeletonGraph& graph, std::size_t workers) {
    if (grid.empty()) throw RunError("empty hyperparameter grid");
    const SampleBank bank(ds, base.backbone.kind);
    const std::uint64_t split_seed = split_seed_for(base.master_seed, 0);
    const Curriculum canonical = build_canonical_tasks(ds, base.classes_per_task, split_seed);
    std::vector<GridCandidateResult> results(grid.size());
    parallel_for(grid.size(), effective_workers(workers), [&](std::size_t i) {
        RunCell cell;
        cell.method = grid[i];
        cell.label = grid[i].relevant_json().dump();
        cell.backbone = base.backbone;
        cell.trainer = base.trainer;
        cell.curriculum = canonical;
        cell.master_seed = base.master_seed;
        cell.split_seed = split_seed;
        cell.dataset = base.dataset;
        const auto out = run_curriculum(cell, bank, graph, true);
        const auto& val = *out.validation;
        const std::size_t b = val.tasks();
        results[i] = {grid[i], average_accuracy(val, b), b >= 2 ? average_forgetting(val, b) : 0.0};
    });
    std::size_t best = 0;
    for (std::size_t i = 1; i < results.size(); ++i) {
        const auto& r = results[i];
        const auto& cur = results[best];
        if (r.val_aa > cur.val_aa || (r.val_aa == cur.val_aa && r.val_af < cur.val_af)) best = i;
    }
    return {results[best].config, std::move(results)};
}

// ---------------------------------------------------------------------------
// Config file: `key = value` lines, `[section]` headers, `#` comments.
// Keys are addressed as "section.key".

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigFile {
public:
    static ConfigFile parse(const std::string& text, const std::string& origin = "<config>") {
        ConfigFile cfg;
        std::istringstream in(text);
        std::string line;
        std::string section;
        std::size_t lineno = 0;
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            const std::string where = origin + ":" + std::to_string(lineno);
            if (line.front() == '[') {
                if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
                section = trim(line.substr(1, line.size() - 2));
                if (section.empty()) throw ConfigError(where + ": empty section name");
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (key.empty()) throw ConfigError(where + ": empty key");
            const std::string full = section.empty() ? key : section + "." + key;
            if (!cfg.values_.emplace(full, value).second) throw ConfigError(where + ": duplicate key '" + full + "'");
        }
        return cfg;
    }

    static ConfigFile load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
        std::stringstream buf;
        buf << in.rdbuf();
        return parse(buf.str(), path.string());
    }

    [[nodiscard]] const std::map<std::string, std::string>& values() const noexcept { return values_; }
    [[nodiscard]] std::optional<std::string> get(const std::string& key) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return std::nullopt;
        return it->second;
    }

private:
    std::map<std::string, std::string> values_;
};

}  // namespace cglbench
