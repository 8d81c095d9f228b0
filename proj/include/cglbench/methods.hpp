#pragma once

// Continual-learning strategies behind a single per-task training contract:
// bare, joint, ewc, mas, twp, lwf, gem and replay.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cglbench/backbone.hpp"
#include "cglbench/data.hpp"
#include "cglbench/gem.hpp"
#include "cglbench/random.hpp"
#include "cglbench/tensor.hpp"
#include "json.hpp"

namespace cglbench {

class MethodError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Method { bare, joint, ewc, mas, twp, lwf, gem, replay };

inline constexpr Method kAllMethods[] = {Method::bare, Method::joint, Method::ewc, Method::mas,
                                         Method::twp,  Method::lwf,   Method::gem, Method::replay};

inline std::string to_string(Method m) {
    switch (m) {
        case Method::bare: return "bare";
        case Method::joint: return "joint";
        case Method::ewc: return "ewc";
        case Method::mas: return "mas";
        case Method::twp: return "twp";
        case Method::lwf: return "lwf";
        case Method::gem: return "gem";
        case Method::replay: return "replay";
    }
    return "unknown";
}

inline Method parse_method(const std::string& name) {
    for (Method m : kAllMethods) {
        if (to_string(m) == name) return m;
    }
    throw MethodError("unknown method '" + name + "'");
}

struct MethodConfig {
    Method method = Method::bare;
    /// EWC/MAS penalty weight; GEM dual lower bound.
    double memory_strength = 0.0;
    double lambda_l = 0.0;
    double lambda_t = 0.0;
    double beta = 0.0;
    double lambda_dist = 0.0;
    double temperature = 1.0;
    double frac_memories = 0.0;
    /// Ridge term added to the GEM dual Hessian.
    double gem_epsilon = 0.0;

    /// Best values found for GCN on the 20-joint dataset.
    static MethodConfig defaults(Method m) {
        MethodConfig c;
        c.method = m;
        switch (m) {
            case Method::ewc: c.memory_strength = 1e6; break;
            case Method::mas: c.memory_strength = 100; break;
            case Method::twp:
                c.lambda_l = 1e4;
                c.lambda_t = 1e4;
                c.beta = 0.01;
                break;
            case Method::lwf:
                c.lambda_dist = 1.0;
                c.temperature = 2.0;
                break;
            case Method::gem:
                c.memory_strength = 5.0;
                c.frac_memories = 0.2;
                break;
            case Method::replay: c.frac_memories = 0.2; break;
            case Method::joint: c.frac_memories = 1.0; break;
            case Method::bare: break;
        }
        return c;
    }

    void validate() const {
        auto nonneg = [](double v, const char* name) {
            if (!(v >= 0.0) || !std::isfinite(v)) throw MethodError(std::string(name) + " must be nonnegative");
        };
        nonneg(memory_strength, "memory_strength");
        nonneg(lambda_l, "lambda_l");
        nonneg(lambda_t, "lambda_t");
        nonneg(beta, "beta");
        nonneg(lambda_dist, "lambda_dist");
        nonneg(gem_epsilon, "gem_epsilon");
        if (method == Method::lwf && !(temperature > 0.0)) throw MethodError("temperature must be positive");
        if ((method == Method::gem || method == Method::replay) && !(frac_memories > 0.0 && frac_memories <= 1.0)) {
            throw MethodError("frac_memories must lie in (0, 1] for " + to_string(method));
        }
    }

    /// Only the fields the method consults, for keys and reports.
    [[nodiscard]] nlohmann::json relevant_json() const {
        nlohmann::json j = {{"method", to_string(method)}};
        switch (method) {
            case Method::ewc:
            case Method::mas: j["memory_strength"] = memory_strength; break;
            case Method::twp:
                j["lambda_l"] = lambda_l;
                j["lambda_t"] = lambda_t;
                j["beta"] = beta;
                break;
            case Method::lwf:
                j["lambda_dist"] = lambda_dist;
                j["T"] = temperature;
                break;
            case Method::gem:
                j["memory_strength"] = memory_strength;
                j["frac_memories"] = frac_memories;
                break;
            case Method::replay: j["frac_memories"] = frac_memories; break;
            default: break;
        }
        return j;
    }
};

enum class OptimizerKind { adam, sgd };

struct TrainerConfig {
    std::size_t epochs = 100;
    double learning_rate = 0.001;
    OptimizerKind optimizer = OptimizerKind::adam;
    /// Seeds memory sampling.
    std::uint64_t seed = 0;
};

/// Per-parameter arrays keyed by registry name.
using ParameterMap = std::map<std::string, std::vector<double>>;

struct ImportanceMap {
    std::size_t task_id = 0;
    /// Penalty weights (Fisher diagonal, Omega, or combined TWP weights).
    ParameterMap weights;
    /// Parameter snapshot at the end of the task.
    ParameterMap anchor;
    /// TWP only: the two raw importance terms behind `weights`.
    ParameterMap loss_importance;
    ParameterMap topology_importance;
};

struct MemorySlot {
    std::size_t task_id = 0;
    std::vector<std::size_t> samples;
};

struct EpisodicMemory {
    std::vector<MemorySlot> slots;

    [[nodiscard]] std::vector<std::size_t> all_samples() const {
        std::vector<std::size_t> out;
        for (const auto& s : slots) out.insert(out.end(), s.samples.begin(), s.samples.end());
        return out;
    }
    [[nodiscard]] bool empty() const noexcept { return slots.empty(); }
};

struct MethodState {
    std::vector<std::size_t> completed_tasks;
    std::vector<int> seen_classes;
    std::vector<ImportanceMap> importances;
    EpisodicMemory memory;
    std::optional<Model> old_model;
};

/// Everything a training step reads besides model and state.
struct TrainingContext {
    const SampleBank& bank;
    const SkeletonGraph& graph;
};

// ---------------------------------------------------------------------------
// Helpers over parameter lists

inline std::vector<double> flat_gradient(std::span<const Tensor> params) {
    std::vector<double> out;
    for (const auto& p : params) {
        if (p.has_grad()) {
            out.insert(out.end(), p.grad().begin(), p.grad().end());
        } else {
            out.insert(out.end(), p.numel(), 0.0);
        }
    }
    return out;
}

inline void set_flat_gradient(std::span<Tensor> params, std::span<const double> flat) {
    std::size_t offset = 0;
    for (auto& p : params) {
        auto g = p.ensure_grad();
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), g.size(), g.begin());
        offset += g.size();
    }
    if (offset != flat.size()) throw MethodError("flat gradient length mismatch");
}

inline ParameterMap snapshot(const Model& model) {
    ParameterMap out;
    for (std::size_t i = 0; i < model.names().size(); ++i) {
        out[model.names()[i]] = std::vector<double>(model.params()[i].data().begin(), model.params()[i].data().end());
    }
    return out;
}

inline ParameterMap to_parameter_map(const Model& model, const std::vector<std::vector<double>>& per_param) {
    ParameterMap out;
    for (std::size_t i = 0; i < model.names().size(); ++i) out[model.names()[i]] = per_param[i];
    return out;
}

inline std::vector<bool> class_mask(std::size_t num_classes, std::span<const int> classes) {
    std::vector<bool> mask(num_classes, false);
    for (int c : classes) mask.at(static_cast<std::size_t>(c)) = true;
    return mask;
}

// ---------------------------------------------------------------------------
// Importance estimators. Each takes the parameter list and a per-sample
// callable so it works for any differentiable model.

namespace detail {

template <typename Accumulate>
std::vector<std::vector<double>> per_sample_reduce(std::span<Tensor> params, std::size_t samples,
                                                   Accumulate&& accumulate) {
    if (samples == 0) throw MethodError("importance estimation needs at least one sample");
    std::vector<std::vector<double>> acc;
    for (const auto& p : params) acc.emplace_back(p.numel(), 0.0);
    for (std::size_t i = 0; i < samples; ++i) accumulate(i, acc);
    for (auto& a : acc) {
        for (auto& v : a) v /= static_cast<double>(samples);
    }
    for (auto& p : params) p.clear_grad();
    return acc;
}

inline void add_transformed_grads(std::span<Tensor> params, std::vector<std::vector<double>>& acc, bool square) {
    for (std::size_t p = 0; p < params.size(); ++p) {
        if (!params[p].has_grad()) continue;
        auto g = params[p].grad();
        for (std::size_t k = 0; k < g.size(); ++k) acc[p][k] += square ? g[k] * g[k] : std::abs(g[k]);
    }
}

}  // namespace detail

/// Empirical Fisher diagonal: mean over samples of (d log p(y_i|x_i) / d theta)^2.
/// `log_likelihood(tape, i)` returns the scalar log-probability of sample i's label.
template <typename LogLikelihood>
std::vector<std::vector<double>> fisher_diagonal(std::span<Tensor> params, std::size_t samples,
                                                 LogLikelihood&& log_likelihood) {
    return detail::per_sample_reduce(params, samples, [&](std::size_t i, auto& acc) {
        Tape tape;
        Tensor ll = log_likelihood(tape, i);
        tape.backward(ll);
        detail::add_transformed_grads(params, acc, true);
    });
}

/// MAS importance: mean over samples of |d ||f(x_i)||^2 / d theta|.
template <typename Outputs>
std::vector<std::vector<double>> output_sensitivity(std::span<Tensor> params, std::size_t samples, Outputs&& outputs) {
    return detail::per_sample_reduce(params, samples, [&](std::size_t i, auto& acc) {
        Tape tape;
        Tensor f = outputs(tape, i);
        tape.backward(ops::sum_all(tape, ops::mul(tape, f, f)));
        detail::add_transformed_grads(params, acc, false);
    });
}

/// Mean over samples of |d loss_i / d theta|.
template <typename Loss>
std::vector<std::vector<double>> loss_sensitivity(std::span<Tensor> params, std::size_t samples, Loss&& loss) {
    return detail::per_sample_reduce(params, samples, [&](std::size_t i, auto& acc) {
        Tape tape;
        tape.backward(loss(tape, i));
        detail::add_transformed_grads(params, acc, false);
    });
}

/// Mean over samples of sum over layers of |d ||m_l(x_i)||^2 / d theta|, where
/// `messages(tape, i)` returns the per-layer aggregated messages.
template <typename Messages>
std::vector<std::vector<double>> topology_sensitivity(std::span<Tensor> params, std::size_t samples,
                                                      Messages&& messages) {
    return detail::per_sample_reduce(params, samples, [&](std::size_t i, auto& acc) {
        Tape tape;
        std::vector<Tensor> layers = messages(tape, i);
        if (layers.empty()) throw MethodError("topology importance needs a backbone with graph layers");
        for (const auto& m : layers) {
            tape.backward(ops::sum_all(tape, ops::mul(tape, m, m)));
            detail::add_transformed_grads(params, acc, false);
        }
    });
}

/// sum over maps and parameters of coefficient * w * (theta - anchor)^2.
inline Tensor quadratic_penalty(Tape& tape, const Model& model, const std::vector<ImportanceMap>& maps,
                                double coefficient) {
    Tensor total = Tensor::scalar(0.0);
    bool any = false;
    for (const auto& map : maps) {
        for (std::size_t i = 0; i < model.names().size(); ++i) {
            const auto& name = model.names()[i];
            const auto w = map.weights.find(name);
            const auto a = map.anchor.find(name);
            if (w == map.weights.end() || a == map.anchor.end()) {
                throw MethodError("importance map lacks parameter '" + name + "'");
            }
            const Tensor& theta = model.params()[i];
            Tensor diff = ops::sub(tape, theta, Tensor::from(theta.shape(), a->second));
            Tensor term =
                ops::sum_all(tape, ops::mul(tape, ops::mul(tape, diff, diff), Tensor::from(theta.shape(), w->second)));
            total = any ? ops::add(tape, total, term) : term;
            any = true;
        }
    }
    return any ? ops::scale(tape, total, coefficient) : total;
}

// ---------------------------------------------------------------------------
// Per-method pieces working on a model

namespace detail {

inline std::vector<std::size_t> active_columns(const std::vector<bool>& mask) {
    std::vector<std::size_t> cols;
    for (std::size_t c = 0; c < mask.size(); ++c) {
        if (mask[c]) cols.push_back(c);
    }
    return cols;
}

inline void check_samples(std::span<const std::size_t> samples) {
    if (samples.empty()) throw MethodError("task data is empty");
}

}  // namespace detail

inline ImportanceMap ewc_after_task(Model& model, std::span<const std::size_t> samples, const std::vector<bool>& active,
                                    const TrainingContext& ctx) {
    detail::check_samples(samples);
    auto fisher = fisher_diagonal(model.params(), samples.size(), [&](Tape& tape, std::size_t i) {
        auto batch = ctx.bank.gather(samples.subspan(i, 1));
        Tensor logits = forward(tape, model, batch.inputs, ctx.graph).logits;
        return ops::scale(tape, cross_entropy(tape, logits, batch.labels, active), -1.0);
    });
    ImportanceMap map;
    map.weights = to_parameter_map(model, fisher);
    map.anchor = snapshot(model);
    return map;
}

inline ImportanceMap mas_after_task(Model& model, std::span<const std::size_t> samples, const std::vector<bool>& active,
                                    const TrainingContext& ctx) {
    detail::check_samples(samples);
    const auto cols = detail::active_columns(active);
    auto omega = output_sensitivity(model.params(), samples.size(), [&](Tape& tape, std::size_t i) {
        auto batch = ctx.bank.gather(samples.subspan(i, 1));
        Tensor logits = forward(tape, model, batch.inputs, ctx.graph).logits;
        return ops::index_select(tape, logits, 1, cols);
    });
    ImportanceMap map;
    map.weights = to_parameter_map(model, omega);
    map.anchor = snapshot(model);
    return map;
}

inline ImportanceMap twp_after_task(Model& model, std::span<const std::size_t> samples, const std::vector<bool>& active,
                                    double lambda_l, double lambda_t, const TrainingContext& ctx) {
    detail::check_samples(samples);
    if (model.graph_layer_count() == 0) throw MethodError("twp needs a backbone with graph layers");
    auto loss_imp = loss_sensitivity(model.params(), samples.size(), [&](Tape& tape, std::size_t i) {
        auto batch = ctx.bank.gather(samples.subspan(i, 1));
        return cross_entropy(tape, forward(tape, model, batch.inputs, ctx.graph).logits, batch.labels, active);
    });
    auto topo_imp = topology_sensitivity(model.params(), samples.size(), [&](Tape& tape, std::size_t i) {
        auto batch = ctx.bank.gather(samples.subspan(i, 1));
        return forward(tape, model, batch.inputs, ctx.graph).messages;
    });
    ImportanceMap map;
    map.loss_importance = to_parameter_map(model, loss_imp);
    map.topology_importance = to_parameter_map(model, topo_imp);
    for (std::size_t p = 0; p < loss_imp.size(); ++p) {
        std::vector<double> w(loss_imp[p].size());
        for (std::size_t k = 0; k < w.size(); ++k) w[k] = lambda_l * loss_imp[p][k] + lambda_t * topo_imp[p][k];
        map.weights[model.names()[p]] = std::move(w);
    }
    map.anchor = snapshot(model);
    return map;
}

/// Cross-entropy over `active` plus lambda_dist * T^2 * CE(softmax(old/T),
/// softmax(new/T)) over `old_classes`. `old_logits` are constants.
inline Tensor lwf_loss(Tape& tape, const Tensor& new_logits, const Tensor& old_logits, std::span<const int> labels,
                       const std::vector<bool>& active, std::span<const int> old_classes, double lambda_dist,
                       double temperature) {
    if (!(temperature > 0.0)) throw MethodError("lwf temperature must be positive");
    Tensor loss = cross_entropy(tape, new_logits, labels, active);
    if (old_classes.empty() || lambda_dist == 0.0) return loss;
    if (old_logits.shape() != new_logits.shape()) {
        throw MethodError("old and new logits differ in shape: " + to_string(old_logits.shape()) + " vs " +
                          to_string(new_logits.shape()));
    }
    std::vector<std::size_t> cols(old_classes.begin(), old_classes.end());
    const std::size_t batch = new_logits.dim(0);
    const std::size_t n = cols.size();

    // Softened old distribution, computed without recording.
    std::vector<double> target(batch * n);
    for (std::size_t r = 0; r < batch; ++r) {
        double peak = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < n; ++k) peak = std::max(peak, old_logits.data()[r * old_logits.dim(1) + cols[k]]);
        double total = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            target[r * n + k] = std::exp((old_logits.data()[r * old_logits.dim(1) + cols[k]] - peak) / temperature);
            total += target[r * n + k];
        }
        for (std::size_t k = 0; k < n; ++k) target[r * n + k] /= total;
    }
    Tensor soft_new = ops::log_softmax(tape, ops::scale(tape, ops::index_select(tape, new_logits, 1, cols), 1.0 / temperature));
    Tensor distill = ops::scale(tape, ops::sum_all(tape, ops::mul(tape, soft_new, Tensor::from({batch, n}, std::move(target)))),
                                -1.0 / static_cast<double>(batch));
    return ops::add(tape, loss, ops::scale(tape, distill, lambda_dist * temperature * temperature));
}

/// Seeded uniform sample without replacement of ceil(frac * n) entries.
inline std::vector<std::size_t> sample_memory(std::span<const std::size_t> train, double frac, std::uint64_t seed) {
    if (!(frac > 0.0 && frac <= 1.0)) throw MethodError("frac_memories must lie in (0, 1]");
    const auto keep = static_cast<std::size_t>(std::ceil(frac * static_cast<double>(train.size()) - 1e-9));
    std::vector<std::size_t> pool(train.begin(), train.end());
    Rng rng(seed);
    rng.shuffle(std::span<std::size_t>(pool));
    pool.resize(std::min(keep, pool.size()));
    return pool;
}

/// Current task's train split followed by every stored sample.
inline std::vector<std::size_t> replay_mix(std::span<const std::size_t> current, const EpisodicMemory& memory) {
    std::vector<std::size_t> out(current.begin(), current.end());
    const auto stored = memory.all_samples();
    out.insert(out.end(), stored.begin(), stored.end());
    return out;
}

/// Training set the method uses for a task, given the state before the task.
inline std::vector<std::size_t> training_set(const MethodConfig& cfg, const TaskSpec& task, const MethodState& state) {
    if (cfg.method == Method::replay || cfg.method == Method::joint) return replay_mix(task.train, state.memory);
    return task.train;
}

// ---------------------------------------------------------------------------
// Training

namespace detail {

class Optimizer {
public:
    Optimizer(const TrainerConfig& cfg) : kind_(cfg.optimizer), lr_(cfg.learning_rate), adam_(cfg.learning_rate) {}
    void step(std::span<Tensor> params) {
        if (kind_ == OptimizerKind::adam) {
            adam_.step(params);
        } else {
            sgd_step(params, lr_);
        }
    }

private:
    OptimizerKind kind_;
    double lr_;
    Adam adam_;
};

inline std::vector<double> loss_gradient(Model& model, const SampleBank::Batch& batch, const std::vector<bool>& active,
                                         const TrainingContext& ctx) {
    Tape tape;
    Tensor loss = cross_entropy(tape, forward(tape, model, batch.inputs, ctx.graph).logits, batch.labels, active);
    tape.backward(loss);
    return flat_gradient(model.params());
}

/// Gradient of beta * ||grad L(theta)||_2 via a central-difference
/// Hessian-vector product along the normalised gradient.
inline std::vector<double> gradient_norm_term(Model& model, const SampleBank::Batch& batch,
                                              const std::vector<bool>& active, std::span<const double> grad,
                                              double beta, const TrainingContext& ctx) {
    double norm = 0.0;
    for (double g : grad) norm += g * g;
    norm = std::sqrt(norm);
    std::vector<double> out(grad.size(), 0.0);
    if (norm == 0.0 || beta == 0.0) return out;
    const std::vector<double> theta = model.flat_values();
    constexpr double step = 1e-4;
    std::vector<double> shifted(theta.size());
    auto at = [&](double sign) {
        for (std::size_t i = 0; i < theta.size(); ++i) shifted[i] = theta[i] + sign * step * grad[i] / norm;
        model.set_flat_values(shifted);
        return loss_gradient(model, batch, active, ctx);
    };
    const auto plus = at(1.0);
    const auto minus = at(-1.0);
    model.set_flat_values(theta);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = beta * (plus[i] - minus[i]) / (2.0 * step);
    return out;
}

}  // namespace detail

/// Trains `model` on one task with the method's loss/gradient rule, then
/// updates `state` (importances, memory, frozen model, seen classes).
inline void train_task(Model& model, MethodState& state, const TaskSpec& task, const MethodConfig& mcfg,
                       const TrainerConfig& tcfg, const TrainingContext& ctx) {
    mcfg.validate();
    if (tcfg.epochs == 0) throw MethodError("epochs must be positive");
    for (int c : task.class_ids) {
        if (std::find(state.seen_classes.begin(), state.seen_classes.end(), c) != state.seen_classes.end()) {
            throw MethodError("class " + std::to_string(c) + " of task " + std::to_string(task.task_id) +
                              " was already learned; tasks must have disjoint classes");
        }
    }
    const std::size_t num_classes = model.config().num_classes;
    std::vector<int> old_classes = state.seen_classes;
    std::vector<int> active_classes = old_classes;
    active_classes.insert(active_classes.end(), task.class_ids.begin(), task.class_ids.end());
    std::sort(active_classes.begin(), active_classes.end());
    const std::vector<bool> active = class_mask(num_classes, active_classes);

    const auto train_indices = training_set(mcfg, task, state);
    const auto batch = ctx.bank.gather(train_indices);

    Tensor old_logits;
    const bool distill = mcfg.method == Method::lwf && state.old_model.has_value() && !old_classes.empty();
    if (distill) {
        NoGradGuard no_grad;
        Tape scratch;
        old_logits = forward(scratch, *state.old_model, batch.inputs, ctx.graph).logits;
    }

    std::vector<SampleBank::Batch> memory_batches;
    if (mcfg.method == Method::gem) {
        for (const auto& slot : state.memory.slots) memory_batches.push_back(ctx.bank.gather(slot.samples));
    }

    detail::Optimizer optimizer(tcfg);
    for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
        switch (mcfg.method) {
            case Method::bare:
            case Method::joint:
            case Method::replay:
            case Method::ewc:
            case Method::mas:
            case Method::lwf: {
                Tape tape;
                Tensor logits = forward(tape, model, batch.inputs, ctx.graph).logits;
                Tensor loss = distill ? lwf_loss(tape, logits, old_logits, batch.labels, active, old_classes,
                                                 mcfg.lambda_dist, mcfg.temperature)
                                      : cross_entropy(tape, logits, batch.labels, active);
                if ((mcfg.method == Method::ewc || mcfg.method == Method::mas) && !state.importances.empty()) {
                    const double coefficient =
                        mcfg.method == Method::ewc ? mcfg.memory_strength / 2.0 : mcfg.memory_strength;
                    loss = ops::add(tape, loss, quadratic_penalty(tape, model, state.importances, coefficient));
                }
                tape.backward(loss);
                break;
            }
            case Method::twp: {
                auto grad = detail::loss_gradient(model, batch, active, ctx);
                if (mcfg.beta > 0.0) {
                    const auto extra = detail::gradient_norm_term(model, batch, active, grad, mcfg.beta, ctx);
                    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += extra[i];
                }
                if (!state.importances.empty()) {
                    Tape tape;
                    tape.backward(quadratic_penalty(tape, model, state.importances, 1.0));
                    const auto penalty = flat_gradient(model.params());
                    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += penalty[i];
                }
                set_flat_gradient(model.params(), grad);
                break;
            }
            case Method::gem: {
                std::vector<std::vector<double>> memory_grads;
                for (const auto& mb : memory_batches) memory_grads.push_back(detail::loss_gradient(model, mb, active, ctx));
                auto grad = detail::loss_gradient(model, batch, active, ctx);
                if (!memory_grads.empty()) {
                    grad = gem_project(grad, memory_grads, mcfg.memory_strength, mcfg.gem_epsilon);
                }
                set_flat_gradient(model.params(), grad);
                break;
            }
        }
        optimizer.step(model.params());
    }

    // End-of-task bookkeeping.
    switch (mcfg.method) {
        case Method::ewc: {
            auto map = ewc_after_task(model, task.train, active, ctx);
            map.task_id = task.task_id;
            state.importances.push_back(std::move(map));
            break;
        }
        case Method::mas: {
            auto map = mas_after_task(model, task.train, active, ctx);
            map.task_id = task.task_id;
            state.importances.push_back(std::move(map));
            break;
        }
        case Method::twp: {
            auto map = twp_after_task(model, task.train, active, mcfg.lambda_l, mcfg.lambda_t, ctx);
            map.task_id = task.task_id;
            state.importances.push_back(std::move(map));
            break;
        }
        case Method::lwf: state.old_model = model.clone(); break;
        case Method::gem:
        case Method::replay:
        case Method::joint: {
            const double frac = mcfg.method == Method::joint ? 1.0 : mcfg.frac_memories;
            state.memory.slots.push_back(
                {task.task_id, sample_memory(task.train, frac, derive_seed(tcfg.seed, "memory/" + std::to_string(task.task_id)))});
            break;
        }
        case Method::bare: break;
    }
    for (auto& p : model.params()) p.clear_grad();
    state.completed_tasks.push_back(task.task_id);
    state.seen_classes = active_classes;
}

// ---------------------------------------------------------------------------
// Evaluation

enum class Split { train, val, test };

inline const std::vector<std::size_t>& split_of(const TaskSpec& task, Split split) {
    switch (split) {
        case Split::train: return task.train;
        case Split::val: return task.val;
        case Split::test: break;
    }
    return task.test;
}

struct EvaluationRow {
    /// a_{k,j} for tasks j = 0..position in presentation order.
    std::vector<double> task_accuracy;
    /// Accuracy of every seen class.
    std::map<int, double> class_accuracy;
};

/// Class-incremental evaluation after training through `position`: argmax
/// over every class seen so far, per-class accuracy on the chosen split,
/// task accuracy as the macro average over the task's classes.
inline EvaluationRow evaluate(const Model& model, const Curriculum& cur, std::size_t position,
                              const TrainingContext& ctx, Split split = Split::test) {
    if (position >= cur.tasks.size()) throw MethodError("evaluation position out of range");
    const auto seen = cur.seen_classes(position);
    std::vector<std::size_t> indices;
    for (std::size_t j = 0; j <= position; ++j) {
        const auto& s = split_of(cur.tasks[j], split);
        indices.insert(indices.end(), s.begin(), s.end());
    }
    std::map<int, std::pair<std::size_t, std::size_t>> tally;  // class -> (correct, total)
    if (!indices.empty()) {
        NoGradGuard no_grad;
        Tape tape;
        auto batch = ctx.bank.gather(indices);
        Tensor logits = forward(tape, model, batch.inputs, ctx.graph).logits;
        const std::size_t width = logits.dim(1);
        for (std::size_t r = 0; r < indices.size(); ++r) {
            int best = seen.front();
            double best_value = -std::numeric_limits<double>::infinity();
            for (int c : seen) {
                const double v = logits.data()[r * width + static_cast<std::size_t>(c)];
                if (v > best_value) {
                    best_value = v;
                    best = c;
                }
            }
            auto& entry = tally[batch.labels[r]];
            entry.second += 1;
            if (best == batch.labels[r]) entry.first += 1;
        }
    }
    EvaluationRow row;
    for (std::size_t j = 0; j <= position; ++j) {
        double total = 0.0;
        for (int c : cur.tasks[j].class_ids) {
            const auto it = tally.find(c);
            const double acc = (it == tally.end() || it->second.second == 0)
                                   ? 0.0
                                   : static_cast<double>(it->second.first) / static_cast<double>(it->second.second);
            row.class_accuracy[c] = acc;
            total += acc;
        }
        row.task_accuracy.push_back(total / static_cast<double>(cur.tasks[j].class_ids.size()));
    }
    return row;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace detail {

inline nlohmann::json to_json(const ParameterMap& map) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : map) j[k] = v;
    return j;
}

inline ParameterMap parameter_map_from_json(const nlohmann::json& j) {
    ParameterMap out;
    for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = it.value().get<std::vector<double>>();
    return out;
}

inline nlohmann::json model_to_json(const Model& model) {
    const auto& c = model.config();
    nlohmann::json params = nlohmann::json::array();
    for (std::size_t i = 0; i < model.names().size(); ++i) {
        const auto& p = model.params()[i];
        params.push_back({{"name", model.names()[i]},
                          {"shape", p.shape()},
                          {"values", std::vector<double>(p.data().begin(), p.data().end())}});
    }
    return {{"config",
             {{"kind", to_string(c.kind)},
              {"depth", c.depth},
              {"width", c.width},
              {"head_width", c.head_width},
              {"num_classes", c.num_classes},
              {"input_feature_length", c.input_feature_length},
              {"temporal_kernel", c.temporal_kernel}}},
            {"params", params}};
}

inline Model model_from_json(const nlohmann::json& j) {
    BackboneConfig c;
    const auto& jc = j.at("config");
    c.kind = parse_backbone_kind(jc.at("kind").get<std::string>());
    c.depth = jc.at("depth").get<std::size_t>();
    c.width = jc.at("width").get<std::size_t>();
    c.head_width = jc.at("head_width").get<std::size_t>();
    c.num_classes = jc.at("num_classes").get<std::size_t>();
    c.input_feature_length = jc.at("input_feature_length").get<std::size_t>();
    c.temporal_kernel = jc.at("temporal_kernel").get<std::size_t>();
    std::vector<std::string> names;
    std::vector<Tensor> params;
    for (const auto& p : j.at("params")) {
        names.push_back(p.at("name").get<std::string>());
        params.push_back(Tensor::from(p.at("shape").get<Shape>(), p.at("values").get<std::vector<double>>(), true));
    }
    return Model(c, std::move(names), std::move(params));
}

}  // namespace detail

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json state_to_json(const MethodState& state) {
    nlohmann::json imps = nlohmann::json::array();
    for (const auto& m : state.importances) {
        nlohmann::json e = {{"task_id", m.task_id},
                            {"weights", detail::to_json(m.weights)},
                            {"anchor", detail::to_json(m.anchor)}};
        if (!m.loss_importance.empty()) e["loss_importance"] = detail::to_json(m.loss_importance);
        if (!m.topology_importance.empty()) e["topology_importance"] = detail::to_json(m.topology_importance);
        imps.push_back(std::move(e));
    }
    nlohmann::json memory = nlohmann::json::array();
    for (const auto& s : state.memory.slots) memory.push_back({{"task_id", s.task_id}, {"samples", s.samples}});
    nlohmann::json j = {{"version", kCheckpointVersion},
                        {"completed_tasks", state.completed_tasks},
                        {"seen_classes", state.seen_classes},
                        {"importances", std::move(imps)},
                        {"memory", std::move(memory)}};
    if (state.old_model) j["old_model"] = detail::model_to_json(*state.old_model);
    return j;
}

inline MethodState state_from_json(const nlohmann::json& j) {
    if (j.value("version", 0) != kCheckpointVersion) throw MethodError("unsupported checkpoint version");
    MethodState state;
    state.completed_tasks = j.at("completed_tasks").get<std::vector<std::size_t>>();
    state.seen_classes = j.at("seen_classes").get<std::vector<int>>();
    for (const auto& e : j.at("importances")) {
        ImportanceMap m;
        m.task_id = e.at("task_id").get<std::size_t>();
        m.weights = detail::parameter_map_from_json(e.at("weights"));
        m.anchor = detail::parameter_map_from_json(e.at("anchor"));
        if (e.contains("loss_importance")) m.loss_importance = detail::parameter_map_from_json(e["loss_importance"]);
        if (e.contains("topology_importance")) {
            m.topology_importance = detail::parameter_map_from_json(e["topology_importance"]);
        }
        state.importances.push_back(std::move(m));
    }
    for (const auto& s : j.at("memory")) {
        state.memory.slots.push_back({s.at("task_id").get<std::size_t>(), s.at("samples").get<std::vector<std::size_t>>()});
    }
    if (j.contains("old_model")) state.old_model = detail::model_from_json(j["old_model"]);
    return state;
}

inline void save_checkpoint(const Model& model, const MethodState& state, const std::filesystem::path& path) {
    nlohmann::json j = {{"model", detail::model_to_json(model)}, {"state", state_to_json(state)}};
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw MethodError("cannot write checkpoint '" + path.string() + "'");
    out << j.dump();
}

inline std::pair<Model, MethodState> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MethodError("cannot read checkpoint '" + path.string() + "'");
    nlohmann::json j = nlohmann::json::parse(in);
    return {detail::model_from_json(j.at("model")), state_from_json(j.at("state"))};
}

}  // namespace cglbench
