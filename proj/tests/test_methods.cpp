#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "cglbench/methods.hpp"

using namespace cglbench;

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct Fixture {
    Dataset ds;
    Curriculum cur;
    SkeletonGraph graph = ucla_graph();
    std::unique_ptr<SampleBank> bank;
    BackboneConfig config;

    explicit Fixture(std::size_t per_class = 20) {
        SyntheticProfile p;
        p.shape = ucla_profile();
        p.seqs_per_class = per_class;
        ds = generate_synthetic(p, 1);
        cur = build_canonical_tasks(ds, 2, 3);
        bank = std::make_unique<SampleBank>(ds, BackboneKind::gcn);
        config.width = 16;
        config.head_width = 16;
    }
    TrainingContext ctx() const { return {*bank, graph}; }
    Model model(std::uint64_t seed = 5) const { return build_backbone(config, graph, seed); }
};

TrainerConfig quick(std::size_t epochs) {
    TrainerConfig t;
    t.epochs = epochs;
    t.seed = 11;
    return t;
}

std::set<std::size_t> as_set(const std::vector<std::size_t>& v) { return {v.begin(), v.end()}; }

}  // namespace

TEST(Config, TableDefaults) {
    EXPECT_EQ(MethodConfig::defaults(Method::ewc).memory_strength, 1e6);
    EXPECT_EQ(MethodConfig::defaults(Method::mas).memory_strength, 100);
    const auto twp = MethodConfig::defaults(Method::twp);
    EXPECT_EQ(twp.lambda_l, 1e4);
    EXPECT_EQ(twp.lambda_t, 1e4);
    EXPECT_EQ(twp.beta, 0.01);
    const auto lwf = MethodConfig::defaults(Method::lwf);
    EXPECT_EQ(lwf.lambda_dist, 1.0);
    EXPECT_EQ(lwf.temperature, 2.0);
    const auto gem = MethodConfig::defaults(Method::gem);
    EXPECT_EQ(gem.memory_strength, 5.0);
    EXPECT_EQ(gem.frac_memories, 0.2);
    EXPECT_EQ(MethodConfig::defaults(Method::replay).frac_memories, 0.2);
    TrainerConfig t;
    EXPECT_EQ(t.epochs, 100u);
    EXPECT_EQ(t.learning_rate, 0.001);
}

TEST(Config, ValidationAndParsing) {
    EXPECT_THROW((void)parse_method("icarl"), MethodError);
    for (Method m : kAllMethods) EXPECT_EQ(parse_method(to_string(m)), m);
    auto replay = MethodConfig::defaults(Method::replay);
    replay.frac_memories = 0.0;
    EXPECT_THROW(replay.validate(), MethodError);
    auto gem = MethodConfig::defaults(Method::gem);
    gem.frac_memories = 0.0;
    EXPECT_THROW(gem.validate(), MethodError);
}

TEST(Importance, LogisticFisherClosedForm) {
    for (double w0 : {-1.3, 0.2, 0.9}) {
        for (int y : {0, 1}) {
            const double x = 1.7;
            auto w = Tensor::from({1, 1}, {w0}, true);
            std::vector<Tensor> params{w};
            const auto fisher = fisher_diagonal(params, 1, [&](Tape& tape, std::size_t) {
                // Logits [0, w x]: p(y = 1) = sigmoid(w x).
                auto z = ops::matmul(tape, Tensor::from({1, 1}, {x}), w);
                auto logits = ops::concat(tape, {Tensor::zeros({1, 1}), z}, 1);
                const std::vector<int> label{y};
                return ops::scale(tape, cross_entropy(tape, logits, label, {true, true}), -1.0);
            });
            const double expected = std::pow(sigmoid(w0 * x) - y, 2) * x * x;
            EXPECT_NEAR(fisher[0][0], expected, 1e-10);
        }
    }
}

TEST(Importance, FisherMeanInvariantUnderDuplication) {
    const std::vector<double> xs{0.5, -1.0, 2.0};
    auto run = [&](std::size_t copies) {
        auto w = Tensor::from({1, 1}, {0.3}, true);
        std::vector<Tensor> params{w};
        return fisher_diagonal(params, xs.size() * copies, [&](Tape& tape, std::size_t i) {
            auto z = ops::matmul(tape, Tensor::from({1, 1}, {xs[i % xs.size()]}), w);
            auto logits = ops::concat(tape, {Tensor::zeros({1, 1}), z}, 1);
            const std::vector<int> label{static_cast<int>((i % xs.size()) % 2)};
            return ops::scale(tape, cross_entropy(tape, logits, label, {true, true}), -1.0);
        })[0][0];
    };
    EXPECT_NEAR(run(1), run(2), 1e-15);
}

TEST(Importance, MasLinearClosedForm) {
    auto w = Tensor::from({1, 1}, {3.0}, true);
    std::vector<Tensor> params{w};
    const auto omega = output_sensitivity(params, 1, [&](Tape& tape, std::size_t) {
        return ops::matmul(tape, Tensor::from({1, 1}, {2.0}), w);
    });
    EXPECT_NEAR(omega[0][0], 24.0, 1e-10);
    auto zero = Tensor::from({1, 1}, {0.0}, true);
    std::vector<Tensor> zp{zero};
    const auto none = output_sensitivity(zp, 1, [&](Tape& tape, std::size_t) {
        return ops::matmul(tape, Tensor::from({1, 1}, {2.0}), zero);
    });
    EXPECT_EQ(none[0][0], 0.0);
}

TEST(Importance, MapsCoverRegistryAndAreNonnegative) {
    Fixture f;
    auto m = f.model();
    const auto& task = f.cur.tasks[0];
    const auto active = class_mask(10, task.class_ids);
    for (const auto& map : {ewc_after_task(m, task.train, active, f.ctx()), mas_after_task(m, task.train, active, f.ctx()),
                            twp_after_task(m, task.train, active, 1.0, 1.0, f.ctx())}) {
        ASSERT_EQ(map.weights.size(), m.names().size());
        for (std::size_t i = 0; i < m.names().size(); ++i) {
            const auto& w = map.weights.at(m.names()[i]);
            ASSERT_EQ(w.size(), m.params()[i].numel());
            for (double v : w) {
                EXPECT_TRUE(std::isfinite(v));
                EXPECT_GE(v, 0.0);
            }
        }
    }
    EXPECT_THROW((void)ewc_after_task(m, {}, active, f.ctx()), MethodError);
    EXPECT_THROW((void)mas_after_task(m, {}, active, f.ctx()), MethodError);
}

TEST(Importance, TwpWithoutTopologyWeightIsLossSensitivity) {
    Fixture f;
    auto m = f.model();
    const auto& task = f.cur.tasks[0];
    const auto active = class_mask(10, task.class_ids);
    const auto map = twp_after_task(m, task.train, active, 7.0, 0.0, f.ctx());
    for (const auto& [name, w] : map.weights) {
        const auto& loss = map.loss_importance.at(name);
        for (std::size_t i = 0; i < w.size(); ++i) EXPECT_EQ(w[i], 7.0 * loss[i]);
    }
}

TEST(Importance, TwpNeedsGraphLayers) {
    Fixture f;
    BackboneConfig c = f.config;
    c.depth = 0;
    Model flat(c, {}, {});
    EXPECT_THROW((void)twp_after_task(flat, f.cur.tasks[0].train, class_mask(10, std::vector<int>{0, 1}), 1, 1, f.ctx()),
                 MethodError);
}

TEST(Penalty, ZeroAtAnchor) {
    Fixture f;
    auto m = f.model();
    const auto& task = f.cur.tasks[0];
    const auto map = mas_after_task(m, task.train, class_mask(10, task.class_ids), f.ctx());
    Tape tape;
    EXPECT_EQ(quadratic_penalty(tape, m, {map}, 1e6).item(), 0.0);
    m.params()[0].data()[0] += 0.1;
    Tape tape2;
    EXPECT_GT(quadratic_penalty(tape2, m, {map}, 1.0).item(), 0.0);
}

TEST(Lwf, IdenticalModelsGiveZeroDistillationGradient) {
    auto logits = Tensor::from({2, 4}, {0.3, -1.0, 2.0, 0.5, 1.0, 0.2, -0.4, 0.0}, true);
    const auto old = logits.detach();
    const std::vector<int> labels{2, 3};
    const std::vector<bool> active{true, true, true, true};
    const std::vector<int> old_classes{0, 1};
    Tape t1;
    t1.backward(lwf_loss(t1, logits, old, labels, active, old_classes, 1.0, 2.0));
    const std::vector<double> with(logits.grad().begin(), logits.grad().end());
    Tape t2;
    t2.backward(cross_entropy(t2, logits, labels, active));
    for (std::size_t i = 0; i < with.size(); ++i) EXPECT_NEAR(with[i], logits.grad()[i], 1e-14);

    // Value of the term equals T^2 times the entropy of the softened old distribution.
    Tape t3;
    const double total = lwf_loss(t3, logits, old, labels, active, old_classes, 1.0, 2.0).item();
    const double ce = cross_entropy(t3, logits, labels, active).item();
    double entropy = 0.0;
    for (std::size_t r = 0; r < 2; ++r) {
        const double a = old.data()[r * 4] / 2.0, b = old.data()[r * 4 + 1] / 2.0;
        const double pa = std::exp(a) / (std::exp(a) + std::exp(b));
        entropy += -(pa * std::log(pa) + (1 - pa) * std::log(1 - pa));
    }
    EXPECT_NEAR(total - ce, 4.0 * entropy / 2.0, 1e-12);
}

TEST(Lwf, ZeroWeightIsPlainCrossEntropy) {
    auto logits = Tensor::from({1, 3}, {0.1, 0.7, -0.2});
    const auto old = Tensor::from({1, 3}, {2.0, -1.0, 0.0});
    const std::vector<int> labels{2};
    const std::vector<int> old_classes{0, 1};
    Tape t;
    EXPECT_EQ(lwf_loss(t, logits, old, labels, {true, true, true}, old_classes, 0.0, 2.0).item(),
              cross_entropy(t, logits, labels, {true, true, true}).item());
}

TEST(Lwf, LargeTemperatureLimit) {
    auto logits = Tensor::from({2, 3}, {0.5, -0.5, 0.1, 1.5, 0.2, -0.3});
    const auto old = Tensor::from({2, 3}, {1.0, -2.0, 0.3, -0.7, 0.9, 0.0});
    const std::vector<int> labels{2, 2};
    const std::vector<int> old_classes{0, 1};
    const std::vector<bool> active{true, true, true};
    for (double t : {1e3, 1e4}) {
        Tape tape;
        const double total = lwf_loss(tape, logits, old, labels, active, old_classes, 1.0, t).item();
        const double ce = cross_entropy(tape, logits, labels, active).item();
        EXPECT_NEAR((total - ce) / (t * t), std::log(2.0), 10.0 / t);
    }
}

TEST(Lwf, NonPositiveTemperatureRejected) {
    Tape t;
    const std::vector<int> labels{0};
    const std::vector<int> old_classes{1};
    EXPECT_THROW((void)lwf_loss(t, Tensor::zeros({1, 2}), Tensor::zeros({1, 2}), labels, {true, true}, old_classes,
                                1.0, 0.0),
                 MethodError);
}

TEST(Memory, CeilingSizeSeededAndFromTrainSplit) {
    std::vector<std::size_t> train(240);
    std::iota(train.begin(), train.end(), 1000);
    const auto a = sample_memory(train, 0.2, 9);
    EXPECT_EQ(a.size(), 48u);
    EXPECT_EQ(a, sample_memory(train, 0.2, 9));
    EXPECT_EQ(as_set(a).size(), 48u);
    for (auto i : a) EXPECT_TRUE(i >= 1000 && i < 1240);
    EXPECT_EQ(sample_memory(train, 0.01, 9).size(), 3u);
    EXPECT_THROW((void)sample_memory(train, 0.0, 1), MethodError);
    EXPECT_THROW((void)sample_memory(train, 1.5, 1), MethodError);
}

TEST(Training, BareLearnsFirstTask) {
    Fixture f(60);
    f.config.width = 64;
    f.config.head_width = 64;
    auto m = f.model();
    MethodState state;
    train_task(m, state, f.cur.tasks[0], MethodConfig::defaults(Method::bare), quick(100), f.ctx());
    EXPECT_GT(evaluate(m, f.cur, 0, f.ctx()).task_accuracy[0], 0.9);
    EXPECT_EQ(state.completed_tasks.size(), 1u);
}

TEST(Training, StateTracksCompletedTasksAndRejectsRepeats) {
    Fixture f;
    auto m = f.model();
    MethodState state;
    for (std::size_t k = 0; k < 3; ++k) {
        train_task(m, state, f.cur.tasks[k], MethodConfig::defaults(Method::replay), quick(2), f.ctx());
        EXPECT_EQ(state.completed_tasks.size(), k + 1);
        EXPECT_EQ(state.memory.slots.size(), k + 1);
        EXPECT_EQ(state.memory.slots.back().samples.size(),
                  static_cast<std::size_t>(std::ceil(0.2 * static_cast<double>(f.cur.tasks[k].train.size()))));
    }
    EXPECT_THROW(train_task(m, state, f.cur.tasks[1], MethodConfig::defaults(Method::bare), quick(1), f.ctx()),
                 MethodError);
}

TEST(Training, JointUsesUnionAndEqualsFullReplay) {
    Fixture f;
    auto mj = f.model();
    auto mr = f.model();
    MethodState joint, replay;
    auto full = MethodConfig::defaults(Method::replay);
    full.frac_memories = 1.0;
    const auto jcfg = MethodConfig::defaults(Method::joint);
    std::set<std::size_t> union_train;
    for (std::size_t k = 0; k < 5; ++k) {
        const auto& task = f.cur.tasks[k];
        union_train.insert(task.train.begin(), task.train.end());
        EXPECT_EQ(as_set(training_set(jcfg, task, joint)), as_set(training_set(full, task, replay)));
        if (k == 4) EXPECT_EQ(as_set(training_set(jcfg, task, joint)), union_train);
        train_task(mj, joint, task, jcfg, quick(1), f.ctx());
        train_task(mr, replay, task, full, quick(1), f.ctx());
    }
}

TEST(Training, FirstTaskMatchesBare) {
    Fixture f;
    const auto& task = f.cur.tasks[0];
    auto reference = f.model();
    MethodState s0;
    train_task(reference, s0, task, MethodConfig::defaults(Method::bare), quick(5), f.ctx());
    for (Method method : kAllMethods) {
        auto cfg = MethodConfig::defaults(method);
        if (method == Method::twp) cfg.beta = 0.0;
        auto m = f.model();
        MethodState s;
        train_task(m, s, task, cfg, quick(5), f.ctx());
        EXPECT_EQ(m.flat_values(), reference.flat_values()) << to_string(method);
    }
    auto twp = MethodConfig::defaults(Method::twp);
    auto m = f.model();
    MethodState s;
    train_task(m, s, task, twp, quick(5), f.ctx());
    EXPECT_NE(m.flat_values(), reference.flat_values());
}

TEST(Training, NoFutureTaskDataIsRead) {
    Fixture f;
    std::vector<std::set<std::size_t>> task_samples;
    for (const auto& t : f.cur.tasks) {
        std::set<std::size_t> s;
        for (const auto* split : {&t.train, &t.val, &t.test}) s.insert(split->begin(), split->end());
        task_samples.push_back(std::move(s));
    }
    std::size_t current = 0;
    std::size_t violations = 0;
    f.bank->set_audit([&](std::span<const std::size_t> idx) {
        for (auto i : idx) {
            for (std::size_t later = current + 1; later < task_samples.size(); ++later) {
                violations += task_samples[later].count(i);
            }
        }
    });
    for (Method method : kAllMethods) {
        auto m = f.model();
        MethodState state;
        for (current = 0; current < f.cur.tasks.size(); ++current) {
            train_task(m, state, f.cur.tasks[current], MethodConfig::defaults(method), quick(2), f.ctx());
            (void)evaluate(m, f.cur, current, f.ctx());
        }
        EXPECT_EQ(violations, 0u) << to_string(method);
    }
}

TEST(Training, DeterministicGivenSeeds) {
    Fixture f;
    for (Method method : {Method::gem, Method::twp, Method::lwf}) {
        std::vector<double> first;
        for (int run = 0; run < 2; ++run) {
            auto m = f.model();
            MethodState state;
            for (std::size_t k = 0; k < 2; ++k) {
                train_task(m, state, f.cur.tasks[k], MethodConfig::defaults(method), quick(3), f.ctx());
            }
            if (run == 0) {
                first = m.flat_values();
            } else {
                EXPECT_EQ(m.flat_values(), first) << to_string(method);
            }
        }
    }
}

TEST(Training, TwpGradientNormTermMatchesFiniteDifferences) {
    Fixture f;
    auto m = f.model();
    const auto& task = f.cur.tasks[0];
    const auto active = class_mask(10, task.class_ids);
    const auto batch = f.bank->gather(task.train);
    auto grad_norm = [&] {
        const auto g = detail::loss_gradient(m, batch, active, f.ctx());
        double s = 0.0;
        for (double v : g) s += v * v;
        return std::sqrt(s);
    };
    const auto g = detail::loss_gradient(m, batch, active, f.ctx());
    const auto term = detail::gradient_norm_term(m, batch, active, g, 1.0, f.ctx());
    auto theta = m.flat_values();
    // Probe the head parameters, where the loss is smooth.
    const std::size_t n = theta.size();
    std::size_t checked = 0;
    for (std::size_t i = n - 30; i < n; i += 3) {
        const double orig = theta[i];
        const double h = 1e-5;
        theta[i] = orig + h;
        m.set_flat_values(theta);
        const double up = grad_norm();
        theta[i] = orig - h;
        m.set_flat_values(theta);
        const double down = grad_norm();
        theta[i] = orig;
        m.set_flat_values(theta);
        const double fd = (up - down) / (2 * h);
        EXPECT_NEAR(term[i], fd, 1e-4 * std::max(1.0, std::abs(fd)));
        ++checked;
    }
    EXPECT_EQ(checked, 10u);
    const auto zero = detail::gradient_norm_term(m, batch, active, g, 0.0, f.ctx());
    for (double v : zero) EXPECT_EQ(v, 0.0);
}

TEST(Evaluate, FixedPredictorAndSeenClassRestriction) {
    Fixture f;
    auto m = f.model();
    for (auto& p : m.params()) {
        for (auto& v : p.data()) v = 0.0;
    }
    auto bias = m.params().back().data();
    bias[1] = 1.0;  // seen after task 0
    bias[9] = 5.0;  // unseen until the last task
    const auto row0 = evaluate(m, f.cur, 0, f.ctx());
    EXPECT_EQ(row0.class_accuracy.at(1), 1.0);
    EXPECT_EQ(row0.class_accuracy.at(0), 0.0);
    EXPECT_EQ(row0.task_accuracy[0], 0.5);
    const auto row4 = evaluate(m, f.cur, 4, f.ctx());
    EXPECT_EQ(row4.class_accuracy.at(9), 1.0);
    EXPECT_EQ(row4.class_accuracy.at(1), 0.0);
    EXPECT_EQ(row4.task_accuracy, (std::vector<double>{0, 0, 0, 0, 0.5}));
}

TEST(Checkpoint, RoundTrip) {
    Fixture f;
    auto m = f.model();
    MethodState state;
    train_task(m, state, f.cur.tasks[0], MethodConfig::defaults(Method::twp), quick(1), f.ctx());
    MethodState lwf_state;
    train_task(m, lwf_state, f.cur.tasks[1], MethodConfig::defaults(Method::lwf), quick(1), f.ctx());
    state.old_model = lwf_state.old_model;
    state.memory.slots.push_back({0, {1, 2, 3}});
    const auto path = std::filesystem::temp_directory_path() / "cglbench_checkpoint.json";
    save_checkpoint(m, state, path);
    auto [m2, s2] = load_checkpoint(path);
    EXPECT_EQ(m2.flat_values(), m.flat_values());
    EXPECT_EQ(m2.names(), m.names());
    EXPECT_EQ(state_to_json(s2), state_to_json(state));
    ASSERT_TRUE(s2.old_model.has_value());
    EXPECT_EQ(s2.old_model->flat_values(), state.old_model->flat_values());
}
