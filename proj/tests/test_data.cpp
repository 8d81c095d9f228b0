#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numeric>

#include "cglbench/data.hpp"

using namespace cglbench;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "cglbench_test_data";
    fs::create_directories(dir);
    return dir / name;
}

Dataset small_dataset(std::uint64_t seed = 1, std::size_t per_class = 20) {
    SyntheticProfile p;
    p.shape = ucla_profile();
    p.seqs_per_class = per_class;
    return generate_synthetic(p, seed);
}

}  // namespace

TEST(Preprocess, RowIsFrameOrderedConcatenation) {
    SkeletonSequence s;
    s.coords = {1, 2, 3, 4, 5, 6};
    auto m = preprocess_gcn(s, {1, 2, 1});
    EXPECT_EQ(m.shape(), (Shape{1, 6}));
    EXPECT_EQ(std::vector<double>(m.data().begin(), m.data().end()), (std::vector<double>{1, 2, 3, 4, 5, 6}));
}

TEST(Preprocess, TwoJointsInterleaved) {
    SkeletonSequence s;
    // frame 0: j0 (1,2,3) j1 (7,8,9); frame 1: j0 (4,5,6) j1 (10,11,12)
    s.coords = {1, 2, 3, 7, 8, 9, 4, 5, 6, 10, 11, 12};
    auto m = preprocess_gcn(s, {2, 2, 1});
    EXPECT_EQ(std::vector<double>(m.data().begin(), m.data().end()),
              (std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}));
}

TEST(Preprocess, ZeroSequenceAndUclaShape) {
    SkeletonSequence s;
    s.coords.assign(52 * 20 * 3, 0.0);
    auto m = preprocess_gcn(s, ucla_profile());
    EXPECT_EQ(m.shape(), (Shape{20, 156}));
    for (double v : m.data()) EXPECT_EQ(v, 0.0);
}

TEST(Synthetic, CountAndDeterminism) {
    auto a = small_dataset(3, 60);
    EXPECT_EQ(a.size(), 600u);
    EXPECT_EQ(a.content_hash(), small_dataset(3, 60).content_hash());
    EXPECT_NE(a.content_hash(), small_dataset(4, 60).content_hash());
    a.validate();
}

TEST(Container, BinaryRoundTrip) {
    auto ds = small_dataset();
    const auto path = temp_path("round.cglskel");
    save_dataset(ds, path);
    auto back = load_dataset(path, ucla_profile());
    ASSERT_EQ(back.size(), ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        EXPECT_EQ(back.sequences[i].label, ds.sequences[i].label);
        EXPECT_EQ(back.sequences[i].coords, ds.sequences[i].coords);
    }
    EXPECT_EQ(back.content_hash(), ds.content_hash());
}

TEST(Container, JsonlRoundTrip) {
    auto ds = small_dataset(2, 12);
    const auto path = temp_path("round.jsonl");
    save_dataset(ds, path);
    auto back = load_dataset(path, ucla_profile());
    EXPECT_EQ(back.content_hash(), ds.content_hash());
}

TEST(Container, TruncatedFileNamesByteOffset) {
    auto ds = small_dataset(1, 12);
    const auto path = temp_path("trunc.cglskel");
    save_dataset(ds, path);
    const auto full = fs::file_size(path);
    fs::resize_file(path, full - 10);
    try {
        (void)load_dataset(path, ucla_profile());
        FAIL() << "expected an error";
    } catch (const DataError& e) {
        ASSERT_TRUE(e.byte_offset().has_value());
        EXPECT_NE(std::string(e.what()).find("byte"), std::string::npos) << e.what();
        EXPECT_TRUE(e.record().has_value());
    }
}

TEST(Container, BadMagicIsMalformedHeader) {
    const auto path = temp_path("bad.cglskel");
    std::ofstream(path, std::ios::binary) << "NOTMAGIC and then some";
    EXPECT_THROW((void)load_dataset(path), DataError);
}

TEST(Container, WrongJointCountForProfile) {
    Dataset ds;
    ds.profile = {24, 300, 10};
    SkeletonSequence s;
    s.coords.assign(24 * 300 * 3, 0.0);
    ds.sequences.push_back(s);
    const auto path = temp_path("ntu24.cglskel");
    save_dataset(ds, path);
    try {
        (void)load_dataset(path, ntu_profile());
        FAIL() << "expected an error";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("joint"), std::string::npos) << e.what();
    }
}

TEST(Container, UnknownClassIdNamesRecord) {
    auto ds = small_dataset(1, 12);
    ds.profile.num_classes = 12;
    ds.sequences[5].label = 11;
    const auto path = temp_path("label.cglskel");
    save_dataset(ds, path);
    // Rewrite the header's class count (offset 16) to 10.
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(16);
        const char ten[2] = {10, 0};
        f.write(ten, 2);
    }
    try {
        (void)load_dataset(path);
        FAIL() << "expected an error";
    } catch (const DataError& e) {
        ASSERT_TRUE(e.record().has_value());
        EXPECT_EQ(*e.record(), 5u);
        EXPECT_NE(std::string(e.what()).find("class id"), std::string::npos) << e.what();
    }
}

TEST(Tasks, CanonicalGrouping) {
    auto ds = small_dataset();
    auto cur = build_canonical_tasks(ds, 2, 7);
    ASSERT_EQ(cur.tasks.size(), 5u);
    for (std::size_t t = 0; t < 5; ++t) {
        EXPECT_EQ(cur.tasks[t].class_ids, (std::vector<int>{static_cast<int>(2 * t), static_cast<int>(2 * t + 1)}));
    }
    EXPECT_EQ(cur.order_kind, OrderKind::canonical);
}

TEST(Tasks, ShuffledOrderFirstTask) {
    auto ds = small_dataset();
    const std::vector<int> order{0, 5, 1, 6, 2, 7, 3, 8, 4, 9};
    auto cur = build_tasks(ds, order, 2, 7);
    EXPECT_EQ(cur.tasks[0].class_ids, (std::vector<int>{0, 5}));
    EXPECT_EQ(cur.order_kind, OrderKind::class_shuffle);
}

TEST(Tasks, InvalidOrdersRejected) {
    auto ds = small_dataset();
    const std::vector<int> dup{0, 0, 1, 2, 3, 4, 5, 6, 7, 8};
    EXPECT_THROW((void)build_tasks(ds, dup, 2, 1), DataError);
    const std::vector<int> missing{0, 1, 2, 3, 4, 5, 6, 7, 8};
    EXPECT_THROW((void)build_tasks(ds, missing, 2, 1), DataError);
    std::vector<int> ok(10);
    std::iota(ok.begin(), ok.end(), 0);
    EXPECT_THROW((void)build_tasks(ds, ok, 3, 1), DataError);
}

TEST(Tasks, SplitsStratifiedDisjointExhaustive) {
    auto ds = small_dataset(5, 60);
    for (std::uint64_t seed : {1, 2, 3}) {
        auto cur = build_canonical_tasks(ds, 2, seed);
        cur.check_disjoint();
        std::set<std::size_t> all;
        for (const auto& t : cur.tasks) {
            for (int c : t.class_ids) {
                std::size_t tr = 0, va = 0, te = 0;
                for (auto i : t.train) tr += ds.sequences[i].label == c;
                for (auto i : t.val) va += ds.sequences[i].label == c;
                for (auto i : t.test) te += ds.sequences[i].label == c;
                const double n = static_cast<double>(tr + va + te);
                EXPECT_LE(std::abs(static_cast<double>(tr) - 0.8 * n), 1.0);
                EXPECT_LE(std::abs(static_cast<double>(va) - 0.1 * n), 1.0);
                EXPECT_LE(std::abs(static_cast<double>(te) - 0.1 * n), 1.0);
            }
            for (const auto* s : {&t.train, &t.val, &t.test}) all.insert(s->begin(), s->end());
        }
        EXPECT_EQ(all.size(), ds.size());
    }
}

TEST(Tasks, DeterministicUnderSplitSeed) {
    auto ds = small_dataset();
    EXPECT_EQ(build_canonical_tasks(ds, 2, 9).tasks, build_canonical_tasks(ds, 2, 9).tasks);
    EXPECT_NE(build_canonical_tasks(ds, 2, 9).tasks, build_canonical_tasks(ds, 2, 10).tasks);
}

TEST(Permutations, IdentityAndReversal) {
    auto ds = small_dataset();
    auto cur = build_canonical_tasks(ds, 2, 1);
    const std::vector<std::size_t> id{0, 1, 2, 3, 4};
    EXPECT_EQ(permute_task_order(cur, id).tasks, cur.tasks);
    const std::vector<std::size_t> rev{4, 3, 2, 1, 0};
    EXPECT_EQ(permute_task_order(cur, rev).task_order(), rev);
    const std::vector<std::size_t> bad{0, 0, 1, 2, 3};
    EXPECT_THROW((void)permute_task_order(cur, bad), DataError);
}

TEST(Permutations, AllOneHundredTwentyDistinct) {
    const auto perms = all_permutations(5);
    EXPECT_EQ(perms.size(), 120u);
    EXPECT_EQ(std::set<std::vector<std::size_t>>(perms.begin(), perms.end()).size(), 120u);
}

TEST(Permutations, InverseRestoresCanonical) {
    auto ds = small_dataset();
    auto cur = build_canonical_tasks(ds, 2, 1);
    for (const auto& p : sample_permutations(5, 10, 3)) {
        auto back = permute_task_order(permute_task_order(cur, p), inverse_permutation(p));
        EXPECT_EQ(back.tasks, cur.tasks);
        EXPECT_EQ(back.order_kind, OrderKind::canonical);
    }
}

TEST(Permutations, TaskOrderToClassOrder) {
    const std::vector<std::size_t> id{0, 1, 2, 3, 4};
    std::vector<int> classes(10);
    std::iota(classes.begin(), classes.end(), 0);
    EXPECT_EQ(task_order_to_class_order(id, 2), classes);
    const std::vector<std::size_t> swapped{1, 0, 2, 3, 4};
    const auto co = task_order_to_class_order(swapped, 2);
    EXPECT_EQ(std::vector<int>(co.begin(), co.begin() + 4), (std::vector<int>{2, 3, 0, 1}));
}

TEST(Permutations, ClassOrderRoundTrip) {
    auto ds = small_dataset();
    auto cur = build_canonical_tasks(ds, 2, 4);
    for (const auto& p : sample_permutations(5, 8, 11)) {
        auto permuted = permute_task_order(cur, p);
        auto rebuilt = build_tasks(ds, task_order_to_class_order(p, 2), 2, 4);
        ASSERT_EQ(rebuilt.tasks.size(), permuted.tasks.size());
        for (std::size_t i = 0; i < rebuilt.tasks.size(); ++i) {
            EXPECT_EQ(rebuilt.tasks[i].class_ids, permuted.tasks[i].class_ids);
            EXPECT_EQ(rebuilt.tasks[i].train, permuted.tasks[i].train);
        }
    }
}

TEST(Permutations, SampledOrdersSeededAndDistinct) {
    EXPECT_EQ(sample_permutations(5, 10, 1), sample_permutations(5, 10, 1));
    const auto orders = sample_class_orders(10, 2, 100, 5);
    EXPECT_EQ(orders.size(), 100u);
    EXPECT_EQ(orders, sample_class_orders(10, 2, 100, 5));
    auto ds = small_dataset();
    std::set<std::vector<std::vector<int>>> curricula;
    for (const auto& o : orders) {
        auto cur = build_tasks(ds, o, 2, 1);
        cur.check_disjoint();
        std::vector<std::vector<int>> sets;
        for (auto t : cur.tasks) {
            std::sort(t.class_ids.begin(), t.class_ids.end());
            sets.push_back(t.class_ids);
        }
        curricula.insert(sets);
    }
    EXPECT_EQ(curricula.size(), 100u);
    EXPECT_THROW((void)sample_permutations(3, 7, 1), DataError);
}

TEST(SampleBank, GatherShapesAndAudit) {
    auto ds = small_dataset(1, 12);
    SampleBank bank(ds, BackboneKind::gcn);
    std::vector<std::size_t> seen;
    bank.set_audit([&](std::span<const std::size_t> idx) { seen.insert(seen.end(), idx.begin(), idx.end()); });
    const std::vector<std::size_t> idx{3, 0};
    auto b = bank.gather(idx);
    EXPECT_EQ(b.inputs.shape(), (Shape{2, 20, 156}));
    EXPECT_EQ(b.labels[0], ds.sequences[3].label);
    EXPECT_EQ(seen, idx);
    SampleBank seq(ds, BackboneKind::stgcn_lite);
    EXPECT_EQ(seq.gather(idx).inputs.shape(), (Shape{2, 52, 20, 3}));
}
