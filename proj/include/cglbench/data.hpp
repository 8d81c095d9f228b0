#pragma once

// Skeleton datasets, class-incremental curricula and task/class orders.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cglbench/backbone.hpp"
#include "cglbench/random.hpp"
#include "cglbench/tensor.hpp"
#include "json.hpp"

namespace cglbench {

class DataError : public std::runtime_error {
public:
    DataError(const std::string& message, std::optional<std::size_t> record = std::nullopt,
              std::optional<std::size_t> byte_offset = std::nullopt)
        : std::runtime_error(decorate(message, record, byte_offset)), record_(record), byte_offset_(byte_offset) {}

    [[nodiscard]] std::optional<std::size_t> record() const noexcept { return record_; }
    [[nodiscard]] std::optional<std::size_t> byte_offset() const noexcept { return byte_offset_; }

private:
    static std::string decorate(const std::string& message, std::optional<std::size_t> record,
                                std::optional<std::size_t> byte_offset) {
        std::string out = message;
        if (record) out += " (record " + std::to_string(*record) + ")";
        if (byte_offset) out += " (byte offset " + std::to_string(*byte_offset) + ")";
        return out;
    }

    std::optional<std::size_t> record_;
    std::optional<std::size_t> byte_offset_;
};

struct DatasetProfile {
    std::size_t joints = 20;
    std::size_t frames = 52;
    std::size_t num_classes = 10;

    bool operator==(const DatasetProfile&) const = default;
};

inline DatasetProfile ucla_profile() { return {20, 52, 10}; }
inline DatasetProfile ntu_profile() { return {25, 300, 10}; }

struct SkeletonSequence {
    /// frames x joints x 3, row-major.
    std::vector<double> coords;
    int label = 0;
    std::string source_id;

    bool operator==(const SkeletonSequence&) const = default;
};

struct Dataset {
    std::string name = "dataset";
    DatasetProfile profile;
    std::vector<SkeletonSequence> sequences;

    [[nodiscard]] std::size_t size() const noexcept { return sequences.size(); }

    void validate() const {
        const std::size_t expected = profile.frames * profile.joints * 3;
        for (std::size_t i = 0; i < sequences.size(); ++i) {
            const auto& s = sequences[i];
            if (s.coords.size() != expected) {
                throw DataError("sequence has " + std::to_string(s.coords.size()) + " coordinates, profile needs " +
                                    std::to_string(expected),
                                i);
            }
            if (s.label < 0 || static_cast<std::size_t>(s.label) >= profile.num_classes) {
                throw DataError("unknown class id " + std::to_string(s.label), i);
            }
            if (!std::all_of(s.coords.begin(), s.coords.end(), [](double v) { return std::isfinite(v); })) {
                throw DataError("non-finite coordinate", i);
            }
        }
    }

    /// Content hash over labels and coordinates.
    [[nodiscard]] std::uint64_t content_hash() const {
        std::uint64_t h = fnv1a(std::to_string(profile.joints) + "/" + std::to_string(profile.frames) + "/" +
                                std::to_string(profile.num_classes));
        for (const auto& s : sequences) {
            h = fnv1a(std::string_view(reinterpret_cast<const char*>(&s.label), sizeof(s.label)), h);
            h = fnv1a(std::string_view(reinterpret_cast<const char*>(s.coords.data()), s.coords.size() * sizeof(double)),
                      h);
        }
        return h;
    }
};

/// Per-joint node features: row j is (x, y, z) of joint j for frame 1, then
/// frame 2, and so on. Shape [joints, 3 * frames].
inline Tensor preprocess_gcn(const SkeletonSequence& seq, const DatasetProfile& profile) {
    const std::size_t frames = profile.frames, joints = profile.joints;
    if (seq.coords.size() != frames * joints * 3) throw DataError("sequence does not match profile");
    std::vector<double> out(joints * frames * 3);
    for (std::size_t t = 0; t < frames; ++t) {
        for (std::size_t j = 0; j < joints; ++j) {
            for (std::size_t c = 0; c < 3; ++c) {
                out[j * frames * 3 + t * 3 + c] = seq.coords[(t * joints + j) * 3 + c];
            }
        }
    }
    return Tensor::from({joints, frames * 3}, std::move(out));
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticProfile {
    DatasetProfile shape;
    std::size_t seqs_per_class = 60;
    double noise_sigma = 0.05;
};

/// Each class moves its own group of neighbouring joints along a fixed
/// direction with its own frequency, amplitude and phase. Every sample adds
/// a random whole-body sway, per-sample amplitude/phase jitter and Gaussian
/// noise. Values are rounded to float so binary round trips are exact.
inline Dataset generate_synthetic(const SyntheticProfile& profile, std::uint64_t seed) {
    const auto& shape = profile.shape;
    if (shape.joints == 0 || shape.frames == 0 || shape.num_classes == 0 || profile.seqs_per_class == 0) {
        throw DataError("synthetic profile sizes must be positive");
    }
    Rng rng(seed);
    const SkeletonGraph graph = graph_for_joints(shape.joints);
    std::vector<std::vector<std::size_t>> neighbours(shape.joints);
    for (auto [u, v] : graph.edges) {
        neighbours[u].push_back(v);
        neighbours[v].push_back(u);
    }

    std::vector<double> rest(shape.joints * 3);
    for (auto& v : rest) v = rng.uniform(-0.5, 0.5);

    struct Signature {
        std::vector<std::size_t> group;
        double frequency, amplitude, phase;
        double direction[3];
    };
    const std::size_t group_size = std::min<std::size_t>(4, shape.joints);
    std::vector<Signature> signatures(shape.num_classes);
    for (std::size_t c = 0; c < shape.num_classes; ++c) {
        auto& sig = signatures[c];
        // breadth-first growth from a random root joint
        std::vector<std::size_t> frontier{static_cast<std::size_t>(rng.below(shape.joints))};
        std::set<std::size_t> chosen(frontier.begin(), frontier.end());
        while (chosen.size() < group_size && !frontier.empty()) {
            std::vector<std::size_t> next;
            for (auto j : frontier) {
                for (auto n : neighbours[j]) {
                    if (chosen.size() < group_size && chosen.insert(n).second) next.push_back(n);
                }
            }
            frontier = std::move(next);
        }
        sig.group.assign(chosen.begin(), chosen.end());
        sig.frequency = 0.5 + 0.5 * static_cast<double>(c) + rng.uniform(0.0, 0.25);
        sig.amplitude = rng.uniform(0.3, 0.6);
        sig.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        double norm = 0.0;
        for (double& d : sig.direction) {
            d = rng.normal();
            norm += d * d;
        }
        for (double& d : sig.direction) d /= std::sqrt(norm);
    }

    Dataset ds;
    ds.name = "synthetic";
    ds.profile = shape;
    const double frames = static_cast<double>(shape.frames);
    for (std::size_t c = 0; c < shape.num_classes; ++c) {
        const auto& sig = signatures[c];
        for (std::size_t s = 0; s < profile.seqs_per_class; ++s) {
            SkeletonSequence seq;
            seq.label = static_cast<int>(c);
            seq.source_id = "synthetic-c" + std::to_string(c) + "-s" + std::to_string(s);
            seq.coords.resize(shape.frames * shape.joints * 3);
            const double gain = rng.uniform(0.8, 1.2);
            const double jitter = rng.uniform(-0.3, 0.3);
            const double sway_freq = rng.uniform(0.25, 1.0);
            const double sway_amp = rng.uniform(0.0, 0.1);
            const double sway_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
            for (std::size_t t = 0; t < shape.frames; ++t) {
                const double time = static_cast<double>(t) / frames;
                const double sway = sway_amp * std::sin(2.0 * std::numbers::pi * sway_freq * time + sway_phase);
                const double motion =
                    gain * sig.amplitude * std::sin(2.0 * std::numbers::pi * sig.frequency * time + sig.phase + jitter);
                for (std::size_t j = 0; j < shape.joints; ++j) {
                    for (std::size_t k = 0; k < 3; ++k) {
                        seq.coords[(t * shape.joints + j) * 3 + k] = rest[j * 3 + k] + sway;
                    }
                }
                for (auto j : sig.group) {
                    for (std::size_t k = 0; k < 3; ++k) seq.coords[(t * shape.joints + j) * 3 + k] += motion * sig.direction[k];
                }
            }
            for (auto& v : seq.coords) v = static_cast<double>(static_cast<float>(v + profile.noise_sigma * rng.normal()));
            ds.sequences.push_back(std::move(seq));
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Container files

inline constexpr char kSkeletonMagic[8] = {'C', 'G', 'L', 'S', 'K', 'E', 'L', '1'};

namespace detail {

template <typename T>
void put_le(std::vector<unsigned char>& out, T value) {
    using U = std::make_unsigned_t<T>;
    auto bits = static_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        out.push_back(static_cast<unsigned char>(bits & 0xFF));
        bits = static_cast<U>(bits >> 8);
    }
}

class ByteReader {
public:
    explicit ByteReader(std::vector<unsigned char> bytes) : bytes_(std::move(bytes)) {}

    template <typename T>
    T get(std::optional<std::size_t> record) {
        require(sizeof(T), record);
        std::make_unsigned_t<T> v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            v |= static_cast<std::make_unsigned_t<T>>(static_cast<std::make_unsigned_t<T>>(bytes_[pos_ + i]) << (8 * i));
        }
        pos_ += sizeof(T);
        return static_cast<T>(v);
    }

    float get_f32(std::optional<std::size_t> record) { return std::bit_cast<float>(get<std::uint32_t>(record)); }

    void require(std::size_t n, std::optional<std::size_t> record) const {
        if (pos_ + n > bytes_.size()) {
            throw DataError("truncated file: need " + std::to_string(n) + " bytes, " +
                                std::to_string(bytes_.size() - pos_) + " left",
                            record, pos_);
        }
    }

    [[nodiscard]] std::size_t position() const noexcept { return pos_; }
    [[nodiscard]] std::size_t size() const noexcept { return bytes_.size(); }
    [[nodiscard]] const unsigned char* at(std::size_t offset) const { return bytes_.data() + offset; }
    void skip(std::size_t n) { pos_ += n; }

private:
    std::vector<unsigned char> bytes_;
    std::size_t pos_ = 0;
};

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open dataset file '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void check_profile(const DatasetProfile& found, const std::optional<DatasetProfile>& expected,
                          std::optional<std::size_t> record) {
    if (!expected) return;
    if (found.joints != expected->joints || found.frames != expected->frames) {
        throw DataError("shape mismatch: got " + std::to_string(found.frames) + " frames x " +
                            std::to_string(found.joints) + " joints, profile expects " +
                            std::to_string(expected->frames) + " x " + std::to_string(expected->joints),
                        record);
    }
    if (found.num_classes > expected->num_classes) {
        throw DataError("file declares " + std::to_string(found.num_classes) + " classes, profile has " +
                            std::to_string(expected->num_classes),
                        record);
    }
}

}  // namespace detail

/// Little-endian container: magic, u32 count, u16 joints, u16 frames,
/// u16 classes, then per record u16 label and f32 coordinates.
inline void save_dataset_binary(const Dataset& ds, const std::filesystem::path& path) {
    ds.validate();
    std::vector<unsigned char> out(std::begin(kSkeletonMagic), std::end(kSkeletonMagic));
    detail::put_le(out, static_cast<std::uint32_t>(ds.size()));
    detail::put_le(out, static_cast<std::uint16_t>(ds.profile.joints));
    detail::put_le(out, static_cast<std::uint16_t>(ds.profile.frames));
    detail::put_le(out, static_cast<std::uint16_t>(ds.profile.num_classes));
    for (const auto& s : ds.sequences) {
        detail::put_le(out, static_cast<std::uint16_t>(s.label));
        for (double v : s.coords) detail::put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) throw DataError("cannot write dataset file '" + path.string() + "'");
    file.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

/// One JSON object per line: {"label": int, "coords": [[[x,y,z] per joint] per frame]}.
inline void save_dataset_jsonl(const Dataset& ds, const std::filesystem::path& path) {
    ds.validate();
    std::ofstream file(path, std::ios::trunc);
    if (!file) throw DataError("cannot write dataset file '" + path.string() + "'");
    for (const auto& s : ds.sequences) {
        nlohmann::json frames = nlohmann::json::array();
        for (std::size_t t = 0; t < ds.profile.frames; ++t) {
            nlohmann::json joints = nlohmann::json::array();
            for (std::size_t j = 0; j < ds.profile.joints; ++j) {
                const std::size_t base = (t * ds.profile.joints + j) * 3;
                joints.push_back({s.coords[base], s.coords[base + 1], s.coords[base + 2]});
            }
            frames.push_back(std::move(joints));
        }
        nlohmann::json line = {{"label", s.label}, {"coords", std::move(frames)}};
        if (!s.source_id.empty()) line["source_id"] = s.source_id;
        file << line.dump() << '\n';
    }
}

inline Dataset load_dataset_binary(const std::filesystem::path& path, std::optional<DatasetProfile> expected) {
    detail::ByteReader in(detail::read_bytes(path));
    in.require(sizeof(kSkeletonMagic), std::nullopt);
    if (std::memcmp(in.at(0), kSkeletonMagic, sizeof(kSkeletonMagic)) != 0) {
        throw DataError("malformed header: bad magic", std::nullopt, 0);
    }
    in.skip(sizeof(kSkeletonMagic));
    const auto count = in.get<std::uint32_t>(std::nullopt);
    DatasetProfile profile;
    profile.joints = in.get<std::uint16_t>(std::nullopt);
    profile.frames = in.get<std::uint16_t>(std::nullopt);
    profile.num_classes = in.get<std::uint16_t>(std::nullopt);
    if (profile.joints == 0 || profile.frames == 0 || profile.num_classes == 0) {
        throw DataError("malformed header: zero-sized dimension", std::nullopt, 8);
    }
    detail::check_profile(profile, expected, std::nullopt);
    if (expected) profile.num_classes = expected->num_classes;

    Dataset ds;
    ds.name = path.stem().string();
    ds.profile = profile;
    const std::size_t values = profile.frames * profile.joints * 3;
    ds.sequences.reserve(count);
    for (std::size_t r = 0; r < count; ++r) {
        SkeletonSequence seq;
        const std::size_t record_start = in.position();
        seq.label = in.get<std::uint16_t>(r);
        if (static_cast<std::size_t>(seq.label) >= profile.num_classes) {
            throw DataError("unknown class id " + std::to_string(seq.label), r, record_start);
        }
        in.require(values * 4, r);
        seq.coords.resize(values);
        for (auto& v : seq.coords) {
            v = static_cast<double>(in.get_f32(r));
            if (!std::isfinite(v)) throw DataError("non-finite coordinate", r, in.position() - 4);
        }
        seq.source_id = ds.name + "#" + std::to_string(r);
        ds.sequences.push_back(std::move(seq));
    }
    if (in.position() != in.size()) {
        throw DataError("trailing bytes after last record", std::nullopt, in.position());
    }
    return ds;
}

inline Dataset load_dataset_jsonl(const std::filesystem::path& path, std::optional<DatasetProfile> expected) {
    std::ifstream file(path);
    if (!file) throw DataError("cannot open dataset file '" + path.string() + "'");
    Dataset ds;
    ds.name = path.stem().string();
    std::optional<DatasetProfile> found;
    std::string line;
    std::size_t record = 0;
    int max_label = -1;
    while (std::getline(file, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError(std::string("malformed JSON: ") + e.what(), record);
        }
        if (!j.contains("label") || !j.contains("coords") || !j["coords"].is_array()) {
            throw DataError("record needs 'label' and 'coords'", record);
        }
        const auto& frames = j["coords"];
        DatasetProfile shape;
        shape.frames = frames.size();
        shape.joints = frames.empty() ? 0 : frames[0].size();
        shape.num_classes = expected ? expected->num_classes : 0;
        if (shape.frames == 0 || shape.joints == 0) throw DataError("empty coordinate array", record);
        detail::check_profile(shape, expected, record);
        if (found && (found->frames != shape.frames || found->joints != shape.joints)) {
            throw DataError("shape mismatch with earlier records", record);
        }
        found = shape;
        SkeletonSequence seq;
        seq.label = j["label"].get<int>();
        if (seq.label < 0 || (expected && static_cast<std::size_t>(seq.label) >= expected->num_classes)) {
            throw DataError("unknown class id " + std::to_string(seq.label), record);
        }
        max_label = std::max(max_label, seq.label);
        seq.coords.reserve(shape.frames * shape.joints * 3);
        for (const auto& frame : frames) {
            if (frame.size() != shape.joints) throw DataError("ragged joint array", record);
            for (const auto& joint : frame) {
                if (!joint.is_array() || joint.size() != 3) throw DataError("joint must have 3 coordinates", record);
                for (const auto& v : joint) seq.coords.push_back(v.get<double>());
            }
        }
        seq.source_id = j.value("source_id", ds.name + "#" + std::to_string(record));
        ds.sequences.push_back(std::move(seq));
        ++record;
    }
    if (!found) throw DataError("dataset file '" + path.string() + "' has no records");
    ds.profile = *found;
    ds.profile.num_classes = expected ? expected->num_classes : static_cast<std::size_t>(max_label + 1);
    ds.validate();
    return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
    if (path.extension() == ".jsonl") {
        save_dataset_jsonl(ds, path);
    } else {
        save_dataset_binary(ds, path);
    }
}

/// Format is chosen by the leading magic bytes.
inline Dataset load_dataset(const std::filesystem::path& path, std::optional<DatasetProfile> expected = std::nullopt) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw DataError("cannot open dataset file '" + path.string() + "'");
    char head[sizeof(kSkeletonMagic)] = {};
    probe.read(head, sizeof(head));
    const bool binary = probe.gcount() == sizeof(head) && std::memcmp(head, kSkeletonMagic, sizeof(head)) == 0;
    probe.close();
    // Anything not named .jsonl goes to the binary loader, which reports header problems with offsets.
    if (binary || path.extension() != ".jsonl") return load_dataset_binary(path, expected);
    return load_dataset_jsonl(path, expected);
}

// ---------------------------------------------------------------------------
// Tasks and orders

struct TaskSpec {
    /// Position of the task in the curriculum it was built for.
    std::size_t task_id = 0;
    std::vector<int> class_ids;
    std::vector<std::size_t> train, val, test;

    bool operator==(const TaskSpec&) const = default;
};

enum class OrderKind { canonical, task_permutation, class_shuffle };

inline std::string join_ints(const auto& values, char sep = '-') {
    std::string out;
    for (const auto& v : values) {
        if (!out.empty()) out += sep;
        out += std::to_string(v);
    }
    return out;
}

struct Curriculum {
    std::vector<TaskSpec> tasks;
    OrderKind order_kind = OrderKind::canonical;
    std::size_t num_classes = 0;

    /// Classes in presentation order.
    [[nodiscard]] std::vector<int> class_order() const {
        std::vector<int> out;
        for (const auto& t : tasks) out.insert(out.end(), t.class_ids.begin(), t.class_ids.end());
        return out;
    }

    [[nodiscard]] std::vector<std::size_t> task_order() const {
        std::vector<std::size_t> out;
        for (const auto& t : tasks) out.push_back(t.task_id);
        return out;
    }

    /// "task:<task ids>" for canonical/task-permuted curricula, "class:<classes>" otherwise.
    [[nodiscard]] std::string order_id() const {
        if (order_kind == OrderKind::class_shuffle) return "class:" + join_ints(class_order());
        return "task:" + join_ints(task_order());
    }

    /// C_seen after the task at `position` (0-based, inclusive).
    [[nodiscard]] std::vector<int> seen_classes(std::size_t position) const {
        std::vector<int> out;
        for (std::size_t p = 0; p <= position && p < tasks.size(); ++p) {
            out.insert(out.end(), tasks[p].class_ids.begin(), tasks[p].class_ids.end());
        }
        std::sort(out.begin(), out.end());
        return out;
    }

    /// Throws unless the task class sets are pairwise disjoint and splits are disjoint.
    void check_disjoint() const {
        std::set<int> classes;
        std::set<std::size_t> samples;
        for (const auto& t : tasks) {
            for (int c : t.class_ids) {
                if (!classes.insert(c).second) {
                    throw DataError("class " + std::to_string(c) + " appears in more than one task");
                }
            }
            for (const auto* split : {&t.train, &t.val, &t.test}) {
                for (auto i : *split) {
                    if (!samples.insert(i).second) {
                        throw DataError("sample " + std::to_string(i) + " appears in more than one split");
                    }
                }
            }
        }
    }
};

/// Stratified 8:1:1 split of one class; depends only on (split_seed, class).
inline void split_class(std::vector<std::size_t> members, int class_id, std::uint64_t split_seed, TaskSpec& task) {
    const std::size_t n = members.size();
    const auto n_train = static_cast<std::size_t>(std::lround(0.8 * static_cast<double>(n)));
    const auto n_val = static_cast<std::size_t>(std::lround(0.1 * static_cast<double>(n)));
    if (n_train == 0 || n_val == 0 || n_train + n_val >= n) {
        throw DataError("class " + std::to_string(class_id) + " has too few sequences (" + std::to_string(n) +
                        ") for an 8:1:1 split");
    }
    Rng rng(derive_seed(split_seed, "split/" + std::to_string(class_id)));
    rng.shuffle(std::span<std::size_t>(members));
    task.train.insert(task.train.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_train));
    task.val.insert(task.val.end(), members.begin() + static_cast<std::ptrdiff_t>(n_train),
                    members.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    task.test.insert(task.test.end(), members.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), members.end());
}

inline void check_class_order(std::span<const int> class_order, std::size_t num_classes) {
    if (class_order.size() != num_classes) {
        throw DataError("class order has " + std::to_string(class_order.size()) + " entries, dataset has " +
                        std::to_string(num_classes) + " classes");
    }
    std::vector<bool> present(num_classes, false);
    for (int c : class_order) {
        if (c < 0 || static_cast<std::size_t>(c) >= num_classes) {
            throw DataError("class order contains unknown class " + std::to_string(c));
        }
        if (present[static_cast<std::size_t>(c)]) {
            throw DataError("class order repeats class " + std::to_string(c));
        }
        present[static_cast<std::size_t>(c)] = true;
    }
}

/// Task i gets classes class_order[i*cpt .. (i+1)*cpt).
inline Curriculum build_tasks(const Dataset& ds, std::span<const int> class_order, std::size_t classes_per_task,
                              std::uint64_t split_seed) {
    const std::size_t num_classes = ds.profile.num_classes;
    if (classes_per_task == 0 || num_classes % classes_per_task != 0) {
        throw DataError(std::to_string(num_classes) + " classes cannot be grouped " + std::to_string(classes_per_task) +
                        " per task");
    }
    check_class_order(class_order, num_classes);
    std::vector<std::vector<std::size_t>> members(num_classes);
    for (std::size_t i = 0; i < ds.size(); ++i) members[static_cast<std::size_t>(ds.sequences[i].label)].push_back(i);

    Curriculum cur;
    cur.num_classes = num_classes;
    bool identity = true;
    for (std::size_t i = 0; i < class_order.size(); ++i) identity = identity && class_order[i] == static_cast<int>(i);
    cur.order_kind = identity ? OrderKind::canonical : OrderKind::class_shuffle;
    for (std::size_t t = 0; t < num_classes / classes_per_task; ++t) {
        TaskSpec task;
        task.task_id = t;
        for (std::size_t k = 0; k < classes_per_task; ++k) {
            const int c = class_order[t * classes_per_task + k];
            task.class_ids.push_back(c);
            split_class(members[static_cast<std::size_t>(c)], c, split_seed, task);
        }
        cur.tasks.push_back(std::move(task));
    }
    cur.check_disjoint();
    return cur;
}

inline Curriculum build_canonical_tasks(const Dataset& ds, std::size_t classes_per_task, std::uint64_t split_seed) {
    std::vector<int> order(ds.profile.num_classes);
    std::iota(order.begin(), order.end(), 0);
    return build_tasks(ds, order, classes_per_task, split_seed);
}

inline void check_permutation(std::span<const std::size_t> perm, std::size_t n) {
    if (perm.size() != n) {
        throw DataError("permutation has " + std::to_string(perm.size()) + " entries, expected " + std::to_string(n));
    }
    std::vector<bool> seen(n, false);
    for (auto p : perm) {
        if (p >= n || seen[p]) throw DataError("invalid permutation " + join_ints(perm));
        seen[p] = true;
    }
}

/// Presents the tasks in the order perm[0], perm[1], ... (task ids index the
/// curriculum's current tasks).
inline Curriculum permute_task_order(const Curriculum& cur, std::span<const std::size_t> perm) {
    check_permutation(perm, cur.tasks.size());
    Curriculum out;
    out.num_classes = cur.num_classes;
    bool identity = true;
    for (std::size_t i = 0; i < perm.size(); ++i) {
        out.tasks.push_back(cur.tasks[perm[i]]);
        identity = identity && perm[i] == i;
    }
    out.order_kind = identity ? cur.order_kind
                              : (cur.order_kind == OrderKind::class_shuffle ? OrderKind::class_shuffle
                                                                            : OrderKind::task_permutation);
    if (identity) return out;
    // Back at canonical presentation after e.g. applying an inverse.
    bool canonical = true;
    for (std::size_t i = 0; i < out.tasks.size(); ++i) canonical = canonical && out.tasks[i].task_id == i;
    if (canonical && cur.order_kind != OrderKind::class_shuffle) out.order_kind = OrderKind::canonical;
    return out;
}

/// Class order equivalent to presenting canonical tasks in `task_order`.
inline std::vector<int> task_order_to_class_order(std::span<const std::size_t> task_order,
                                                  const std::vector<std::vector<int>>& task_classes) {
    check_permutation(task_order, task_classes.size());
    std::vector<int> out;
    for (auto t : task_order) out.insert(out.end(), task_classes[t].begin(), task_classes[t].end());
    return out;
}

/// Same, for the canonical assignment task t -> classes [t*cpt, (t+1)*cpt).
inline std::vector<int> task_order_to_class_order(std::span<const std::size_t> task_order,
                                                  std::size_t classes_per_task) {
    std::vector<std::vector<int>> task_classes(task_order.size());
    for (std::size_t t = 0; t < task_order.size(); ++t) {
        for (std::size_t k = 0; k < classes_per_task; ++k) {
            task_classes[t].push_back(static_cast<int>(t * classes_per_task + k));
        }
    }
    return task_order_to_class_order(task_order, task_classes);
}

inline std::vector<std::size_t> inverse_permutation(std::span<const std::size_t> perm) {
    check_permutation(perm, perm.size());
    std::vector<std::size_t> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
    return inv;
}

/// All n! permutations in lexicographic order.
inline std::vector<std::vector<std::size_t>> all_permutations(std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    std::vector<std::vector<std::size_t>> out;
    do {
        out.push_back(p);
    } while (std::next_permutation(p.begin(), p.end()));
    return out;
}

inline std::uint64_t factorial(std::size_t n) {
    std::uint64_t f = 1;
    for (std::size_t i = 2; i <= n; ++i) f *= i;
    return f;
}

/// `count` distinct uniformly sampled permutations of n items.
inline std::vector<std::vector<std::size_t>> sample_permutations(std::size_t n, std::size_t count, std::uint64_t seed) {
    if (n <= 20 && count > factorial(n)) {
        throw DataError("cannot sample " + std::to_string(count) + " distinct permutations of " + std::to_string(n));
    }
    Rng rng(seed);
    std::set<std::vector<std::size_t>> seen;
    std::vector<std::vector<std::size_t>> out;
    while (out.size() < count) {
        std::vector<std::size_t> p(n);
        std::iota(p.begin(), p.end(), 0);
        rng.shuffle(std::span<std::size_t>(p));
        if (seen.insert(p).second) out.push_back(std::move(p));
    }
    return out;
}

/// `count` class orders giving pairwise distinct curricula (task sequences of
/// class sets).
inline std::vector<std::vector<int>> sample_class_orders(std::size_t num_classes, std::size_t classes_per_task,
                                                         std::size_t count, std::uint64_t seed) {
    if (classes_per_task == 0 || num_classes % classes_per_task != 0) {
        throw DataError("classes cannot be grouped evenly into tasks");
    }
    Rng rng(seed);
    std::set<std::vector<int>> seen;
    std::vector<std::vector<int>> out;
    std::size_t attempts = 0;
    while (out.size() < count) {
        if (++attempts > 1000 * (count + 1)) throw DataError("too few distinct class orders available");
        std::vector<int> order(num_classes);
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(std::span<int>(order));
        std::vector<int> canonical = order;
        for (std::size_t t = 0; t < num_classes; t += classes_per_task) {
            std::sort(canonical.begin() + static_cast<std::ptrdiff_t>(t),
                      canonical.begin() + static_cast<std::ptrdiff_t>(t + classes_per_task));
        }
        if (seen.insert(canonical).second) out.push_back(std::move(order));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batched access

/// Precomputed model inputs for every sequence of a dataset. All reads go
/// through gather(), which reports the requested indices to an optional
/// audit hook.
class SampleBank {
public:
    using AuditHook = std::function<void(std::span<const std::size_t>)>;

    SampleBank(const Dataset& ds, BackboneKind kind) : profile_(ds.profile), kind_(kind) {
        labels_.reserve(ds.size());
        for (const auto& s : ds.sequences) labels_.push_back(s.label);
        if (kind == BackboneKind::gcn) {
            sample_shape_ = {ds.profile.joints, ds.profile.frames * 3};
            for (const auto& s : ds.sequences) {
                Tensor f = preprocess_gcn(s, ds.profile);
                features_.insert(features_.end(), f.data().begin(), f.data().end());
            }
        } else {
            sample_shape_ = {ds.profile.frames, ds.profile.joints, 3};
            for (const auto& s : ds.sequences) features_.insert(features_.end(), s.coords.begin(), s.coords.end());
        }
        stride_ = element_count(sample_shape_);
    }

    void set_audit(AuditHook hook) { audit_ = std::move(hook); }

    [[nodiscard]] std::size_t size() const noexcept { return labels_.size(); }
    [[nodiscard]] BackboneKind kind() const noexcept { return kind_; }
    [[nodiscard]] const DatasetProfile& profile() const noexcept { return profile_; }
    [[nodiscard]] std::size_t feature_length() const noexcept {
        return kind_ == BackboneKind::gcn ? profile_.frames * 3 : 3;
    }

    struct Batch {
        Tensor inputs;
        std::vector<int> labels;
    };

    [[nodiscard]] Batch gather(std::span<const std::size_t> indices) const {
        if (indices.empty()) throw DataError("empty batch");
        if (audit_) audit_(indices);
        Shape shape{indices.size()};
        shape.insert(shape.end(), sample_shape_.begin(), sample_shape_.end());
        std::vector<double> values(indices.size() * stride_);
        Batch batch;
        batch.labels.reserve(indices.size());
        for (std::size_t i = 0; i < indices.size(); ++i) {
            if (indices[i] >= labels_.size()) throw DataError("sample index out of range", indices[i]);
            std::copy_n(features_.begin() + static_cast<std::ptrdiff_t>(indices[i] * stride_), stride_,
                        values.begin() + static_cast<std::ptrdiff_t>(i * stride_));
            batch.labels.push_back(labels_[indices[i]]);
        }
        batch.inputs = Tensor::from(std::move(shape), std::move(values));
        return batch;
    }

private:
    DatasetProfile profile_;
    BackboneKind kind_;
    Shape sample_shape_;
    std::size_t stride_ = 0;
    std::vector<double> features_;
    std::vector<int> labels_;
    AuditHook audit_;
};

}  // namespace cglbench
