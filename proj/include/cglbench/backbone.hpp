#pragma once

// Skeleton graphs and the two graph classifiers: a GCN over per-joint
// feature vectors with sum||max readout, and a reduced spatio-temporal
// variant (spatial graph convolution per frame followed by a depthwise
// temporal convolution).

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cglbench/random.hpp"
#include "cglbench/tensor.hpp"

namespace cglbench {

class ModelError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct SkeletonGraph {
    std::size_t num_joints = 0;
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    /// D^-1/2 (A + I) D^-1/2, shape [joints, joints].
    Tensor normalized_adjacency;
};

inline SkeletonGraph make_graph(std::size_t num_joints, std::vector<std::pair<std::size_t, std::size_t>> edges) {
    if (num_joints == 0) throw ModelError("skeleton graph needs at least one joint");
    std::vector<double> adj(num_joints * num_joints, 0.0);
    for (const auto& [u, v] : edges) {
        if (u >= num_joints || v >= num_joints) {
            throw ModelError("bone (" + std::to_string(u) + ", " + std::to_string(v) + ") outside [0, " +
                             std::to_string(num_joints) + ")");
        }
        if (u == v) continue;
        adj[u * num_joints + v] = 1.0;
        adj[v * num_joints + u] = 1.0;
    }
    for (std::size_t i = 0; i < num_joints; ++i) adj[i * num_joints + i] = 1.0;
    std::vector<double> inv_sqrt_degree(num_joints, 0.0);
    for (std::size_t i = 0; i < num_joints; ++i) {
        double degree = 0.0;
        for (std::size_t j = 0; j < num_joints; ++j) degree += adj[i * num_joints + j];
        inv_sqrt_degree[i] = 1.0 / std::sqrt(degree);
    }
    for (std::size_t i = 0; i < num_joints; ++i) {
        for (std::size_t j = 0; j < num_joints; ++j) adj[i * num_joints + j] *= inv_sqrt_degree[i] * inv_sqrt_degree[j];
    }
    SkeletonGraph graph;
    graph.num_joints = num_joints;
    graph.edges = std::move(edges);
    graph.normalized_adjacency = Tensor::from({num_joints, num_joints}, std::move(adj));
    return graph;
}

namespace detail {
inline std::vector<std::pair<std::size_t, std::size_t>> one_based(
    std::initializer_list<std::pair<std::size_t, std::size_t>> bones) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (auto [u, v] : bones) out.emplace_back(u - 1, v - 1);
    return out;
}
}  // namespace detail

/// 20-joint Kinect v1 skeleton (N-UCLA layout).
inline SkeletonGraph ucla_graph() {
    return make_graph(20, detail::one_based({{1, 2},   {2, 3},   {4, 3},   {5, 3},   {6, 5},   {7, 6},   {8, 7},
                                             {9, 3},   {10, 9},  {11, 10}, {12, 11}, {13, 1},  {14, 13}, {15, 14},
                                             {16, 15}, {17, 1},  {18, 17}, {19, 18}, {20, 19}}));
}

/// 25-joint Kinect v2 skeleton (NTU RGB+D layout).
inline SkeletonGraph ntu_graph() {
    return make_graph(25, detail::one_based({{1, 2},   {2, 21},  {3, 21},  {4, 3},   {5, 21},  {6, 5},   {7, 6},
                                             {8, 7},   {9, 21},  {10, 9},  {11, 10}, {12, 11}, {13, 1},  {14, 13},
                                             {15, 14}, {16, 15}, {17, 1},  {18, 17}, {19, 18}, {20, 19}, {22, 23},
                                             {23, 8},  {24, 25}, {25, 12}}));
}

inline SkeletonGraph chain_graph(std::size_t num_joints) {
    std::vector<std::pair<std::size_t, std::size_t>> bones;
    for (std::size_t j = 1; j < num_joints; ++j) bones.emplace_back(j - 1, j);
    return make_graph(num_joints, std::move(bones));
}

/// Known skeleton for 20 or 25 joints, a chain otherwise.
inline SkeletonGraph graph_for_joints(std::size_t num_joints) {
    if (num_joints == 20) return ucla_graph();
    if (num_joints == 25) return ntu_graph();
    return chain_graph(num_joints);
}

enum class BackboneKind { gcn, stgcn_lite };

inline std::string to_string(BackboneKind kind) { return kind == BackboneKind::gcn ? "gcn" : "stgcn-lite"; }

inline BackboneKind parse_backbone_kind(const std::string& text) {
    if (text == "gcn") return BackboneKind::gcn;
    if (text == "stgcn-lite" || text == "stgcn") return BackboneKind::stgcn_lite;
    throw ModelError("unknown backbone '" + text + "'");
}

struct BackboneConfig {
    BackboneKind kind = BackboneKind::gcn;
    std::size_t depth = 2;
    std::size_t width = 64;
    /// Hidden width of the MLP head; width sweeps leave it alone.
    std::size_t head_width = 64;
    std::size_t num_classes = 10;
    /// Per-node feature length: 3 * frames for gcn, 3 for stgcn-lite.
    std::size_t input_feature_length = 156;
    std::size_t temporal_kernel = 9;

    void validate() const {
        if (depth == 0) throw ModelError("backbone depth must be at least 1");
        if (width == 0 || head_width == 0) throw ModelError("backbone width must be at least 1");
        if (num_classes == 0) throw ModelError("num_classes must be at least 1");
        if (input_feature_length == 0) throw ModelError("input feature length must be at least 1");
        if (kind == BackboneKind::stgcn_lite && temporal_kernel % 2 == 0) {
            throw ModelError("temporal kernel size must be odd");
        }
    }

    /// Stable identifier used in result keys.
    [[nodiscard]] std::string arch_key() const {
        std::string key = to_string(kind) + "-d" + std::to_string(depth) + "-w" + std::to_string(width);
        if (head_width != 64) key += "-h" + std::to_string(head_width);
        return key;
    }
};

/// Exact parameter count implied by a config.
inline std::size_t parameter_count(const BackboneConfig& config) {
    std::size_t count = 0;
    std::size_t in = config.input_feature_length;
    for (std::size_t l = 0; l < config.depth; ++l) {
        if (config.kind == BackboneKind::gcn) {
            count += in * config.width + config.width;
        } else {
            count += in * config.width + config.temporal_kernel * config.width;
        }
        in = config.width;
    }
    const std::size_t readout = config.kind == BackboneKind::gcn ? 2 * config.width : config.width;
    count += readout * config.head_width + config.head_width;
    count += config.head_width * config.num_classes + config.num_classes;
    return count;
}

class Model {
public:
    Model() = default;
    Model(BackboneConfig config, std::vector<std::string> names, std::vector<Tensor> params)
        : config_(config), names_(std::move(names)), params_(std::move(params)) {}

    [[nodiscard]] const BackboneConfig& config() const noexcept { return config_; }
    [[nodiscard]] const std::vector<std::string>& names() const noexcept { return names_; }
    [[nodiscard]] std::vector<Tensor>& params() noexcept { return params_; }
    [[nodiscard]] const std::vector<Tensor>& params() const noexcept { return params_; }

    [[nodiscard]] const Tensor& param(const std::string& name) const {
        for (std::size_t i = 0; i < names_.size(); ++i) {
            if (names_[i] == name) return params_[i];
        }
        throw ModelError("no parameter named '" + name + "'");
    }

    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.numel();
        return n;
    }

    [[nodiscard]] std::size_t graph_layer_count() const { return config_.depth; }

    /// Deep copy; names and requires_grad flags are preserved.
    [[nodiscard]] Model clone() const {
        std::vector<Tensor> copies;
        copies.reserve(params_.size());
        for (const auto& p : params_) {
            Tensor c = p.deep_copy();
            c.clear_grad();
            copies.push_back(std::move(c));
        }
        return Model(config_, names_, std::move(copies));
    }

    /// All parameter values in registry order.
    [[nodiscard]] std::vector<double> flat_values() const {
        std::vector<double> out;
        out.reserve(parameter_count());
        for (const auto& p : params_) out.insert(out.end(), p.data().begin(), p.data().end());
        return out;
    }

    void set_flat_values(std::span<const double> values) {
        if (values.size() != parameter_count()) throw ModelError("flat parameter vector has wrong length");
        std::size_t offset = 0;
        for (auto& p : params_) {
            std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(offset), p.numel(), p.data().begin());
            offset += p.numel();
        }
    }

private:
    BackboneConfig config_;
    std::vector<std::string> names_;
    std::vector<Tensor> params_;
};

inline Model clone_model(const Model& model) { return model.clone(); }

namespace detail {

inline Tensor glorot(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> values(fan_in * fan_out);
    for (auto& v : values) v = rng.uniform(-bound, bound);
    return Tensor::from({fan_in, fan_out}, std::move(values), true);
}

}  // namespace detail

inline Model build_backbone(const BackboneConfig& config, const SkeletonGraph& graph, std::uint64_t seed) {
    config.validate();
    if (graph.num_joints == 0) throw ModelError("empty skeleton graph");
    Rng rng(seed);
    std::vector<std::string> names;
    std::vector<Tensor> params;
    auto add = [&](std::string name, Tensor t) {
        names.push_back(std::move(name));
        params.push_back(std::move(t));
    };
    std::size_t in = config.input_feature_length;
    for (std::size_t l = 0; l < config.depth; ++l) {
        const std::string prefix = "graph." + std::to_string(l) + ".";
        add(prefix + "weight", detail::glorot(rng, in, config.width));
        if (config.kind == BackboneKind::gcn) {
            add(prefix + "bias", Tensor::zeros({config.width}, true));
        } else {
            std::vector<double> taps(config.temporal_kernel * config.width);
            for (auto& v : taps) v = rng.uniform(0.5, 1.5);
            for (std::size_t c = 0; c < config.width; ++c) {
                double total = 0.0;
                for (std::size_t k = 0; k < config.temporal_kernel; ++k) total += taps[k * config.width + c];
                for (std::size_t k = 0; k < config.temporal_kernel; ++k) taps[k * config.width + c] /= total;
            }
            add(prefix + "temporal", Tensor::from({config.temporal_kernel, config.width}, std::move(taps), true));
        }
        in = config.width;
    }
    const std::size_t readout = config.kind == BackboneKind::gcn ? 2 * config.width : config.width;
    add("head.0.weight", detail::glorot(rng, readout, config.head_width));
    add("head.0.bias", Tensor::zeros({config.head_width}, true));
    add("head.1.weight", detail::glorot(rng, config.head_width, config.num_classes));
    add("head.1.bias", Tensor::zeros({config.num_classes}, true));
    return Model(config, std::move(names), std::move(params));
}

struct ForwardResult {
    Tensor logits;
    /// Aggregated neighbourhood messages A_hat (H W) of each graph layer.
    std::vector<Tensor> messages;
};

namespace detail {

inline Tensor mlp_head(Tape& tape, const Model& model, const Tensor& readout) {
    Tensor hidden = ops::relu(
        tape, ops::add(tape, ops::matmul(tape, readout, model.param("head.0.weight")), model.param("head.0.bias")));
    return ops::add(tape, ops::matmul(tape, hidden, model.param("head.1.weight")), model.param("head.1.bias"));
}

}  // namespace detail

/// node_features: [batch, joints, feature_length].
inline ForwardResult gcn_forward(Tape& tape, const Model& model, const Tensor& node_features,
                                 const SkeletonGraph& graph) {
    const auto& config = model.config();
    if (config.kind != BackboneKind::gcn) throw ModelError("gcn_forward called on a non-gcn model");
    if (config.depth == 0) throw ModelError("gcn needs at least one graph layer");
    if (node_features.rank() != 3) {
        throw ModelError("gcn input must be [batch, joints, features], got " + to_string(node_features.shape()));
    }
    if (node_features.dim(1) != graph.num_joints) {
        throw ModelError("gcn input has " + std::to_string(node_features.dim(1)) + " joints, graph has " +
                         std::to_string(graph.num_joints));
    }
    if (node_features.dim(2) != config.input_feature_length) {
        throw ModelError("gcn input feature length " + std::to_string(node_features.dim(2)) + " != configured " +
                         std::to_string(config.input_feature_length));
    }
    ForwardResult result;
    Tensor h = node_features;
    for (std::size_t l = 0; l < config.depth; ++l) {
        const std::string prefix = "graph." + std::to_string(l) + ".";
        Tensor projected = ops::matmul(tape, h, model.param(prefix + "weight"));
        Tensor message = ops::matmul(tape, graph.normalized_adjacency, projected);
        result.messages.push_back(message);
        h = ops::relu(tape, ops::add(tape, message, model.param(prefix + "bias")));
    }
    Tensor readout = ops::concat(tape, {ops::sum(tape, h, 1), ops::max(tape, h, 1)}, 1);
    result.logits = detail::mlp_head(tape, model, readout);
    return result;
}

/// sequence: [batch, frames, joints, 3].
inline ForwardResult stgcn_lite_forward(Tape& tape, const Model& model, const Tensor& sequence,
                                        const SkeletonGraph& graph) {
    const auto& config = model.config();
    if (config.kind != BackboneKind::stgcn_lite) throw ModelError("stgcn_lite_forward called on a non-stgcn model");
    if (sequence.rank() != 4) {
        throw ModelError("stgcn input must be [batch, frames, joints, channels], got " + to_string(sequence.shape()));
    }
    const std::size_t batch = sequence.dim(0), frames = sequence.dim(1), joints = sequence.dim(2);
    if (joints != graph.num_joints) {
        throw ModelError("stgcn input has " + std::to_string(joints) + " joints, graph has " +
                         std::to_string(graph.num_joints));
    }
    if (sequence.dim(3) != config.input_feature_length) {
        throw ModelError("stgcn input channel count does not match config");
    }
    if (frames < config.temporal_kernel) {
        throw ModelError("stgcn needs at least " + std::to_string(config.temporal_kernel) + " frames, got " +
                         std::to_string(frames));
    }
    ForwardResult result;
    Tensor h = ops::reshape(tape, sequence, {batch * frames, joints, sequence.dim(3)});
    for (std::size_t l = 0; l < config.depth; ++l) {
        const std::string prefix = "graph." + std::to_string(l) + ".";
        Tensor projected = ops::matmul(tape, h, model.param(prefix + "weight"));
        Tensor message = ops::matmul(tape, graph.normalized_adjacency, projected);
        result.messages.push_back(message);
        Tensor spatial = ops::reshape(tape, ops::relu(tape, message), {batch, frames, joints, config.width});
        Tensor temporal = ops::temporal_conv(tape, spatial, model.param(prefix + "temporal"));
        h = ops::reshape(tape, temporal, {batch * frames, joints, config.width});
    }
    Tensor pooled = ops::mean(tape, ops::reshape(tape, h, {batch, frames * joints, config.width}), 1);
    result.logits = detail::mlp_head(tape, model, pooled);
    return result;
}

inline ForwardResult forward(Tape& tape, const Model& model, const Tensor& input, const SkeletonGraph& graph) {
    return model.config().kind == BackboneKind::gcn ? gcn_forward(tape, model, input, graph)
                                                     : stgcn_lite_forward(tape, model, input, graph);
}

}  // namespace cglbench
