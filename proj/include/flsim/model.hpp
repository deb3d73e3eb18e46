#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "flsim/error.hpp"
#include "flsim/nn.hpp"

namespace flsim {

enum class PartitionTag : std::uint8_t { base = 0, personal = 1, full = 2, dataset = 3 };

inline const char* partition_tag_name(PartitionTag t) {
    switch (t) {
        case PartitionTag::base: return "base";
        case PartitionTag::personal: return "personal";
        case PartitionTag::full: return "full";
        case PartitionTag::dataset: return "dataset";
    }
    return "?";
}

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

/// An ordered list of named parameter tensors plus the partition they belong
/// to. Entries keep model layer order.
template <typename T>
struct ParamSet {
    PartitionTag tag = PartitionTag::full;
    std::vector<NamedTensor<T>> entries;

    std::size_t size() const { return entries.size(); }
};

template <typename T>
bool bitwise_equal(const ParamSet<T>& a, const ParamSet<T>& b) {
    if (a.tag != b.tag || a.entries.size() != b.entries.size()) return false;
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
        if (a.entries[i].name != b.entries[i].name) return false;
        if (!bitwise_equal(a.entries[i].tensor, b.entries[i].tensor)) return false;
    }
    return true;
}

enum class Arch { mini, diffgated53 };

inline std::optional<Arch> parse_arch(std::string_view s) {
    if (s == "mini") return Arch::mini;
    if (s == "diffgated53") return Arch::diffgated53;
    return std::nullopt;
}

inline const char* arch_name(Arch a) {
    return a == Arch::mini ? "mini" : "diffgated53";
}

/// Layer stack with a split index: layers [0, split_index) are the base
/// partition (aggregated globally), layers [split_index, end) the
/// personalization partition (retained per client). Parameters are named
/// "<layer_index>.weight" / "<layer_index>.bias" in layer order.
template <typename T>
struct SplitModel {
    std::vector<LayerSpec> specs;
    std::vector<std::string> param_names;    // aligned with params
    std::vector<std::size_t> param_layers;   // owning layer index per tensor
    std::vector<Tensor<T>> params;
    std::size_t split_index = 0;
    std::array<std::size_t, 3> input_dims{};  // per-sample [frames, height, width]

    std::size_t param_count() const { return params.size(); }
};

/// The split must fall exactly where the dense stack begins: no dense layer
/// before it, no conv/flatten/frame_diff at or after it.
inline void validate_split(const std::vector<LayerSpec>& specs, std::size_t split_index) {
    if (split_index == 0 || split_index >= specs.size()) {
        throw ConfigError("split_index must leave both partitions non-empty");
    }
    for (std::size_t k = 0; k < specs.size(); ++k) {
        const LayerKind kind = specs[k].kind;
        if (k < split_index && kind == LayerKind::dense) {
            throw ConfigError("dense layer " + std::to_string(k) + " precedes the split");
        }
        if (k >= split_index && (kind == LayerKind::conv2d || kind == LayerKind::flatten ||
                                 kind == LayerKind::frame_diff)) {
            throw ConfigError("layer " + std::to_string(k) + " (" + layer_kind_name(kind) +
                              ") follows the split");
        }
    }
    if (specs[split_index].kind != LayerKind::dense) {
        throw ConfigError("split_index must point at the first dense layer");
    }
}

namespace detail {

template <typename T>
SplitModel<T> assemble_model(std::vector<LayerSpec> specs, std::array<std::size_t, 3> input_dims,
                             std::uint64_t seed) {
    SplitModel<T> m;
    m.specs = std::move(specs);
    m.input_dims = input_dims;

    // Validates the whole chain against the architecture's input shape.
    auto shapes = activation_shapes(m.specs, {input_dims[0], input_dims[1], input_dims[2]});
    if (shapes.back() != std::vector<std::size_t>{static_cast<std::size_t>(kNumClasses)}) {
        throw ConfigError("architecture must end in " + std::to_string(kNumClasses) + " logits");
    }

    std::size_t first_dense = m.specs.size();
    for (std::size_t k = 0; k < m.specs.size(); ++k) {
        if (m.specs[k].kind == LayerKind::dense) {
            first_dense = k;
            break;
        }
    }
    m.split_index = first_dense;
    validate_split(m.specs, m.split_index);

    m.params = init_params<T>(m.specs, seed);
    for (std::size_t k = 0; k < m.specs.size(); ++k) {
        if (!m.specs[k].has_params()) continue;
        m.param_names.push_back(std::to_string(k) + ".weight");
        m.param_names.push_back(std::to_string(k) + ".bias");
        m.param_layers.push_back(k);
        m.param_layers.push_back(k);
    }
    return m;
}

}  // namespace detail

/// Builds one of the two fixed architectures with deterministic seeded
/// initialization.
///
/// diffgated53: frame_diff, five conv+relu stages (channels 16, 24, 32, 32, 32,
/// 3x3 kernels, strides 1,2,1,2,1, pad 1) and three dense layers
/// (2048 -> 128 -> 32 -> 2) for a [16, 32, 32] input.
/// mini: frame_diff, two conv+relu stages and two dense layers
/// (128 -> 32 -> 2) for a [16, 8, 8] input.
template <typename T>
SplitModel<T> build_model(Arch arch, std::uint64_t seed) {
    using LS = LayerSpec;
    if (arch == Arch::mini) {
        std::vector<LayerSpec> specs = {
            LS::make_frame_diff(),
            LS::make_conv2d(15, 8, 3, 3, 1, 1, 1, 1, 1),
            LS::make_relu(),
            LS::make_conv2d(8, 8, 3, 3, 2, 1, 1, 1, 1),
            LS::make_relu(),
            LS::make_flatten(),
            LS::make_dense(128, 32),
            LS::make_dense(32, 2),
        };
        return detail::assemble_model<T>(std::move(specs), {16, 8, 8}, seed);
    }
    std::vector<LayerSpec> specs = {
        LS::make_frame_diff(),
        LS::make_conv2d(15, 16, 3, 3, 1, 1, 1, 1, 1),
        LS::make_relu(),
        LS::make_conv2d(16, 24, 3, 3, 2, 1, 1, 1, 1),
        LS::make_relu(),
        LS::make_conv2d(24, 32, 3, 3, 1, 1, 1, 1, 1),
        LS::make_relu(),
        LS::make_conv2d(32, 32, 3, 3, 2, 1, 1, 1, 1),
        LS::make_relu(),
        LS::make_conv2d(32, 32, 3, 3, 1, 1, 1, 1, 1),
        LS::make_relu(),
        LS::make_flatten(),
        LS::make_dense(2048, 128),
        LS::make_relu(),
        LS::make_dense(128, 32),
        LS::make_relu(),
        LS::make_dense(32, 2),
    };
    return detail::assemble_model<T>(std::move(specs), {16, 32, 32}, seed);
}

template <typename T>
SplitModel<T> build_model(std::string_view arch, std::uint64_t seed) {
    auto a = parse_arch(arch);
    if (!a) throw ConfigError("unknown architecture '" + std::string(arch) + "'");
    return build_model<T>(*a, seed);
}

/// Splits the parameter list into (base, personal) by owning layer. The two
/// sets are a disjoint, order-preserving partition of the full list.
template <typename T>
std::pair<ParamSet<T>, ParamSet<T>> split_params(const SplitModel<T>& m) {
    ParamSet<T> base{PartitionTag::base, {}};
    ParamSet<T> personal{PartitionTag::personal, {}};
    for (std::size_t i = 0; i < m.params.size(); ++i) {
        auto& dst = m.param_layers[i] < m.split_index ? base : personal;
        dst.entries.push_back({m.param_names[i], m.params[i]});
    }
    return {std::move(base), std::move(personal)};
}

template <typename T>
ParamSet<T> full_params(const SplitModel<T>& m) {
    ParamSet<T> full{PartitionTag::full, {}};
    for (std::size_t i = 0; i < m.params.size(); ++i) {
        full.entries.push_back({m.param_names[i], m.params[i]});
    }
    return full;
}

/// Reassembles a full set from the two partitions (layer order restored by
/// construction: base names all precede personal names).
template <typename T>
ParamSet<T> merge_params(const ParamSet<T>& base, const ParamSet<T>& personal) {
    if (base.tag != PartitionTag::base || personal.tag != PartitionTag::personal) {
        throw ProtocolError("merge_params expects a base and a personal set");
    }
    ParamSet<T> full{PartitionTag::full, {}};
    full.entries.reserve(base.entries.size() + personal.entries.size());
    full.entries.insert(full.entries.end(), base.entries.begin(), base.entries.end());
    full.entries.insert(full.entries.end(), personal.entries.begin(), personal.entries.end());
    return full;
}

namespace detail {

template <typename T>
void check_entries_match(const SplitModel<T>& m, const ParamSet<T>& pset, bool base_side,
                         const char* what) {
    std::size_t j = 0;
    for (std::size_t i = 0; i < m.params.size(); ++i) {
        const bool in_side = (m.param_layers[i] < m.split_index) == base_side;
        if (!in_side) continue;
        if (j >= pset.entries.size()) {
            throw IncompatibleParamsError(std::string(what) + ": too few tensors");
        }
        const auto& e = pset.entries[j];
        if (e.name != m.param_names[i]) {
            throw IncompatibleParamsError(std::string(what) + ": expected tensor '" +
                                          m.param_names[i] + "', got '" + e.name + "'");
        }
        if (e.tensor.dims() != m.params[i].dims()) {
            throw IncompatibleParamsError(std::string(what) + ": tensor '" + e.name +
                                          "' has mismatched dimensions");
        }
        ++j;
    }
    if (j != pset.entries.size()) {
        throw IncompatibleParamsError(std::string(what) + ": too many tensors");
    }
}

}  // namespace detail

/// Replaces the base partition in place; personal tensors are untouched. The
/// set is validated in full before any tensor is written.
template <typename T>
void load_base_inplace(SplitModel<T>& m, const ParamSet<T>& base) {
    if (base.tag != PartitionTag::base) {
        throw IncompatibleParamsError("load_base expects a base-tagged set, got " +
                                      std::string(partition_tag_name(base.tag)));
    }
    detail::check_entries_match(m, base, /*base_side=*/true, "load_base");
    std::size_t j = 0;
    for (std::size_t i = 0; i < m.params.size(); ++i) {
        if (m.param_layers[i] < m.split_index) {
            m.params[i] = base.entries[j++].tensor;
        }
    }
}

template <typename T>
SplitModel<T> load_base(SplitModel<T> m, const ParamSet<T>& base) {
    load_base_inplace(m, base);
    return m;
}

/// Replaces the personalization partition in place (counterpart of load_base).
template <typename T>
void load_personal_inplace(SplitModel<T>& m, const ParamSet<T>& personal) {
    if (personal.tag != PartitionTag::personal) {
        throw IncompatibleParamsError("load_personal expects a personal-tagged set, got " +
                                      std::string(partition_tag_name(personal.tag)));
    }
    detail::check_entries_match(m, personal, /*base_side=*/false, "load_personal");
    std::size_t j = 0;
    for (std::size_t i = 0; i < m.params.size(); ++i) {
        if (m.param_layers[i] >= m.split_index) {
            m.params[i] = personal.entries[j++].tensor;
        }
    }
}

/// Replaces the full parameter list in place.
template <typename T>
void load_full_inplace(SplitModel<T>& m, const ParamSet<T>& full) {
    if (full.tag != PartitionTag::full) {
        throw IncompatibleParamsError("load_full expects a full-tagged set, got " +
                                      std::string(partition_tag_name(full.tag)));
    }
    if (full.entries.size() != m.params.size()) {
        throw IncompatibleParamsError("load_full: tensor count mismatch");
    }
    for (std::size_t i = 0; i < m.params.size(); ++i) {
        const auto& e = full.entries[i];
        if (e.name != m.param_names[i] || e.tensor.dims() != m.params[i].dims()) {
            throw IncompatibleParamsError("load_full: tensor '" + e.name + "' does not match");
        }
    }
    for (std::size_t i = 0; i < m.params.size(); ++i) {
        m.params[i] = full.entries[i].tensor;
    }
}

/// Names of the personalization-layer tensors (the set that must never cross
/// the client/server boundary under fedper-style strategies).
template <typename T>
std::vector<std::string> personal_tensor_names(const SplitModel<T>& m) {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < m.params.size(); ++i) {
        if (m.param_layers[i] >= m.split_index) names.push_back(m.param_names[i]);
    }
    return names;
}

}  // namespace flsim
