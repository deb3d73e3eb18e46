#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "flsim/error.hpp"
#include "flsim/rng.hpp"
#include "flsim/serialize.hpp"
#include "flsim/tensor.hpp"

namespace flsim {

struct ChunkDims {
    std::size_t frames = 16, height = 8, width = 8;
};

/// Per-client feature skew: background level, blob size, and a multiplier on
/// the per-frame motion scale.
struct SkewParams {
    double bg_offset = 0.1;
    std::size_t blob_radius = 1;
    double speed_scale = 1.0;
};

struct ClientSpec {
    int client_id = 1;
    std::size_t fight_count = 0;
    std::size_t nonfight_count = 0;
    SkewParams skew;
};

template <typename T>
struct LabeledChunk {
    Tensor<T> chunk;  // [frames, height, width]
    int label = 0;    // 0 = NonFight, 1 = Fight
};

template <typename T>
struct ChunkDataset {
    std::vector<LabeledChunk<T>> samples;
    struct Meta {
        std::string generator_id;
        std::uint64_t seed = 0;
    } meta;

    std::size_t size() const { return samples.size(); }
};

enum class FixtureName { table1, table2, table3 };

inline std::optional<FixtureName> parse_fixture_name(std::string_view s) {
    if (s == "table1") return FixtureName::table1;
    if (s == "table2") return FixtureName::table2;
    if (s == "table3") return FixtureName::table3;
    return std::nullopt;
}

inline const char* fixture_name_str(FixtureName f) {
    switch (f) {
        case FixtureName::table1: return "table1";
        case FixtureName::table2: return "table2";
        case FixtureName::table3: return "table3";
    }
    return "?";
}

/// Per-client (fight, nonfight) sample counts of one experiment topology.
struct TopologyFixture {
    FixtureName name;
    std::vector<std::pair<std::size_t, std::size_t>> clients;
};

inline const TopologyFixture& fixture(FixtureName name) {
    static const TopologyFixture t1{FixtureName::table1, {{900, 900}, {900, 900}}};
    static const TopologyFixture t2{FixtureName::table2, {{641, 27}, {655, 1305}, {504, 468}}};
    static const TopologyFixture t3{
        FixtureName::table3, {{570, 402}, {151, 49}, {1019, 777}, {695, 1207}}};
    switch (name) {
        case FixtureName::table1: return t1;
        case FixtureName::table2: return t2;
        case FixtureName::table3: return t3;
    }
    return t1;
}

/// Deterministic per-client skew used when a topology is built from a fixture.
inline SkewParams default_skew(int client_id) {
    SkewParams s;
    s.bg_offset = 0.1 * client_id;
    s.blob_radius = 1 + static_cast<std::size_t>(client_id % 3);
    s.speed_scale = 1.0 + 0.25 * client_id;
    return s;
}

/// Number of non-overlapping fixed-size chunks a video yields; leftover frames
/// are dropped.
inline std::size_t chunks_per_video(std::size_t frame_count, std::size_t chunk_size) {
    if (chunk_size == 0) throw ConfigError("chunk_size must be >= 1");
    return frame_count / chunk_size;
}

/// Round half up, with a small guard against products like 65.499999999...
/// that are meant to be exactly .5.
inline std::size_t round_half_up(double x) {
    return static_cast<std::size_t>(std::floor(x + 0.5 + 1e-9));
}

// Motion scale of the blob per frame: displacement ~ |N(0, speed_scale * base)|
// with base 2.0 for Fight and 0.25 for NonFight samples.
inline constexpr double kFightMotionBase = 2.0;
inline constexpr double kNonFightMotionBase = 0.25;
inline constexpr double kPixelNoiseSigma = 0.05;
inline constexpr double kBlobContrast = 0.5;

/// Continuous blob path of one chunk; step_lengths are the raw displacement
/// magnitudes drawn before border reflection.
struct BlobTrajectory {
    std::vector<std::pair<double, double>> centers;  // (y, x), one per frame
    std::vector<double> step_lengths;                // frames - 1 entries
};

namespace detail {

inline double reflect_into(double x, double lo, double hi) {
    if (hi <= lo) return lo;
    const double period = 2.0 * (hi - lo);
    double t = std::fmod(x - lo, period);
    if (t < 0) t += period;
    return t <= (hi - lo) ? lo + t : hi - (t - (hi - lo));
}

}  // namespace detail

inline BlobTrajectory sample_trajectory(Rng& rng, const ChunkDims& dims, const SkewParams& skew,
                                        int label) {
    const double r = static_cast<double>(skew.blob_radius);
    const double lo_y = r, hi_y = static_cast<double>(dims.height - 1) - r;
    const double lo_x = r, hi_x = static_cast<double>(dims.width - 1) - r;
    const double sigma =
        skew.speed_scale * (label == 1 ? kFightMotionBase : kNonFightMotionBase);

    BlobTrajectory traj;
    traj.centers.reserve(dims.frames);
    traj.step_lengths.reserve(dims.frames - 1);
    double y = rng.uniform(lo_y, hi_y > lo_y ? hi_y : lo_y);
    double x = rng.uniform(lo_x, hi_x > lo_x ? hi_x : lo_x);
    traj.centers.emplace_back(y, x);
    for (std::size_t t = 1; t < dims.frames; ++t) {
        const double d = std::abs(rng.normal(0.0, sigma));
        const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
        y = detail::reflect_into(y + d * std::cos(angle), lo_y, hi_y);
        x = detail::reflect_into(x + d * std::sin(angle), lo_x, hi_x);
        traj.centers.emplace_back(y, x);
        traj.step_lengths.push_back(d);
    }
    return traj;
}

namespace detail {

template <typename T>
Tensor<T> render_chunk(Rng& rng, const ChunkDims& dims, const SkewParams& skew,
                       const BlobTrajectory& traj) {
    Tensor<T> out({dims.frames, dims.height, dims.width});
    const double blob_value = std::min(skew.bg_offset + kBlobContrast, 1.0);
    const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(skew.blob_radius);
    T* dst = out.data();
    for (std::size_t t = 0; t < dims.frames; ++t) {
        const std::ptrdiff_t cy = static_cast<std::ptrdiff_t>(std::llround(traj.centers[t].first));
        const std::ptrdiff_t cx = static_cast<std::ptrdiff_t>(std::llround(traj.centers[t].second));
        for (std::size_t py = 0; py < dims.height; ++py) {
            for (std::size_t px = 0; px < dims.width; ++px) {
                const bool in_blob = std::llabs(static_cast<std::ptrdiff_t>(py) - cy) <= r &&
                                     std::llabs(static_cast<std::ptrdiff_t>(px) - cx) <= r;
                double v = (in_blob ? blob_value : skew.bg_offset) +
                           rng.normal(0.0, kPixelNoiseSigma);
                v = std::clamp(v, 0.0, 1.0);
                *dst++ = static_cast<T>(v);
            }
        }
    }
    return out;
}

}  // namespace detail

/// Synthetic surveillance chunks for one client: exactly fight_count label-1
/// and nonfight_count label-0 samples, deterministic in (spec, dims, seed).
template <typename T>
ChunkDataset<T> generate_client_data(const ClientSpec& spec, const ChunkDims& dims,
                                     std::uint64_t seed) {
    if (dims.frames < 2) throw ConfigError("chunk needs at least 2 frames");
    if (dims.height < 4 || dims.width < 4) throw ConfigError("frame must be at least 4x4");
    if (spec.fight_count + spec.nonfight_count == 0) {
        throw ConfigError("client " + std::to_string(spec.client_id) + " has no samples");
    }
    if (2 * spec.skew.blob_radius + 1 > std::min(dims.height, dims.width)) {
        throw ConfigError("blob radius " + std::to_string(spec.skew.blob_radius) +
                          " does not fit a " + std::to_string(dims.height) + "x" +
                          std::to_string(dims.width) + " frame");
    }
    if (spec.skew.bg_offset < 0.0 || spec.skew.bg_offset >= 1.0) {
        throw ConfigError("bg_offset must be in [0, 1)");
    }
    if (spec.skew.speed_scale <= 0.0) throw ConfigError("speed_scale must be positive");

    ChunkDataset<T> ds;
    ds.meta.generator_id = "blob-v1/client" + std::to_string(spec.client_id);
    ds.meta.seed = seed;
    const std::size_t total = spec.fight_count + spec.nonfight_count;
    ds.samples.reserve(total);
    for (std::size_t i = 0; i < total; ++i) {
        const int label = i < spec.fight_count ? 1 : 0;
        Rng rng(derive_seed(seed, "sample", i));
        BlobTrajectory traj = sample_trajectory(rng, dims, spec.skew, label);
        ds.samples.push_back({detail::render_chunk<T>(rng, dims, spec.skew, traj), label});
    }
    return ds;
}

/// Scales a fixture's per-client cell counts (round half up) and generates one
/// dataset per client with the deterministic per-client skew.
template <typename T>
std::vector<ChunkDataset<T>> build_topology(const TopologyFixture& fix, double scale,
                                            const ChunkDims& dims, std::uint64_t seed) {
    if (!(scale > 0.0) || scale > 1.0) throw ConfigError("scale must be in (0, 1]");
    std::vector<ChunkDataset<T>> out;
    out.reserve(fix.clients.size());
    for (std::size_t i = 0; i < fix.clients.size(); ++i) {
        const int client_id = static_cast<int>(i) + 1;
        ClientSpec spec;
        spec.client_id = client_id;
        spec.fight_count = round_half_up(scale * static_cast<double>(fix.clients[i].first));
        spec.nonfight_count = round_half_up(scale * static_cast<double>(fix.clients[i].second));
        if ((fix.clients[i].first > 0 && spec.fight_count == 0) ||
            (fix.clients[i].second > 0 && spec.nonfight_count == 0)) {
            throw ConfigError("scale " + std::to_string(scale) +
                              " rounds a non-empty cell of client " + std::to_string(client_id) +
                              " to zero samples");
        }
        spec.skew = default_skew(client_id);
        out.push_back(generate_client_data<T>(spec, dims, derive_seed(seed, "data",
                                                                      static_cast<std::uint64_t>(client_id))));
    }
    return out;
}

/// Stratified deterministic split. Per class the test side receives
/// round-half-up(test_fraction * class_count) samples chosen by a seeded
/// shuffle; sample order within each side follows the original dataset order.
template <typename T>
std::pair<ChunkDataset<T>, ChunkDataset<T>> train_test_split(const ChunkDataset<T>& ds,
                                                             double test_fraction,
                                                             std::uint64_t seed) {
    if (!(test_fraction > 0.0) || !(test_fraction < 1.0)) {
        throw ConfigError("test_fraction must be in (0, 1)");
    }
    std::vector<std::size_t> by_class[2];
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        by_class[ds.samples[i].label].push_back(i);
    }
    Rng rng(seed);
    std::vector<bool> in_test(ds.samples.size(), false);
    std::size_t test_total = 0;
    for (auto& idx : by_class) {
        if (idx.empty()) continue;
        auto perm = rng.permutation(idx.size());
        std::size_t take = std::min(idx.size(), round_half_up(test_fraction * idx.size()));
        for (std::size_t k = 0; k < take; ++k) in_test[idx[perm[k]]] = true;
        test_total += take;
    }
    if (test_total == 0 || test_total == ds.samples.size()) {
        throw SplitError("split would leave the " +
                         std::string(test_total == 0 ? "test" : "train") + " side empty");
    }
    ChunkDataset<T> train, test;
    train.meta = ds.meta;
    test.meta = ds.meta;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        (in_test[i] ? test : train).samples.push_back(ds.samples[i]);
    }
    return {std::move(train), std::move(test)};
}

/// Dataset container: the FLPK format with partition tag 3 and two tensors,
/// "inputs" [n, frames, height, width] and "labels" [n] holding 0/1 values.
template <typename T>
std::vector<std::uint8_t> export_dataset(const ChunkDataset<T>& ds) {
    if (ds.samples.empty()) throw ConfigError("cannot export an empty dataset");
    const auto& d0 = ds.samples[0].chunk.dims();
    const std::size_t n = ds.samples.size();
    Tensor<T> inputs({n, d0[0], d0[1], d0[2]});
    Tensor<T> labels({n});
    for (std::size_t i = 0; i < n; ++i) {
        const auto& s = ds.samples[i];
        if (s.chunk.dims() != d0) throw ShapeError("dataset samples have mixed dimensions");
        std::memcpy(inputs.data() + i * s.chunk.size(), s.chunk.data(),
                    s.chunk.size() * sizeof(T));
        labels[i] = static_cast<T>(s.label);
    }
    ParamSet<T> pset;
    pset.tag = PartitionTag::dataset;
    pset.entries.push_back({"inputs", std::move(inputs)});
    pset.entries.push_back({"labels", std::move(labels)});
    return serialize(pset);
}

template <typename T>
ChunkDataset<T> import_dataset(const std::vector<std::uint8_t>& bytes) {
    ParamSet<T> pset = deserialize<T>(bytes);
    if (pset.tag != PartitionTag::dataset || pset.entries.size() != 2 ||
        pset.entries[0].name != "inputs" || pset.entries[1].name != "labels") {
        throw CorruptFileError("not a dataset container", 6);
    }
    const Tensor<T>& inputs = pset.entries[0].tensor;
    const Tensor<T>& labels = pset.entries[1].tensor;
    if (inputs.rank() != 4 || labels.rank() != 1 || inputs.dim(0) != labels.dim(0)) {
        throw CorruptFileError("dataset tensors have inconsistent shapes", 6);
    }
    ChunkDataset<T> ds;
    ds.meta.generator_id = "imported";
    const std::size_t n = inputs.dim(0);
    const std::size_t sample_size = inputs.size() / n;
    ds.samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<T> buf(inputs.data() + i * sample_size, inputs.data() + (i + 1) * sample_size);
        const int label = labels[i] == T{1} ? 1 : 0;
        ds.samples.push_back(
            {Tensor<T>::from_data({inputs.dim(1), inputs.dim(2), inputs.dim(3)}, std::move(buf)),
             label});
    }
    return ds;
}

}  // namespace flsim
