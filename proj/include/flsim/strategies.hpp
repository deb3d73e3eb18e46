#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "flsim/data.hpp"
#include "flsim/error.hpp"
#include "flsim/model.hpp"
#include "flsim/nn.hpp"
#include "flsim/rng.hpp"

namespace flsim {

enum class HessianMode { full_hvp, first_order };

struct Hyper {
    double lr_local = 0.05;
    double lr_meta = 0.01;  // inner step size (alpha) of the meta strategies
    std::size_t local_epochs = 2;
    std::size_t batch_size = 16;
    HessianMode hessian_mode = HessianMode::first_order;
};

/// What one client sends back after local training. The payload carries the
/// base partition for fedper/fedmetaper and the full set for
/// fedavg/perfedavg; personalization tensors never appear in it.
template <typename T>
struct ClientUpdate {
    int client_id = 0;
    ParamSet<T> payload;
    std::size_t num_samples = 0;
    double train_loss = 0;
};

/// Result of a stateless client update; `update` is empty when the client was
/// skipped, with the reason recorded.
template <typename T>
struct LocalUpdateResult {
    std::optional<ClientUpdate<T>> update;
    std::string skip_reason;
};

/// Result of a stateful (fedper-style) client update; `personal` is the
/// retained personalization partition after training.
template <typename T>
struct StatefulUpdateResult {
    std::optional<ClientUpdate<T>> update;
    ParamSet<T> personal;
    std::string skip_reason;
};

/// The per-epoch sample order every strategy uses. Exposed so tests can
/// reconstruct batch schedules independently.
inline std::vector<std::uint32_t> epoch_permutation(std::uint64_t client_seed, std::size_t epoch,
                                                    std::size_t n) {
    Rng rng(derive_seed(client_seed, "shuffle", epoch));
    return rng.permutation(n);
}

template <typename T>
Batch<T> make_batch(const ChunkDataset<T>& ds, const std::uint32_t* idx, std::size_t count) {
    if (count == 0) throw ShapeError("empty batch");
    const auto& d0 = ds.samples[idx[0]].chunk.dims();
    Batch<T> b;
    b.inputs = Tensor<T>({count, d0[0], d0[1], d0[2]});
    b.labels.resize(count);
    const std::size_t sz = ds.samples[idx[0]].chunk.size();
    for (std::size_t i = 0; i < count; ++i) {
        const auto& s = ds.samples[idx[i]];
        if (s.chunk.dims() != d0) throw ShapeError("dataset samples have mixed dimensions");
        std::memcpy(b.inputs.data() + i * sz, s.chunk.data(), sz * sizeof(T));
        b.labels[i] = s.label;
    }
    return b;
}

template <typename T>
Batch<T> full_batch(const ChunkDataset<T>& ds) {
    std::vector<std::uint32_t> idx(ds.samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::uint32_t>(i);
    return make_batch(ds, idx.data(), idx.size());
}

namespace detail {

template <typename T>
struct BatchGrad {
    double loss;
    std::vector<Tensor<T>> grads;
};

template <typename T>
BatchGrad<T> grad_on_batch(const std::vector<LayerSpec>& specs,
                           const std::vector<Tensor<T>>& params, const Batch<T>& batch) {
    auto cache = forward(params, specs, batch);
    double loss = loss_softmax_ce(cache.logits(), batch.labels);
    return {loss, backward(cache, batch.labels)};
}

/// Local minibatch SGD over all parameters; returns the final-epoch mean loss
/// (losses measured before each step, sample-weighted).
template <typename T>
double local_sgd(const std::vector<LayerSpec>& specs, std::vector<Tensor<T>>& params,
                 const ChunkDataset<T>& data, const Hyper& hyper, std::uint64_t seed) {
    const std::size_t n = data.size();
    double epoch_loss = 0;
    for (std::size_t epoch = 0; epoch < hyper.local_epochs; ++epoch) {
        auto perm = epoch_permutation(seed, epoch, n);
        double loss_sum = 0;
        for (std::size_t at = 0; at < n; at += hyper.batch_size) {
            const std::size_t count = std::min(hyper.batch_size, n - at);
            Batch<T> batch = make_batch(data, perm.data() + at, count);
            auto bg = grad_on_batch(specs, params, batch);
            loss_sum += bg.loss * static_cast<double>(count);
            sgd_step_inplace(params, bg.grads, hyper.lr_local);
        }
        epoch_loss = loss_sum / static_cast<double>(n);
    }
    return epoch_loss;
}

}  // namespace detail

/// FedAvg client step: local minibatch SGD on the full parameter set.
template <typename T>
LocalUpdateResult<T> client_update_fedavg(const SplitModel<T>& model, const ChunkDataset<T>& data,
                                          const Hyper& hyper, std::uint64_t seed, int client_id) {
    if (data.size() == 0) return {std::nullopt, "empty dataset"};
    SplitModel<T> local = model;
    double loss = detail::local_sgd(local.specs, local.params, data, hyper, seed);
    ClientUpdate<T> upd;
    upd.client_id = client_id;
    upd.payload = full_params(local);
    upd.num_samples = data.size();
    upd.train_loss = loss;
    return {std::move(upd), ""};
}

/// Sample-count weighted mean of the payload tensors, consumed in ascending
/// client_id order. Uses an incremental mean so identical payloads aggregate
/// to themselves exactly and scaling all counts by a constant leaves the
/// result unchanged.
template <typename T>
ParamSet<T> aggregate_weighted(const std::vector<ClientUpdate<T>>& updates) {
    if (updates.empty()) throw ProtocolError("aggregate_weighted needs at least one update");
    std::vector<std::size_t> order(updates.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return updates[a].client_id < updates[b].client_id;
    });

    const ClientUpdate<T>& first = updates[order[0]];
    if (first.num_samples == 0) throw ProtocolError("update with zero samples");
    for (std::size_t i : order) {
        const auto& u = updates[i];
        if (u.payload.tag != first.payload.tag) {
            throw ProtocolError("mixed partition tags in aggregation");
        }
        if (u.payload.entries.size() != first.payload.entries.size()) {
            throw ProtocolError("payload tensor counts differ");
        }
        for (std::size_t e = 0; e < u.payload.entries.size(); ++e) {
            if (u.payload.entries[e].name != first.payload.entries[e].name ||
                !u.payload.entries[e].tensor.same_shape(first.payload.entries[e].tensor)) {
                throw ProtocolError("payload tensor '" + u.payload.entries[e].name +
                                    "' does not match across clients");
            }
        }
    }

    ParamSet<T> acc = first.payload;
    double weight_sum = static_cast<double>(first.num_samples);
    for (std::size_t k = 1; k < order.size(); ++k) {
        const auto& u = updates[order[k]];
        if (u.num_samples == 0) throw ProtocolError("update with zero samples");
        weight_sum += static_cast<double>(u.num_samples);
        const T c = static_cast<T>(static_cast<double>(u.num_samples) / weight_sum);
        for (std::size_t e = 0; e < acc.entries.size(); ++e) {
            T* a = acc.entries[e].tensor.data();
            const T* x = u.payload.entries[e].tensor.data();
            const std::size_t sz = acc.entries[e].tensor.size();
            for (std::size_t j = 0; j < sz; ++j) {
                const T d = x[j] - a[j];
                if (d != T{0}) a[j] += c * d;
            }
        }
    }
    return acc;
}

/// FedPer client step: receive base, train all layers jointly, send back base
/// only; the personalization partition stays with the caller.
template <typename T>
StatefulUpdateResult<T> client_update_fedper(const SplitModel<T>& model, const ParamSet<T>& base_in,
                                             const ChunkDataset<T>& data, const Hyper& hyper,
                                             std::uint64_t seed, int client_id) {
    SplitModel<T> local = model;
    load_base_inplace(local, base_in);
    if (data.size() == 0) {
        auto [b, p] = split_params(local);
        (void)b;
        return {std::nullopt, std::move(p), "empty dataset"};
    }
    double loss = detail::local_sgd(local.specs, local.params, data, hyper, seed);
    auto [base_out, personal_out] = split_params(local);
    ClientUpdate<T> upd;
    upd.client_id = client_id;
    upd.payload = std::move(base_out);
    upd.num_samples = data.size();
    upd.train_loss = loss;
    return {std::move(upd), std::move(personal_out), ""};
}

/// Aggregates base-partition updates for redistribution.
template <typename T>
ParamSet<T> server_round_fedper(const ParamSet<T>& base, const std::vector<ClientUpdate<T>>& updates) {
    for (const auto& u : updates) {
        if (u.payload.tag != PartitionTag::base) {
            throw ProtocolError("fedper aggregation received a non-base payload from client " +
                                std::to_string(u.client_id));
        }
        if (u.payload.entries.size() != base.entries.size()) {
            throw ProtocolError("client " + std::to_string(u.client_id) +
                                " sent a base set of the wrong size");
        }
    }
    return aggregate_weighted(updates);
}

/// Meta-gradient of one support/query pair, generic over the gradient oracle:
///   w' = w - alpha * grad_support(w)
///   first_order:  grad_query(w')
///   full_hvp:     grad_query(w') - alpha * H_support(w) * grad_query(w')
/// with the Hessian-vector product taken by central differences of the support
/// gradient. With alpha = 0 both modes reduce to grad_query(w).
template <typename T, typename GradS, typename GradQ>
std::vector<Tensor<T>> meta_gradient(const std::vector<Tensor<T>>& w, GradS&& grad_support,
                                     GradQ&& grad_query, double alpha, HessianMode mode) {
    if (alpha < 0) throw ConfigError("alpha must be non-negative");
    if (alpha == 0) return grad_query(w);

    std::vector<Tensor<T>> gs = grad_support(w);
    std::vector<Tensor<T>> adapted = sgd_step(w, gs, alpha);
    std::vector<Tensor<T>> gq = grad_query(adapted);
    if (mode == HessianMode::first_order) return gq;

    double norm_sq = 0;
    for (const auto& t : gq) {
        for (std::size_t j = 0; j < t.size(); ++j) {
            norm_sq += static_cast<double>(t[j]) * static_cast<double>(t[j]);
        }
    }
    const double norm = std::sqrt(norm_sq);
    if (norm == 0) return gq;
    const double delta = std::is_same_v<T, double> ? 1e-5 / norm : 1e-3 / std::max(norm, 1e-12);

    std::vector<Tensor<T>> wp = sgd_step(w, gq, -delta);  // w + delta * v
    std::vector<Tensor<T>> wm = sgd_step(w, gq, delta);   // w - delta * v
    std::vector<Tensor<T>> gp = grad_support(wp);
    std::vector<Tensor<T>> gm = grad_support(wm);

    std::vector<Tensor<T>> out = gq;
    const T inv2d = static_cast<T>(1.0 / (2.0 * delta));
    const T a = static_cast<T>(alpha);
    for (std::size_t i = 0; i < out.size(); ++i) {
        T* o = out[i].data();
        const T* p = gp[i].data();
        const T* m = gm[i].data();
        for (std::size_t j = 0; j < out[i].size(); ++j) {
            const T hv = (p[j] - m[j]) * inv2d;
            o[j] -= a * hv;
        }
    }
    return out;
}

/// Meta-gradient with the model's own loss as the oracle.
template <typename T>
std::vector<Tensor<T>> perfedavg_meta_gradient(const std::vector<LayerSpec>& specs,
                                               const std::vector<Tensor<T>>& params,
                                               const Batch<T>& support, const Batch<T>& query,
                                               double alpha, HessianMode mode) {
    auto grad_s = [&](const std::vector<Tensor<T>>& p) {
        return detail::grad_on_batch(specs, p, support).grads;
    };
    auto grad_q = [&](const std::vector<Tensor<T>>& p) {
        return detail::grad_on_batch(specs, p, query).grads;
    };
    return meta_gradient(params, grad_s, grad_q, alpha, mode);
}

/// Per-FedAvg client step: per epoch, walk the shuffled order in double
/// batches, take the first half as support and the second as query, and step
/// with the meta-gradient. The tail that does not fill a double batch is
/// dropped.
template <typename T>
LocalUpdateResult<T> client_update_perfedavg(const SplitModel<T>& model,
                                             const ChunkDataset<T>& data, const Hyper& hyper,
                                             std::uint64_t seed, int client_id) {
    const std::size_t n = data.size();
    if (n == 0) return {std::nullopt, "empty dataset"};
    if (n < 2 * hyper.batch_size) {
        return {std::nullopt, "training set has " + std::to_string(n) +
                                  " samples, need at least " +
                                  std::to_string(2 * hyper.batch_size) +
                                  " for a support/query pair"};
    }
    SplitModel<T> local = model;
    const std::size_t b = hyper.batch_size;
    double epoch_loss = 0;
    for (std::size_t epoch = 0; epoch < hyper.local_epochs; ++epoch) {
        auto perm = epoch_permutation(seed, epoch, n);
        const std::size_t steps = n / (2 * b);
        double loss_sum = 0;
        std::size_t loss_count = 0;
        const bool last_epoch = epoch + 1 == hyper.local_epochs;
        for (std::size_t k = 0; k < steps; ++k) {
            Batch<T> support = make_batch(data, perm.data() + 2 * k * b, b);
            Batch<T> query = make_batch(data, perm.data() + 2 * k * b + b, b);
            if (last_epoch) {
                loss_sum += loss_softmax_ce(forward(local.params, local.specs, query).logits(),
                                            query.labels) *
                            static_cast<double>(b);
                loss_count += b;
            }
            auto g = perfedavg_meta_gradient(local.specs, local.params, support, query,
                                             hyper.lr_meta, hyper.hessian_mode);
            sgd_step_inplace(local.params, g, hyper.lr_local);
        }
        if (last_epoch && loss_count > 0) {
            epoch_loss = loss_sum / static_cast<double>(loss_count);
        }
    }
    ClientUpdate<T> upd;
    upd.client_id = client_id;
    upd.payload = full_params(local);
    upd.num_samples = n;
    upd.train_loss = epoch_loss;
    return {std::move(upd), ""};
}

enum class UpdateScope { all_params, personal_only };

/// A few full-batch SGD steps on the client's own data; used to adapt a
/// Per-FedAvg model before evaluation and the personalization partition under
/// FedMeta-Per.
template <typename T>
SplitModel<T> personalize(SplitModel<T> model, const ChunkDataset<T>& data, std::size_t steps,
                          double lr, UpdateScope scope = UpdateScope::all_params) {
    if (steps == 0) return model;
    Batch<T> batch = full_batch(data);
    for (std::size_t s = 0; s < steps; ++s) {
        auto bg = detail::grad_on_batch(model.specs, model.params, batch);
        const T lrt = static_cast<T>(lr);
        for (std::size_t i = 0; i < model.params.size(); ++i) {
            if (scope == UpdateScope::personal_only &&
                model.param_layers[i] < model.split_index) {
                continue;
            }
            T* p = model.params[i].data();
            const T* g = bg.grads[i].data();
            for (std::size_t j = 0; j < model.params[i].size(); ++j) p[j] -= lrt * g[j];
        }
    }
    return model;
}

/// FedMeta-Per client step: per double batch the base partition takes a
/// meta-gradient step while the personalization partition takes a plain SGD
/// step on the query batch; both gradients are evaluated at the same incoming
/// parameters. Sends back base only.
template <typename T>
StatefulUpdateResult<T> client_update_fedmetaper(const SplitModel<T>& model,
                                                 const ParamSet<T>& base_in,
                                                 const ChunkDataset<T>& data, const Hyper& hyper,
                                                 std::uint64_t seed, int client_id) {
    SplitModel<T> local = model;
    load_base_inplace(local, base_in);
    const std::size_t n = data.size();
    auto skip = [&](std::string reason) {
        auto [b, p] = split_params(local);
        (void)b;
        return StatefulUpdateResult<T>{std::nullopt, std::move(p), std::move(reason)};
    };
    if (n == 0) return skip("empty dataset");
    if (n < 2 * hyper.batch_size) {
        return skip("training set has " + std::to_string(n) + " samples, need at least " +
                    std::to_string(2 * hyper.batch_size) + " for a support/query pair");
    }

    const std::size_t b = hyper.batch_size;
    double epoch_loss = 0;
    for (std::size_t epoch = 0; epoch < hyper.local_epochs; ++epoch) {
        auto perm = epoch_permutation(seed, epoch, n);
        const std::size_t steps = n / (2 * b);
        double loss_sum = 0;
        std::size_t loss_count = 0;
        const bool last_epoch = epoch + 1 == hyper.local_epochs;
        for (std::size_t k = 0; k < steps; ++k) {
            Batch<T> support = make_batch(data, perm.data() + 2 * k * b, b);
            Batch<T> query = make_batch(data, perm.data() + 2 * k * b + b, b);
            auto meta_g = perfedavg_meta_gradient(local.specs, local.params, support, query,
                                                  hyper.lr_meta, hyper.hessian_mode);
            auto plain = detail::grad_on_batch(local.specs, local.params, query);
            if (last_epoch) {
                loss_sum += plain.loss * static_cast<double>(b);
                loss_count += b;
            }
            const T lrt = static_cast<T>(hyper.lr_local);
            for (std::size_t i = 0; i < local.params.size(); ++i) {
                const bool is_base = local.param_layers[i] < local.split_index;
                const Tensor<T>& g = is_base ? meta_g[i] : plain.grads[i];
                T* p = local.params[i].data();
                for (std::size_t j = 0; j < local.params[i].size(); ++j) {
                    p[j] -= lrt * g[j];
                }
            }
        }
        if (last_epoch && loss_count > 0) {
            epoch_loss = loss_sum / static_cast<double>(loss_count);
        }
    }
    auto [base_out, personal_out] = split_params(local);
    ClientUpdate<T> upd;
    upd.client_id = client_id;
    upd.payload = std::move(base_out);
    upd.num_samples = n;
    upd.train_loss = epoch_loss;
    return {std::move(upd), std::move(personal_out), ""};
}

}  // namespace flsim
