#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "looc/augment.hpp"
#include "looc/error.hpp"
#include "looc/parallel.hpp"
#include "looc/rng.hpp"
#include "looc/synthdata.hpp"
#include "looc/tensor.hpp"

namespace looc {

enum class SchemeKind : std::uint8_t { LeaveOneOut, AddOne, Baseline };

inline std::string to_string(SchemeKind k) {
    switch (k) {
        case SchemeKind::LeaveOneOut: return "leave_one_out";
        case SchemeKind::AddOne: return "add_one";
        case SchemeKind::Baseline: return "baseline";
    }
    return "?";
}

inline SchemeKind scheme_kind_from_string(const std::string& s) {
    for (SchemeKind k : {SchemeKind::LeaveOneOut, SchemeKind::AddOne, SchemeKind::Baseline})
        if (to_string(k) == s) return k;
    throw ValidationError("unknown scheme '" + s + "' (expected leave_one_out|add_one|baseline)");
}

/// View-generation scheme. `designated` fixes head indexing: head i (i >= 1)
/// belongs to designated[i-1]; head 0 is the all-invariant space.
struct ViewScheme {
    SchemeKind kind = SchemeKind::LeaveOneOut;
    std::vector<AugKind> designated;
    // AddOne only: also switch off crop/flip/blur on the query.
    bool addone_plain_query = false;

    std::size_t n() const { return designated.size(); }
    std::size_t n_keys() const { return designated.size() + 1; }
    std::size_t n_heads() const { return designated.size() + 1; }

    void validate() const {
        if (kind == SchemeKind::Baseline && !designated.empty())
            throw ValidationError("baseline scheme takes no designated augmentations");
        if (kind != SchemeKind::Baseline && designated.empty())
            throw ValidationError(to_string(kind) + " scheme needs at least one designated augmentation");
        for (std::size_t i = 0; i < designated.size(); ++i) {
            if (!is_designated(designated[i]))
                throw ValidationError("'" + to_string(designated[i]) + "' cannot own an embedding space");
            for (std::size_t j = 0; j < i; ++j)
                if (designated[j] == designated[i])
                    throw ValidationError("designated augmentation '" + to_string(designated[i]) + "' listed twice");
        }
    }

    bool operator==(const ViewScheme&) const = default;
};

struct SharedSlot {
    std::size_t key_index;
    AugKind kind;
    bool operator==(const SharedSlot&) const = default;
};

struct ViewSet {
    Tensor query;
    std::vector<Tensor> keys;  // k_0 .. k_n
    AugParams query_params;
    std::vector<AugParams> key_params;
    std::vector<SharedSlot> shared_slots;
};

/// Parameters only; make_views applies them.
struct ViewParams {
    AugParams query;
    std::vector<AugParams> keys;
    std::vector<SharedSlot> shared;
};

inline ViewParams make_view_params(const ViewScheme& scheme, const AugConfig& cfg, const RngStream& rng) {
    ViewParams out;
    out.query = sample_params(cfg, rng.child("q"));
    out.keys.push_back(sample_params(cfg, rng.child("k", {0})));
    switch (scheme.kind) {
        case SchemeKind::Baseline: break;
        case SchemeKind::LeaveOneOut:
            for (std::size_t i = 1; i <= scheme.n(); ++i) {
                AugParams k = sample_params(cfg, rng.child("k", {i}));
                k = copy_slot(k, out.query, scheme.designated[i - 1]);
                out.keys.push_back(k);
                out.shared.push_back(SharedSlot{i, scheme.designated[i - 1]});
            }
            break;
        case SchemeKind::AddOne: {
            // Query carries no designated augmentation; k_0 is an ordinary fully
            // augmented key; k_i carries only designated augmentation i.
            for (AugKind d : kDesignatedKinds) out.query = clear_slot(out.query, d);
            if (scheme.addone_plain_query)
                for (AugKind d : {AugKind::Crop, AugKind::HFlip, AugKind::Blur}) out.query = clear_slot(out.query, d);
            for (std::size_t i = 1; i <= scheme.n(); ++i) {
                AugParams k = sample_params(cfg, rng.child("k", {i}));
                for (AugKind d : kDesignatedKinds)
                    if (d != scheme.designated[i - 1]) k = clear_slot(k, d);
                out.keys.push_back(k);
            }
            break;
        }
    }
    return out;
}

inline ViewSet make_views(const Tensor& image, const ViewScheme& scheme, const AugConfig& cfg, const RngStream& rng) {
    scheme.validate();
    ViewParams vp = make_view_params(scheme, cfg, rng);
    ViewSet vs;
    vs.query = apply(image, vp.query);
    for (const auto& k : vp.keys) vs.keys.push_back(apply(image, k));
    vs.query_params = vp.query;
    vs.key_params = std::move(vp.keys);
    vs.shared_slots = std::move(vp.shared);
    return vs;
}

struct BatchItem {
    const Tensor* pixels;
    std::uint64_t id;  // stable image identity; selects the per-sample stream
};

struct ViewBatch {
    Tensor query;               // [b,3,H,W]
    std::vector<Tensor> keys;   // n+1 tensors of [b,3,H,W]
    std::vector<ViewSet> sets;  // per-sample views and parameters
};

/// Each sample draws from rng.child("sample", {id}); order in the batch does not
/// affect any sample's views, and the thread count does not affect results.
inline ViewBatch make_batch(std::span<const BatchItem> items, const ViewScheme& scheme, const AugConfig& cfg,
                            const RngStream& rng, std::size_t threads = worker_count()) {
    if (items.empty()) throw DimensionError("make_batch: empty batch");
    scheme.validate();
    const Shape& shape = items[0].pixels->shape();
    for (const auto& it : items)
        if (it.pixels->shape() != shape)
            throw DimensionError("make_batch: mixed image sizes " + shape_str(shape) + " vs " +
                                 shape_str(it.pixels->shape()));
    ViewBatch out;
    out.sets.resize(items.size());
    parallel_for(items.size(), threads, [&](std::size_t i) {
        out.sets[i] = make_views(*items[i].pixels, scheme, cfg, rng.child("sample", {items[i].id}));
    });
    std::vector<const Tensor*> ptrs;
    for (const auto& s : out.sets) ptrs.push_back(&s.query);
    out.query = stack_images(ptrs);
    for (std::size_t k = 0; k < scheme.n_keys(); ++k) {
        ptrs.clear();
        for (const auto& s : out.sets) ptrs.push_back(&s.keys[k]);
        out.keys.push_back(stack_images(ptrs));
    }
    return out;
}

}  // namespace looc
