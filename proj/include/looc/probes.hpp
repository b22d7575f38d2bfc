#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "looc/error.hpp"
#include "looc/model.hpp"
#include "looc/rng.hpp"
#include "looc/synthdata.hpp"
#include "looc/tensor.hpp"

namespace looc {

/// Which frozen features a probe reads.
struct FeatureSource {
    enum class Kind { LoocV, LoocppConcat, SingleHead, MaskedSubset };
    Kind kind = Kind::LoocV;
    std::vector<std::size_t> heads;  // SingleHead: one entry; MaskedSubset: the subset

    static FeatureSource looc_v() { return {}; }
    static FeatureSource loocpp() { return {Kind::LoocppConcat, {}}; }
    static FeatureSource head(std::size_t i) { return {Kind::SingleHead, {i}}; }
    static FeatureSource mask(std::vector<std::size_t> s) { return {Kind::MaskedSubset, std::move(s)}; }

    /// Accepts looc_v | loocpp | head:i | mask:i,j,...
    static FeatureSource parse(const std::string& s) {
        if (s == "looc_v") return looc_v();
        if (s == "loocpp") return loocpp();
        auto parse_list = [&](const std::string& body) {
            std::vector<std::size_t> out;
            std::size_t pos = 0;
            while (pos <= body.size()) {
                std::size_t comma = body.find(',', pos);
                std::string item = body.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
                if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos)
                    throw ValidationError("bad head index '" + item + "' in feature source '" + s + "'");
                out.push_back(std::stoul(item));
                if (comma == std::string::npos) break;
                pos = comma + 1;
            }
            return out;
        };
        if (s.rfind("head:", 0) == 0) {
            auto l = parse_list(s.substr(5));
            if (l.size() != 1) throw ValidationError("head: takes exactly one index");
            return head(l[0]);
        }
        if (s.rfind("mask:", 0) == 0) return mask(parse_list(s.substr(5)));
        throw ValidationError("unknown feature source '" + s + "' (expected looc_v|loocpp|head:i|mask:i,j)");
    }

    std::string str() const {
        switch (kind) {
            case Kind::LoocV: return "looc_v";
            case Kind::LoocppConcat: return "loocpp";
            case Kind::SingleHead: return "head:" + std::to_string(heads.at(0));
            case Kind::MaskedSubset: {
                std::string s = "mask:";
                for (std::size_t i = 0; i < heads.size(); ++i) s += (i ? "," : "") + std::to_string(heads[i]);
                return s;
            }
        }
        return "?";
    }

    /// Throws when a head index is out of range or adapters are missing.
    void validate(const Network& net) const {
        if (kind == Kind::LoocV) return;
        if (!net.cfg().plusplus) throw ValidationError("feature source '" + str() + "' needs a LooC++ model");
        if (kind == Kind::MaskedSubset && heads.empty()) throw ValidationError("mask: needs at least one head");
        for (std::size_t h : heads)
            if (h >= net.n_heads())
                throw ValidationError("head index " + std::to_string(h) + " out of range for " +
                                      std::to_string(net.n_heads()) + " heads");
    }

    /// Width of each head slice, in concatenation order (empty for looc_v).
    std::vector<std::size_t> slice_widths(const Network& net) const {
        std::vector<std::size_t> out;
        if (kind == Kind::LoocV) return out;
        std::size_t n = kind == Kind::LoocppConcat ? net.n_heads() : heads.size();
        out.assign(n, net.cfg().adapter_width);
        return out;
    }
};

/// Frozen forward pass over images in chunks; returns [N, D].
inline Tensor extract_features(const Network& net, const Dataset& images, const FeatureSource& src,
                               std::size_t chunk = 256) {
    src.validate(net);
    if (images.empty()) throw DimensionError("extract_features: no images");
    std::vector<Tensor> parts;
    for (std::size_t start = 0; start < images.size(); start += chunk) {
        std::vector<const Tensor*> ptrs;
        for (std::size_t i = start; i < std::min(images.size(), start + chunk); ++i) ptrs.push_back(&images[i].pixels);
        KeyOutputs out = forward_key(net, stack_images(ptrs));
        switch (src.kind) {
            case FeatureSource::Kind::LoocV: parts.push_back(representation(RepresentationKind::Looc, out)); break;
            case FeatureSource::Kind::LoocppConcat:
                parts.push_back(representation(RepresentationKind::LoocPlusPlus, out));
                break;
            default: parts.push_back(representation(RepresentationKind::LoocPlusPlus, out, src.heads)); break;
        }
    }
    const std::size_t d = parts[0].cols();
    Tensor all(Shape{images.size(), d});
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), all.data().begin() + static_cast<std::ptrdiff_t>(off));
        off += p.numel();
    }
    return all;
}

inline std::uint64_t parameter_checksum(const Network& net) {
    std::uint64_t h = 0x12345678ULL;
    for (const Tensor* t : net.params())
        for (double v : t->data()) h = splitmix64(h ^ std::bit_cast<std::uint64_t>(v));
    return h;
}

/// How probe features are normalised before the linear layer.
/// CenterL2: subtract the training mean, then scale every row to unit norm.
/// Standardize: per-dimension z-score divided by sqrt(D).
enum class FeatureNorm { CenterL2, Standardize };

/// Softmax linear classifier over normalised features.
struct LinearClassifier {
    FeatureNorm norm = FeatureNorm::CenterL2;
    std::vector<double> mean;
    std::vector<double> scale;  // per-dimension factor (all 1 for CenterL2)
    Tensor weight;              // [D, C]
    Tensor bias;                // [C]

    std::size_t n_classes() const { return bias.numel(); }

    Tensor transform(const Tensor& x) const {
        if (x.cols() != mean.size())
            throw DimensionError("classifier expects " + std::to_string(mean.size()) + " features, got " +
                                 std::to_string(x.cols()));
        Tensor out = x;
        for (std::size_t r = 0; r < x.rows(); ++r) {
            auto row = out.row(r);
            double ss = 0.0;
            for (std::size_t c = 0; c < row.size(); ++c) {
                row[c] = (row[c] - mean[c]) * scale[c];
                ss += row[c] * row[c];
            }
            if (norm == FeatureNorm::CenterL2 && ss > 0.0) {
                const double inv = 1.0 / std::sqrt(ss);
                for (double& v : row) v *= inv;
            }
        }
        return out;
    }

    /// Logits of already-transformed features.
    Tensor logits_transformed(const Tensor& xt) const {
        Tensor out(Shape{xt.rows(), n_classes()});
        kernels::gemm(xt, false, weight, false, out, false);
        for (std::size_t r = 0; r < out.rows(); ++r)
            for (std::size_t c = 0; c < n_classes(); ++c) out.at(r, c) += bias[c];
        return out;
    }

    Tensor logits(const Tensor& x) const { return logits_transformed(transform(x)); }
};

namespace probe_detail {

inline std::size_t argmax(std::span<const double> row) {
    return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

inline double topk_accuracy(const Tensor& logits, std::span<const std::uint32_t> labels, std::size_t k) {
    std::size_t hits = 0;
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        auto row = logits.row(r);
        const double target = row[labels[r]];
        std::size_t better = 0;
        for (std::size_t c = 0; c < row.size(); ++c)
            if (row[c] > target || (row[c] == target && c < labels[r])) ++better;
        hits += better < k;
    }
    return logits.rows() ? static_cast<double>(hits) / static_cast<double>(logits.rows()) : 0.0;
}

inline void fit_standardizer(const Tensor& x, LinearClassifier& clf) {
    const std::size_t d = x.cols(), n = x.rows();
    clf.mean.assign(d, 0.0);
    clf.scale.assign(d, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) clf.mean[c] += x.at(r, c);
    for (double& m : clf.mean) m /= static_cast<double>(n);
    std::vector<double> var(d, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) {
            double e = x.at(r, c) - clf.mean[c];
            var[c] += e * e;
        }
    const double root_d = std::sqrt(static_cast<double>(d));
    for (std::size_t c = 0; c < d; ++c) {
        double sd = std::sqrt(var[c] / static_cast<double>(n));
        if (clf.norm == FeatureNorm::CenterL2) clf.scale[c] = 1.0;
        else clf.scale[c] = sd > 1e-12 ? 1.0 / (sd * root_d) : 0.0;
    }
}

// Softmax cross-entropy gradient on a row subset; returns mean loss.
inline double softmax_grad(const Tensor& xt, std::span<const std::uint32_t> y, std::span<const std::size_t> rows,
                           const Tensor& w, const Tensor& b, Tensor& gw, Tensor& gb) {
    const std::size_t d = xt.cols(), c = b.numel();
    std::fill(gw.storage().begin(), gw.storage().end(), 0.0);
    std::fill(gb.storage().begin(), gb.storage().end(), 0.0);
    std::vector<double> z(c);
    double loss = 0.0;
    const double inv = 1.0 / static_cast<double>(rows.size());
    for (std::size_t r : rows) {
        auto x = xt.row(r);
        for (std::size_t k = 0; k < c; ++k) z[k] = b[k];
        for (std::size_t j = 0; j < d; ++j) {
            if (x[j] == 0.0) continue;
            const double* wr = w.data().data() + j * c;
            for (std::size_t k = 0; k < c; ++k) z[k] += x[j] * wr[k];
        }
        double mx = *std::max_element(z.begin(), z.end()), s = 0.0;
        for (double& v : z) s += (v = std::exp(v - mx));
        loss -= std::log(z[y[r]] / s);
        for (std::size_t k = 0; k < c; ++k) z[k] = (z[k] / s - (k == y[r] ? 1.0 : 0.0)) * inv;
        for (std::size_t j = 0; j < d; ++j) {
            if (x[j] == 0.0) continue;
            double* g = gw.data().data() + j * c;
            for (std::size_t k = 0; k < c; ++k) g[k] += x[j] * z[k];
        }
        for (std::size_t k = 0; k < c; ++k) gb[k] += z[k];
    }
    return loss * inv;
}

inline std::size_t n_classes_of(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b = {}) {
    std::uint32_t mx = 0;
    for (auto v : a) mx = std::max(mx, v);
    for (auto v : b) mx = std::max(mx, v);
    return static_cast<std::size_t>(mx) + 1;
}

}  // namespace probe_detail

struct LinearProbeCfg {
    std::size_t epochs = 100;
    std::size_t batch = 64;
    std::vector<double> lrs{30.0, 3.0, 0.3};
    double momentum = 0.9;
    double val_fraction = 0.2;  // carved from training data when no validation split is given
    std::uint64_t seed = 0;
    FeatureNorm norm = FeatureNorm::CenterL2;
};

/// Momentum-SGD softmax regression with lr drops (x0.1) at 60% and 80% of the
/// schedule. Returns the trained classifier (or a zero classifier on divergence).
inline LinearClassifier train_linear_classifier(const Tensor& x, std::span<const std::uint32_t> y, std::size_t n_classes,
                                                double lr, const LinearProbeCfg& cfg) {
    LinearClassifier clf;
    clf.norm = cfg.norm;
    probe_detail::fit_standardizer(x, clf);
    const Tensor xt = clf.transform(x);
    const std::size_t d = x.cols();
    clf.weight = Tensor(Shape{d, n_classes}, 0.0);
    clf.bias = Tensor(Shape{n_classes}, 0.0);
    Tensor gw(clf.weight.shape()), gb(clf.bias.shape());
    Tensor vw(clf.weight.shape(), 0.0), vb(clf.bias.shape(), 0.0);
    std::vector<std::size_t> order(x.rows());
    std::iota(order.begin(), order.end(), std::size_t{0});
    RngStream rng = RngStream(cfg.seed).child("probe-order");
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        double step_lr = lr;
        if (static_cast<double>(e) >= 0.6 * static_cast<double>(cfg.epochs)) step_lr *= 0.1;
        if (static_cast<double>(e) >= 0.8 * static_cast<double>(cfg.epochs)) step_lr *= 0.1;
        rng.shuffle(order);
        for (std::size_t s = 0; s < order.size(); s += cfg.batch) {
            std::span<const std::size_t> rows(order.data() + s, std::min(cfg.batch, order.size() - s));
            double loss = probe_detail::softmax_grad(xt, y, rows, clf.weight, clf.bias, gw, gb);
            if (!std::isfinite(loss)) {
                std::fill(clf.weight.storage().begin(), clf.weight.storage().end(), 0.0);
                std::fill(clf.bias.storage().begin(), clf.bias.storage().end(), 0.0);
                return clf;
            }
            for (std::size_t i = 0; i < vw.numel(); ++i) {
                vw[i] = cfg.momentum * vw[i] + gw[i];
                clf.weight[i] -= step_lr * vw[i];
            }
            for (std::size_t i = 0; i < vb.numel(); ++i) {
                vb[i] = cfg.momentum * vb[i] + gb[i];
                clf.bias[i] -= step_lr * vb[i];
            }
        }
    }
    return clf;
}

struct ProbeResult {
    double top1 = 0.0;
    std::optional<double> top5;  // defined for >= 6 classes
    double lr = 0.0;
    double val_top1 = 0.0;
    std::size_t n_classes = 0;
    LinearClassifier classifier;
};

inline Tensor take_rows(const Tensor& x, std::span<const std::size_t> rows) {
    Tensor out(Shape{rows.size(), x.cols()});
    for (std::size_t i = 0; i < rows.size(); ++i) std::copy(x.row(rows[i]).begin(), x.row(rows[i]).end(), out.row(i).begin());
    return out;
}

/// Linear probe on frozen features. The learning rate is chosen from cfg.lrs
/// by validation accuracy (validation split given, or carved stratified from
/// the training data); the final classifier is retrained on all training rows.
inline ProbeResult linear_probe(const Tensor& x_train, std::span<const std::uint32_t> y_train, const Tensor& x_test,
                                std::span<const std::uint32_t> y_test, const LinearProbeCfg& cfg = {},
                                const Tensor* x_val = nullptr, std::span<const std::uint32_t> y_val = {}) {
    if (x_train.rows() != y_train.size() || x_test.rows() != y_test.size())
        throw DimensionError("linear_probe: feature/label counts differ");
    if (x_train.cols() != x_test.cols()) throw DimensionError("linear_probe: train/test feature dims differ");
    const std::size_t n_classes = probe_detail::n_classes_of(y_train, y_test);
    std::vector<std::size_t> per_class(n_classes, 0);
    for (auto v : y_train) ++per_class[v];
    for (std::size_t c = 0; c < n_classes; ++c)
        if (per_class[c] == 0) throw ProbeError("class " + std::to_string(c) + " absent from the training split");

    Tensor fit_x, val_x;
    std::vector<std::uint32_t> fit_y, val_y;
    if (x_val) {
        fit_x = x_train;
        fit_y.assign(y_train.begin(), y_train.end());
        val_x = *x_val;
        val_y.assign(y_val.begin(), y_val.end());
    } else {
        std::vector<std::vector<std::size_t>> by_class(n_classes);
        for (std::size_t i = 0; i < y_train.size(); ++i) by_class[y_train[i]].push_back(i);
        RngStream rng = RngStream(cfg.seed).child("probe-val");
        std::vector<std::size_t> fit_rows, val_rows;
        for (auto& rows : by_class) {
            rng.shuffle(rows);
            std::size_t nv = rows.size() > 1 ? std::max<std::size_t>(1, static_cast<std::size_t>(cfg.val_fraction * rows.size())) : 0;
            for (std::size_t k = 0; k < rows.size(); ++k) (k < nv ? val_rows : fit_rows).push_back(rows[k]);
        }
        std::sort(fit_rows.begin(), fit_rows.end());
        std::sort(val_rows.begin(), val_rows.end());
        fit_x = take_rows(x_train, fit_rows);
        val_x = take_rows(x_train, val_rows);
        for (auto r : fit_rows) fit_y.push_back(y_train[r]);
        for (auto r : val_rows) val_y.push_back(y_train[r]);
    }

    ProbeResult best;
    best.val_top1 = -1.0;
    for (double lr : cfg.lrs) {
        LinearClassifier clf = train_linear_classifier(fit_x, fit_y, n_classes, lr, cfg);
        double acc = val_y.empty() ? 0.0 : probe_detail::topk_accuracy(clf.logits(val_x), val_y, 1);
        if (acc > best.val_top1) {
            best.val_top1 = acc;
            best.lr = lr;
        }
    }
    best.classifier = train_linear_classifier(x_train, y_train, n_classes, best.lr, cfg);
    const Tensor logits = best.classifier.logits(x_test);
    best.top1 = probe_detail::topk_accuracy(logits, y_test, 1);
    if (n_classes >= 6) best.top5 = probe_detail::topk_accuracy(logits, y_test, 5);
    best.n_classes = n_classes;
    return best;
}

/// Train / validation / test images for one probe. Without a validation set
/// the learning rate is selected on a slice carved from the training images.
struct ProbeSplits {
    const Dataset* train = nullptr;
    const Dataset* val = nullptr;
    const Dataset* test = nullptr;
};

/// Probe of one factor on frozen features. Pose targets use explicitly rotated
/// copies (quarter turns 0..3) of every split; other factors use the
/// canonical-pose images.
inline ProbeResult factor_probe(const Network& net, const FeatureSource& src, Factor target, const ProbeSplits& data,
                                const LinearProbeCfg& cfg = {}) {
    if (!data.train || !data.test) throw ValidationError("factor_probe needs train and test images");
    const std::uint64_t before = parameter_checksum(net);
    auto prep = [&](const Dataset& d) { return target == Factor::Pose ? rotated_probe_set(d) : d; };
    const Dataset tr = prep(*data.train), te = prep(*data.test);
    ProbeResult r;
    if (data.val) {
        const Dataset va = prep(*data.val);
        const Tensor xv = extract_features(net, va, src);
        r = linear_probe(extract_features(net, tr, src), labels_of(tr, target), extract_features(net, te, src),
                         labels_of(te, target), cfg, &xv, labels_of(va, target));
    } else {
        r = linear_probe(extract_features(net, tr, src), labels_of(tr, target), extract_features(net, te, src),
                         labels_of(te, target), cfg);
    }
    if (parameter_checksum(net) != before) throw ContractError("probe mutated encoder parameters");
    return r;
}

struct RotationProbeResult {
    double pose_accuracy = 0.0;
    double object_accuracy = 0.0;
};

/// Pose accuracy on rotated copies and object (shape_id) accuracy on
/// canonical-pose images, both read from the same feature source.
inline RotationProbeResult rotation_probe(const Network& net, const FeatureSource& src, const ProbeSplits& data,
                                          const LinearProbeCfg& cfg = {}) {
    return {factor_probe(net, src, Factor::Pose, data, cfg).top1, factor_probe(net, src, Factor::Shape, data, cfg).top1};
}

struct EpisodeCfg {
    std::size_t k_shot = 5;
    std::size_t n_trials = 10;
    double confidence = 0.95;
    std::size_t iterations = 250;  // Adam steps
    double lr = 0.03;
    std::uint64_t seed = 0;
};

struct FewShotResult {
    double mean = 0.0;
    double half_width = 0.0;  // of the normal-approximation confidence interval
    std::vector<double> trials;
};

inline double normal_quantile_two_sided(double confidence) {
    // Inverse of the standard normal CDF at (1+confidence)/2 by bisection on erfc.
    const double target = (1.0 + confidence) / 2.0;
    double lo = 0.0, hi = 10.0;
    for (int it = 0; it < 200; ++it) {
        double mid = 0.5 * (lo + hi);
        double cdf = 0.5 * std::erfc(-mid / std::sqrt(2.0));
        (cdf < target ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

/// k-shot episodes: per trial, k support samples per class train a softmax
/// layer (Adam, full batch) and every other sample is a query.
inline FewShotResult few_shot(const Tensor& features, std::span<const std::uint32_t> labels, const EpisodeCfg& cfg) {
    if (features.rows() != labels.size()) throw DimensionError("few_shot: feature/label counts differ");
    if (cfg.n_trials < 1 || cfg.k_shot < 1) throw EpisodeError("few_shot needs k_shot >= 1 and n_trials >= 1");
    const std::size_t n_classes = probe_detail::n_classes_of(labels);
    std::vector<std::vector<std::size_t>> pools(n_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) pools[labels[i]].push_back(i);
    for (std::size_t c = 0; c < n_classes; ++c)
        if (pools[c].size() < cfg.k_shot + 1)
            throw EpisodeError("class " + std::to_string(c) + " has " + std::to_string(pools[c].size()) +
                               " samples; " + std::to_string(cfg.k_shot) + "-shot episodes need at least " +
                               std::to_string(cfg.k_shot + 1));
    FewShotResult out;
    const RngStream root = RngStream(cfg.seed).child("episodes", {cfg.k_shot});
    for (std::size_t t = 0; t < cfg.n_trials; ++t) {
        RngStream rng = root.child("trial", {t});
        std::vector<std::size_t> support, query;
        for (std::size_t c = 0; c < n_classes; ++c) {
            auto pool = pools[c];
            rng.shuffle(pool);
            for (std::size_t k = 0; k < pool.size(); ++k) (k < cfg.k_shot ? support : query).push_back(pool[k]);
        }
        std::sort(support.begin(), support.end());
        std::sort(query.begin(), query.end());
        Tensor xs = take_rows(features, support), xq = take_rows(features, query);
        std::vector<std::uint32_t> ys, yq;
        for (auto i : support) ys.push_back(labels[i]);
        for (auto i : query) yq.push_back(labels[i]);

        LinearClassifier clf;
        probe_detail::fit_standardizer(xs, clf);
        const Tensor xt = clf.transform(xs);
        clf.weight = Tensor(Shape{xs.cols(), n_classes}, 0.0);
        clf.bias = Tensor(Shape{n_classes}, 0.0);
        Tensor gw(clf.weight.shape()), gb(clf.bias.shape());
        std::vector<double> m1(clf.weight.numel() + n_classes, 0.0), m2(m1.size(), 0.0);
        std::vector<std::size_t> all(support.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        for (std::size_t it = 1; it <= cfg.iterations; ++it) {
            probe_detail::softmax_grad(xt, ys, all, clf.weight, clf.bias, gw, gb);
            const double c1 = 1 - std::pow(b1, static_cast<double>(it)), c2 = 1 - std::pow(b2, static_cast<double>(it));
            auto upd = [&](double& p, double g, std::size_t slot) {
                m1[slot] = b1 * m1[slot] + (1 - b1) * g;
                m2[slot] = b2 * m2[slot] + (1 - b2) * g * g;
                p -= cfg.lr * (m1[slot] / c1) / (std::sqrt(m2[slot] / c2) + eps);
            };
            for (std::size_t i = 0; i < clf.weight.numel(); ++i) upd(clf.weight[i], gw[i], i);
            for (std::size_t i = 0; i < n_classes; ++i) upd(clf.bias[i], gb[i], clf.weight.numel() + i);
        }
        out.trials.push_back(probe_detail::topk_accuracy(clf.logits(xq), yq, 1));
    }
    const double n = static_cast<double>(out.trials.size());
    out.mean = std::accumulate(out.trials.begin(), out.trials.end(), 0.0) / n;
    if (out.trials.size() > 1) {
        double ss = 0.0;
        for (double a : out.trials) ss += (a - out.mean) * (a - out.mean);
        out.half_width = normal_quantile_two_sided(cfg.confidence) * std::sqrt(ss / (n - 1)) / std::sqrt(n);
    }
    return out;
}

/// Cosine-similarity ranking of the gallery for every query row; ties go to
/// the lower gallery index. Zero rows have similarity 0 to everything.
inline std::vector<std::vector<std::size_t>> nn_retrieve(const Tensor& queries, const Tensor& gallery, std::size_t top_k) {
    if (gallery.rows() == 0) throw ValidationError("nn_retrieve: empty gallery");
    if (queries.cols() != gallery.cols())
        throw DimensionError("nn_retrieve: query dim " + std::to_string(queries.cols()) + " vs gallery dim " +
                             std::to_string(gallery.cols()));
    auto norms = [](const Tensor& t) {
        std::vector<double> n(t.rows());
        for (std::size_t r = 0; r < t.rows(); ++r) {
            double s = 0.0;
            for (double v : t.row(r)) s += v * v;
            n[r] = std::sqrt(s);
        }
        return n;
    };
    const auto qn = norms(queries), gn = norms(gallery);
    Tensor sims(Shape{queries.rows(), gallery.rows()});
    kernels::gemm(queries, false, gallery, true, sims, false);
    top_k = std::min(top_k, gallery.rows());
    std::vector<std::vector<std::size_t>> out(queries.rows());
    std::vector<std::size_t> idx(gallery.rows());
    for (std::size_t q = 0; q < queries.rows(); ++q) {
        std::vector<double> s(gallery.rows());
        for (std::size_t g = 0; g < gallery.rows(); ++g)
            s[g] = qn[q] > 0 && gn[g] > 0 ? sims.at(q, g) / (qn[q] * gn[g]) : 0.0;
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(top_k), idx.end(),
                          [&](std::size_t a, std::size_t b) { return s[a] > s[b] || (s[a] == s[b] && a < b); });
        out[q].assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(top_k));
    }
    return out;
}

/// Fraction of retrieved neighbours whose label equals the query's label.
inline double retrieval_agreement(const std::vector<std::vector<std::size_t>>& ranks,
                                  std::span<const std::uint32_t> query_labels,
                                  std::span<const std::uint32_t> gallery_labels) {
    std::size_t hit = 0, total = 0;
    for (std::size_t q = 0; q < ranks.size(); ++q)
        for (std::size_t g : ranks[q]) {
            hit += gallery_labels[g] == query_labels[q];
            ++total;
        }
    return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

struct HeadContributions {
    std::vector<std::size_t> samples;  // rows that were classified correctly
    Tensor shares;                     // [samples, heads], rows sum to 1
    std::vector<double> histogram;     // mean share per head
    double entropy_bits = 0.0;
};

inline double entropy_bits(std::span<const double> p) {
    double h = 0.0;
    for (double v : p)
        if (v > 0.0) h -= v * std::log2(v);
    return h;
}

/// Splits the correct-class logit (bias excluded) of each correctly classified
/// row into per-head terms sum_{j in slice h} w[j, y] x[j]. Terms are shifted
/// by the row minimum and normalised to sum 1; an all-equal row gets uniform
/// shares.
inline HeadContributions head_contributions(const Tensor& features, std::span<const std::uint32_t> labels,
                                            const Tensor& weight, const Tensor& bias,
                                            std::span<const std::size_t> slice_widths) {
    const std::size_t d = std::accumulate(slice_widths.begin(), slice_widths.end(), std::size_t{0});
    if (features.cols() != d || weight.rows() != d)
        throw DimensionError("head_contributions: features " + shape_str(features.shape()) + ", weight " +
                             shape_str(weight.shape()) + ", slices total " + std::to_string(d));
    if (bias.numel() != weight.cols()) throw DimensionError("head_contributions: bias/weight class count differ");
    if (labels.size() != features.rows()) throw DimensionError("head_contributions: label count differs");
    const std::size_t heads = slice_widths.size(), classes = weight.cols();
    HeadContributions out;
    std::vector<std::vector<double>> rows;
    for (std::size_t r = 0; r < features.rows(); ++r) {
        auto x = features.row(r);
        std::vector<double> logit(classes);
        for (std::size_t c = 0; c < classes; ++c) {
            double s = bias[c];
            for (std::size_t j = 0; j < d; ++j) s += x[j] * weight.at(j, c);
            logit[c] = s;
        }
        if (probe_detail::argmax(logit) != labels[r]) continue;
        std::vector<double> contrib(heads, 0.0);
        std::size_t off = 0;
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t j = off; j < off + slice_widths[h]; ++j) contrib[h] += x[j] * weight.at(j, labels[r]);
            off += slice_widths[h];
        }
        const double mn = *std::min_element(contrib.begin(), contrib.end());
        double total = 0.0;
        for (double& c : contrib) total += (c -= mn);
        for (double& c : contrib) c = total > 0.0 ? c / total : 1.0 / static_cast<double>(heads);
        out.samples.push_back(r);
        rows.push_back(std::move(contrib));
    }
    out.shares = Tensor(Shape{rows.size(), heads});
    out.histogram.assign(heads, 0.0);
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t h = 0; h < heads; ++h) {
            out.shares.at(i, h) = rows[i][h];
            out.histogram[h] += rows[i][h];
        }
    if (!rows.empty())
        for (double& v : out.histogram) v /= static_cast<double>(rows.size());
    out.entropy_bits = entropy_bits(out.histogram);
    return out;
}

}  // namespace looc
