#pragma once

// Shared helpers for the test binaries: random data, finite differences and
// scalar-loop loss oracles evaluated in long double.

#include <cmath>
#include <functional>
#include <vector>

#include "looc/contrast.hpp"
#include "looc/rng.hpp"
#include "looc/tensor.hpp"

namespace looc::testing {

inline Tensor random_tensor(Shape shape, RngStream& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.storage()) v = rng.uniform(lo, hi);
    return t;
}

inline Tensor unit_rows(std::size_t rows, std::size_t dim, RngStream& rng) {
    Tensor t = random_tensor(Shape{rows, dim}, rng);
    for (std::size_t r = 0; r < rows; ++r) {
        double ss = 0.0;
        for (double v : t.row(r)) ss += v * v;
        const double n = std::sqrt(ss);
        for (double& v : t.row(r)) v /= n;
    }
    return t;
}

/// Largest relative error between an analytic gradient and central
/// differences of f around x, |a - n| / max(1e-8, |a| + |n|).
inline double max_rel_error(const Tensor& analytic, Tensor x, const std::function<double(const Tensor&)>& f,
                            double h = 1e-5) {
    double worst = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double fp = f(x);
        x[i] = keep - h;
        const double fm = f(x);
        x[i] = keep;
        const double num = (fp - fm) / (2 * h);
        const double denom = std::max(1e-8, std::abs(analytic[i]) + std::abs(num));
        worst = std::max(worst, std::abs(analytic[i] - num) / denom);
    }
    return worst;
}

using Vec = std::vector<long double>;

inline long double dot(const Vec& a, const Vec& b) {
    long double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline Vec row_of(const Tensor& t, std::size_t r) {
    Vec v;
    for (double x : t.row(r)) v.push_back(x);
    return v;
}

// -log(exp(pos/tau) / sum of exp(all/tau)), written out term by term.
inline long double nll_term(long double pos, const std::vector<long double>& others, long double tau) {
    long double denom = std::exp(pos / tau);
    for (long double o : others) denom += std::exp(o / tau);
    return -std::log(std::exp(pos / tau) / denom);
}

/// Brute-force InfoNCE: every E term enumerated in long double.
inline long double info_nce_oracle(const Tensor& q, const Tensor& k, const Tensor& negatives, double tau) {
    long double total = 0;
    for (std::size_t r = 0; r < q.rows(); ++r) {
        std::vector<long double> neg;
        for (std::size_t j = 0; j < negatives.rows(); ++j) neg.push_back(dot(row_of(q, r), row_of(negatives, j)));
        total += nll_term(dot(row_of(q, r), row_of(k, r)), neg, tau);
    }
    return total / static_cast<long double>(q.rows());
}

/// Brute-force multi-space loss. zq[i]: head-i query embeddings; zk[j][i]: key
/// view j through head i; queues[i]: head-i negatives.
inline long double looc_oracle(const std::vector<Tensor>& zq, const std::vector<std::vector<Tensor>>& zk,
                               const std::vector<Tensor>& queues, double tau) {
    const std::size_t heads = zq.size(), b = zq[0].rows();
    long double sum = 0;
    for (std::size_t i = 0; i < heads; ++i) {
        long double head = 0;
        for (std::size_t r = 0; r < b; ++r) {
            const Vec q = row_of(zq[i], r);
            std::vector<long double> others;
            if (i > 0)
                for (std::size_t j = 0; j < heads; ++j)
                    if (j != i) others.push_back(dot(q, row_of(zk[j][i], r)));
            for (std::size_t n = 0; n < queues[i].rows(); ++n) others.push_back(dot(q, row_of(queues[i], n)));
            head += nll_term(dot(q, row_of(zk[i][i], r)), others, tau);
        }
        sum += head / static_cast<long double>(b);
    }
    return sum / static_cast<long double>(heads);
}

/// Random multi-space instance with per-head queues filled to random levels.
struct LoocInstance {
    std::vector<Tensor> zq;
    std::vector<std::vector<Tensor>> zk;
    std::vector<Tensor> queue_rows;
    QueueBank bank;
};

inline LoocInstance random_looc_instance(std::size_t heads, std::size_t b, std::size_t dim, std::size_t capacity,
                                         RngStream& rng) {
    LoocInstance inst;
    inst.bank = QueueBank(heads, capacity, dim);
    for (std::size_t i = 0; i < heads; ++i) inst.zq.push_back(unit_rows(b, dim, rng));
    inst.zk.resize(heads);
    for (std::size_t j = 0; j < heads; ++j)
        for (std::size_t i = 0; i < heads; ++i) inst.zk[j].push_back(unit_rows(b, dim, rng));
    for (std::size_t i = 0; i < heads; ++i) {
        const std::size_t pushes = capacity ? rng.index(2 * capacity + 1) : 0;
        Tensor rows = unit_rows(std::max<std::size_t>(pushes, 1), dim, rng);
        for (std::size_t p = 0; p < pushes; ++p) inst.bank[i].push(rows.row(p));
        inst.queue_rows.push_back(inst.bank[i].contents());
    }
    return inst;
}

/// Evaluates looc_loss on an instance; returns the scalar total.
inline double looc_value(const LoocInstance& inst, double tau) {
    Tape tape;
    std::vector<Var> q;
    for (const auto& t : inst.zq) q.push_back(tape.constant(t));
    std::vector<std::vector<Var>> k(inst.zk.size());
    for (std::size_t j = 0; j < inst.zk.size(); ++j)
        for (const auto& t : inst.zk[j]) k[j].push_back(tape.constant(t));
    return looc_loss(tape, q, k, inst.bank, tau).report.total;
}

}  // namespace looc::testing
