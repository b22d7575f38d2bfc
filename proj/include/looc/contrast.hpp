#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "looc/error.hpp"
#include "looc/tensor.hpp"

namespace looc {

inline constexpr double kUnitNormTol = 1e-6;

inline void require_unit_rows(const Tensor& t, const char* what) {
    for (std::size_t r = 0; r < t.rows(); ++r) {
        double ss = 0.0;
        for (double v : t.row(r)) ss += v * v;
        if (std::abs(std::sqrt(ss) - 1.0) > kUnitNormTol)
            throw ContractError(std::string(what) + ": row " + std::to_string(r) + " is not unit-norm (norm " +
                                std::to_string(std::sqrt(ss)) + ")");
    }
}

/// FIFO ring buffer of unit-norm vectors.
class Queue {
public:
    Queue() = default;
    Queue(std::size_t capacity, std::size_t dim) : capacity_(capacity), dim_(dim), storage_(capacity * dim, 0.0) {}

    std::size_t capacity() const noexcept { return capacity_; }
    std::size_t dim() const noexcept { return dim_; }
    std::size_t size() const noexcept { return fill_; }

    void push(std::span<const double> v) {
        if (v.size() != dim_)
            throw DimensionError("queue push: vector of " + std::to_string(v.size()) + " into dim " + std::to_string(dim_));
        if (capacity_ == 0) return;
        std::copy(v.begin(), v.end(), storage_.begin() + static_cast<std::ptrdiff_t>(head_ * dim_));
        head_ = (head_ + 1) % capacity_;
        fill_ = std::min(fill_ + 1, capacity_);
    }

    /// Rows of every push still held, oldest first: [size, dim].
    Tensor contents() const {
        Tensor out(Shape{fill_, dim_});
        const std::size_t start = fill_ < capacity_ ? 0 : head_;
        for (std::size_t k = 0; k < fill_; ++k) {
            std::size_t slot = (start + k) % capacity_;
            std::copy(storage_.begin() + static_cast<std::ptrdiff_t>(slot * dim_),
                      storage_.begin() + static_cast<std::ptrdiff_t>((slot + 1) * dim_),
                      out.data().begin() + static_cast<std::ptrdiff_t>(k * dim_));
        }
        return out;
    }

private:
    std::size_t capacity_ = 0;
    std::size_t dim_ = 0;
    std::size_t head_ = 0;
    std::size_t fill_ = 0;
    std::vector<double> storage_;
};

/// One negative queue per embedding space, index-aligned with the heads.
class QueueBank {
public:
    QueueBank() = default;
    QueueBank(std::size_t n_heads, std::size_t capacity, std::size_t dim) : queues_(n_heads, Queue(capacity, dim)) {}

    std::size_t size() const noexcept { return queues_.size(); }
    Queue& operator[](std::size_t i) { return queues_.at(i); }
    const Queue& operator[](std::size_t i) const { return queues_.at(i); }

private:
    std::vector<Queue> queues_;
};

/// Which key view head i's queue receives: k_i (default) or k_0 for every head.
enum class EnqueuePolicy { PerHeadKey, KeyZero };

/// queue i <- keys_per_head[i] (rows enqueued in batch order).
inline void enqueue(QueueBank& bank, std::span<const Tensor> keys_per_head) {
    if (keys_per_head.size() != bank.size())
        throw DimensionError("enqueue: " + std::to_string(keys_per_head.size()) + " key sets for " +
                             std::to_string(bank.size()) + " queues");
    for (std::size_t i = 0; i < bank.size(); ++i) {
        require_unit_rows(keys_per_head[i], "enqueue");
        for (std::size_t r = 0; r < keys_per_head[i].rows(); ++r) bank[i].push(keys_per_head[i].row(r));
    }
}

struct HeadTerm {
    Var loss;            // scalar on the tape
    Tensor logits;       // [b, 1 + extra + K], positive at column 0
    double accuracy = 0.0;
};

namespace contrast_detail {

inline double positive_is_max_rate(const Tensor& logits) {
    std::size_t hits = 0;
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        auto row = logits.row(r);
        bool best = true;
        for (std::size_t j = 1; j < row.size(); ++j)
            if (row[j] > row[0]) best = false;
        hits += best;
    }
    return logits.rows() ? static_cast<double>(hits) / static_cast<double>(logits.rows()) : 0.0;
}

// -log softmax at column 0 of [q.k_pos, q.k_same..., q.negatives] / tau.
inline HeadTerm contrast_term(Tape& tape, Var q, Var k_pos, std::span<const Var> same_instance, const Tensor& negatives,
                              double tau) {
    // Sizes are copied out: tape values move when the tape grows.
    const std::size_t rows = tape.value(q).rows(), dim = tape.value(q).cols();
    std::vector<Var> cols{tape.row_dot(q, k_pos)};
    for (Var k : same_instance) cols.push_back(tape.row_dot(q, k));
    if (negatives.rows() > 0) {
        if (negatives.cols() != dim)
            throw DimensionError("negatives of dim " + std::to_string(negatives.cols()) + " vs embeddings of dim " +
                                 std::to_string(dim));
        cols.push_back(tape.matmul(q, tape.transpose(tape.constant(negatives))));
    }
    Var logits = tape.scale(tape.concat_cols(cols), 1.0 / tau);
    std::vector<std::size_t> targets(rows, 0);
    HeadTerm term;
    term.loss = tape.log_softmax_nll(logits, targets);
    term.logits = tape.value(logits);
    term.accuracy = positive_is_max_rate(term.logits);
    return term;
}

inline void check_tau(double tau) {
    if (!(tau > 0.0)) throw ValidationError("temperature must be > 0");
}

}  // namespace contrast_detail

/// InfoNCE of q against its positive and a detached negative set.
inline HeadTerm info_nce(Tape& tape, Var q, Var k_pos, const Tensor& negatives, double tau) {
    contrast_detail::check_tau(tau);
    const Tensor& Q = tape.value(q);
    if (tape.value(k_pos).shape() != Q.shape())
        throw DimensionError("info_nce: query " + shape_str(Q.shape()) + " vs positive " +
                             shape_str(tape.value(k_pos).shape()));
    require_unit_rows(Q, "info_nce query");
    require_unit_rows(tape.value(k_pos), "info_nce positive");
    require_unit_rows(negatives, "info_nce negatives");
    return contrast_detail::contrast_term(tape, q, tape.detach(k_pos), {}, negatives, tau);
}

struct LossReport {
    double total = 0.0;
    std::vector<double> per_head;
    std::vector<double> per_head_accuracy;
};

struct LoocLoss {
    Var total;  // scalar on the tape
    LossReport report;
    std::vector<Tensor> logits;  // per head
};

/// Multi-space objective over n+1 heads.
///
/// z_keys[j][i] is key view k_j projected through head i. Head 0 contrasts
/// z_q[0] with z_keys[0][0] against queue 0. Head i >= 1 contrasts z_q[i] with
/// z_keys[i][i]; the same-instance views z_keys[j][i] (j != i) and queue i act
/// as negatives. Keys and queue contents are detached. The total is the
/// arithmetic mean of the n+1 head terms.
inline LoocLoss looc_loss(Tape& tape, std::span<const Var> z_q, const std::vector<std::vector<Var>>& z_keys,
                          const QueueBank& bank, double tau) {
    contrast_detail::check_tau(tau);
    const std::size_t heads = z_q.size();
    if (heads == 0) throw DimensionError("looc_loss: no heads");
    if (z_keys.size() != heads || bank.size() != heads)
        throw DimensionError("looc_loss: " + std::to_string(heads) + " heads but " + std::to_string(z_keys.size()) +
                             " key views and " + std::to_string(bank.size()) + " queues");
    const Shape shape = tape.value(z_q[0]).shape();
    for (std::size_t i = 0; i < heads; ++i) {
        if (tape.value(z_q[i]).shape() != shape)
            throw DimensionError("looc_loss: query head " + std::to_string(i) + " has shape " +
                                 shape_str(tape.value(z_q[i]).shape()) + ", expected " + shape_str(shape));
        require_unit_rows(tape.value(z_q[i]), "looc_loss query");
        if (z_keys[i].size() != heads)
            throw DimensionError("looc_loss: key view " + std::to_string(i) + " projected through " +
                                 std::to_string(z_keys[i].size()) + " heads, expected " + std::to_string(heads));
        for (std::size_t h = 0; h < heads; ++h) {
            if (tape.value(z_keys[i][h]).shape() != shape)
                throw DimensionError("looc_loss: key view " + std::to_string(i) + " head " + std::to_string(h) +
                                     " has shape " + shape_str(tape.value(z_keys[i][h]).shape()));
            require_unit_rows(tape.value(z_keys[i][h]), "looc_loss key");
        }
    }

    LoocLoss out;
    Var sum;
    for (std::size_t i = 0; i < heads; ++i) {
        const Tensor negatives = bank[i].contents();
        require_unit_rows(negatives, "looc_loss queue");
        Var pos = tape.detach(z_keys[i][i]);
        std::vector<Var> same;
        if (i > 0)
            for (std::size_t j = 0; j < heads; ++j)
                if (j != i) same.push_back(tape.detach(z_keys[j][i]));
        HeadTerm term = contrast_detail::contrast_term(tape, z_q[i], pos, same, negatives, tau);
        out.report.per_head.push_back(tape.value(term.loss).item());
        out.report.per_head_accuracy.push_back(term.accuracy);
        out.logits.push_back(std::move(term.logits));
        sum = i == 0 ? term.loss : tape.add(sum, term.loss);
    }
    out.total = heads == 1 ? sum : tape.scale(sum, 1.0 / static_cast<double>(heads));
    out.report.total = tape.value(out.total).item();
    return out;
}

}  // namespace looc
