#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "looc/augment.hpp"
#include "looc/contrast.hpp"
#include "looc/error.hpp"
#include "looc/model.hpp"
#include "looc/rng.hpp"
#include "looc/synthdata.hpp"
#include "looc/tensor.hpp"
#include "looc/tensor_file.hpp"
#include "looc/viewgen.hpp"

namespace looc {

struct TrainCfg {
    std::size_t epochs = 60;
    std::size_t batch = 64;
    double lr = 0.01;
    double momentum = 0.9;
    std::array<double, 2> lr_drops{0.6, 0.8};  // fractions of the schedule, each multiplies lr by 0.1
    std::uint64_t seed = 0;
    std::size_t checkpoint_every = 0;  // epochs; 0 = only at the end
    std::size_t queue_size = 512;
    double temperature = 0.2;
    double key_momentum = 0.999;
    EnqueuePolicy enqueue = EnqueuePolicy::PerHeadKey;

    void validate() const {
        if (epochs < 1) throw ValidationError("epochs must be >= 1");
        if (batch < 2) throw ValidationError("batch must be >= 2");
        if (!(lr > 0.0)) throw ValidationError("lr must be > 0");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("momentum must lie in [0,1)");
        if (!(key_momentum >= 0.0 && key_momentum <= 1.0)) throw ValidationError("key_momentum must lie in [0,1]");
        if (!(temperature > 0.0)) throw ValidationError("temperature must be > 0");
    }
};

/// Learning rate in effect during `epoch` (0-based).
inline double lr_at_epoch(const TrainCfg& cfg, std::size_t epoch) {
    double lr = cfg.lr;
    for (double f : cfg.lr_drops)
        if (static_cast<double>(epoch) >= std::floor(f * static_cast<double>(cfg.epochs) + 1e-9)) lr *= 0.1;
    return lr;
}

struct StepRecord {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double lr = 0.0;
    double loss_total = 0.0;
    std::vector<double> loss;
    std::vector<double> acc;
};

/// Append-only per-step metrics.
class RunMetrics {
public:
    explicit RunMetrics(std::size_t n_heads = 1) : n_heads_(n_heads) {}

    void append(StepRecord rec) {
        if (!rows_.empty() && rec.step <= rows_.back().step)
            throw ContractError("metrics step " + std::to_string(rec.step) + " does not increase");
        rows_.push_back(std::move(rec));
    }

    const std::vector<StepRecord>& rows() const noexcept { return rows_; }
    std::size_t n_heads() const noexcept { return n_heads_; }

    static std::string fmt(double v) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return buf;
    }

    std::string header() const {
        std::string h = "step,epoch,lr,loss_total";
        for (std::size_t i = 0; i < n_heads_; ++i) h += ",loss_h" + std::to_string(i);
        for (std::size_t i = 0; i < n_heads_; ++i) h += ",acc_h" + std::to_string(i);
        return h;
    }

    std::string row_csv(const StepRecord& r) const {
        std::string s = std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + fmt(r.lr) + "," + fmt(r.loss_total);
        for (double v : r.loss) s += "," + fmt(v);
        for (double v : r.acc) s += "," + fmt(v);
        return s;
    }

    std::string csv() const {
        std::string out = header() + "\n";
        for (const auto& r : rows_) out += row_csv(r) + "\n";
        return out;
    }

    static RunMetrics parse_csv(const std::string& text, std::size_t n_heads) {
        RunMetrics m(n_heads);
        std::istringstream is(text);
        std::string line;
        std::getline(is, line);
        if (line != m.header()) throw FormatError("metrics.csv header mismatch", 0);
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            std::vector<std::string> f;
            std::stringstream ls(line);
            for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
            if (f.size() != 4 + 2 * n_heads) throw FormatError("metrics.csv row has wrong field count", 0);
            StepRecord r;
            r.step = std::stoull(f[0]);
            r.epoch = std::stoull(f[1]);
            r.lr = std::stod(f[2]);
            r.loss_total = std::stod(f[3]);
            for (std::size_t i = 0; i < n_heads; ++i) r.loss.push_back(std::stod(f[4 + i]));
            for (std::size_t i = 0; i < n_heads; ++i) r.acc.push_back(std::stod(f[4 + n_heads + i]));
            m.append(std::move(r));
        }
        return m;
    }

    /// Mean accuracy of `head` over all steps of the given epochs [first, last].
    double mean_accuracy(std::size_t head, std::size_t first_epoch, std::size_t last_epoch) const {
        double s = 0.0;
        std::size_t n = 0;
        for (const auto& r : rows_)
            if (r.epoch >= first_epoch && r.epoch <= last_epoch) {
                s += r.acc.at(head);
                ++n;
            }
        return n ? s / static_cast<double>(n) : 0.0;
    }

private:
    std::size_t n_heads_;
    std::vector<StepRecord> rows_;
};

/// Everything that defines a pretraining run.
struct RunSetup {
    TrainCfg train;
    EncoderCfg encoder;
    AugConfig aug;
    ViewScheme scheme;
    nlohmann::json config_echo = nlohmann::json::object();  // resolved run config, compared on resume
};

/// Stateful pretraining loop: views -> query/key forward -> loss -> SGD ->
/// momentum update -> enqueue. All randomness is derived from the master seed
/// by (purpose, epoch, image id), so the loop state needed for an exact resume
/// is parameters, velocity, queues and the step/epoch counters.
class Trainer {
public:
    Trainer(const Dataset& train, RunSetup setup) : data_(&train), setup_(std::move(setup)) {
        setup_.train.validate();
        setup_.aug.validate();
        setup_.scheme.validate();
        if (train.empty()) throw ValidationError("pretrain: empty dataset");
        setup_.encoder.n_heads = setup_.scheme.n_heads();
        setup_.encoder.input_dim = train[0].pixels.numel();
        setup_.encoder.validate();
        const RngStream root(setup_.train.seed);
        models_ = ModelPair::init(setup_.encoder, root.child("init"), setup_.train.key_momentum);
        queues_ = QueueBank(setup_.encoder.n_heads, setup_.train.queue_size, setup_.encoder.z_dim);
        sgd_.lr = setup_.train.lr;
        sgd_.momentum = setup_.train.momentum;
        metrics_ = RunMetrics(setup_.encoder.n_heads);
    }

    const RunSetup& setup() const noexcept { return setup_; }
    const ModelPair& models() const noexcept { return models_; }
    ModelPair& models() noexcept { return models_; }
    const QueueBank& queues() const noexcept { return queues_; }
    const SgdState& optimizer() const noexcept { return sgd_; }
    const RunMetrics& metrics() const noexcept { return metrics_; }
    std::size_t epoch() const noexcept { return epoch_; }
    std::size_t step_count() const noexcept { return step_; }
    bool finished() const noexcept { return epoch_ >= setup_.train.epochs; }

    /// Runs whole epochs until `until_epoch` (capped at the schedule length).
    void run(std::size_t until_epoch, const std::function<void(const StepRecord&)>& on_step = {}) {
        until_epoch = std::min(until_epoch, setup_.train.epochs);
        while (epoch_ < until_epoch) {
            run_epoch(on_step);
        }
    }

    void run_epoch(const std::function<void(const StepRecord&)>& on_step = {}) {
        const auto& cfg = setup_.train;
        const RngStream root(cfg.seed);
        std::vector<std::size_t> order(data_->size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        RngStream shuffle = root.child("shuffle", {epoch_});
        shuffle.shuffle(order);
        const std::size_t b = std::min(cfg.batch, order.size());
        const RngStream views = root.child("views", {epoch_});
        sgd_.lr = lr_at_epoch(cfg, epoch_);
        for (std::size_t start = 0; start + b <= order.size(); start += b) {
            std::vector<BatchItem> items;
            for (std::size_t k = start; k < start + b; ++k)
                items.push_back(BatchItem{&(*data_)[order[k]].pixels, (*data_)[order[k]].id});
            ViewBatch vb = make_batch(items, setup_.scheme, setup_.aug, views);
            StepRecord rec = train_step(vb);
            if (on_step) on_step(rec);
        }
        ++epoch_;
    }

    /// One optimisation step on prebuilt views.
    StepRecord train_step(const ViewBatch& vb) {
        const std::size_t heads = setup_.encoder.n_heads;
        const std::size_t b = vb.query.dim(0);

        // All key views in one detached forward pass.
        std::vector<const Tensor*> key_ptrs;
        for (const auto& k : vb.keys) key_ptrs.push_back(&k);
        Tensor all_keys = concat_batches(key_ptrs);
        Tape tape;
        KeyOutputs ko;
        QueryOutputs qo;
        try {
            ko = forward_key(models_.key, all_keys);
            qo = forward_query(tape, models_.query, vb.query);
        } catch (const DegenerateError& e) {
            // A NaN or vanished embedding means the weights have already blown up.
            throw DivergenceError(std::string(e.what()) + " at step " + std::to_string(step_) + " (lr " +
                                  RunMetrics::fmt(sgd_.lr) + ")");
        }
        std::vector<std::vector<Var>> z_keys(heads);
        std::vector<std::vector<Tensor>> key_tensors(heads);
        for (std::size_t j = 0; j < heads; ++j)
            for (std::size_t i = 0; i < heads; ++i) {
                key_tensors[j].push_back(rows_slice(ko.z[i], j * b, b));
                z_keys[j].push_back(tape.constant(key_tensors[j].back()));
            }
        LoocLoss loss = looc_loss(tape, qo.z, z_keys, queues_, setup_.train.temperature);

        StepRecord rec;
        rec.step = step_;
        rec.epoch = epoch_;
        rec.lr = sgd_.lr;
        rec.loss_total = loss.report.total;
        rec.loss = loss.report.per_head;
        rec.acc = loss.report.per_head_accuracy;
        if (!std::isfinite(rec.loss_total)) {
            std::string per;
            for (double v : rec.loss) per += " " + RunMetrics::fmt(v);
            throw DivergenceError("non-finite loss at step " + std::to_string(step_) + " (lr " +
                                  RunMetrics::fmt(sgd_.lr) + ", per-head losses" + per + ")");
        }

        tape.backward(loss.total);
        std::vector<Tensor> grads;
        for (Var p : qo.params) grads.push_back(tape.grad(p));
        auto params = models_.query.params();
        try {
            sgd_step(params, grads, sgd_);
        } catch (const DivergenceError& e) {
            throw DivergenceError(std::string(e.what()) + " at step " + std::to_string(step_) + " (lr " +
                                  RunMetrics::fmt(sgd_.lr) + ")");
        }
        momentum_update(models_);

        std::vector<Tensor> to_queue;
        for (std::size_t i = 0; i < heads; ++i)
            to_queue.push_back(setup_.train.enqueue == EnqueuePolicy::PerHeadKey ? key_tensors[i][i] : key_tensors[0][i]);
        enqueue(queues_, to_queue);

        metrics_.append(rec);
        ++step_;
        return rec;
    }

    /// Writes manifest.json, parameter/velocity/queue blobs and metrics.csv.
    void save(const std::filesystem::path& dir) const {
        namespace fs = std::filesystem;
        fs::create_directories(dir / "query");
        fs::create_directories(dir / "key");
        fs::create_directories(dir / "velocity");
        fs::create_directories(dir / "queue");
        auto names = models_.query.param_names();
        auto qp = models_.query.params();
        auto kp = models_.key.params();
        for (std::size_t i = 0; i < names.size(); ++i) {
            write_tensor_file(dir / "query" / (names[i] + ".looc"), *qp[i]);
            write_tensor_file(dir / "key" / (names[i] + ".looc"), *kp[i]);
            if (!sgd_.velocity.empty()) write_tensor_file(dir / "velocity" / (names[i] + ".looc"), sgd_.velocity[i]);
        }
        for (std::size_t i = 0; i < queues_.size(); ++i)
            write_tensor_file(dir / "queue" / (std::to_string(i) + ".looc"), queues_[i].contents());
        std::vector<std::string> designated;
        for (AugKind k : setup_.scheme.designated) designated.push_back(to_string(k));
        const auto& e = setup_.encoder;
        nlohmann::json manifest = {
            {"format", "looc-checkpoint"},
            {"version", 1},
            {"config", setup_.config_echo},
            {"encoder",
             {{"input_dim", e.input_dim}, {"trunk", e.trunk}, {"v_dim", e.v_dim}, {"head_hidden", e.head_hidden},
              {"z_dim", e.z_dim}, {"n_heads", e.n_heads}, {"plusplus", e.plusplus}, {"adapter_width", e.adapter_width},
              {"input_mean", e.input_mean}, {"input_std", e.input_std}}},
            {"scheme", to_string(setup_.scheme.kind)},
            {"designated_kinds", designated},
            {"step", step_},
            {"epoch", epoch_},
            {"params", names},
            {"has_velocity", !sgd_.velocity.empty()},
        };
        std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
        std::ofstream(dir / "metrics.csv", std::ios::binary) << metrics_.csv();
    }

    /// Restores a trainer saved by save(). The setup's config echo must match
    /// the manifest exactly.
    static Trainer resume(const std::filesystem::path& dir, const Dataset& train, RunSetup setup) {
        nlohmann::json manifest = read_manifest(dir);
        if (manifest.value("format", "") != "looc-checkpoint" || manifest.value("version", 0) != 1)
            throw ResumeError("checkpoint manifest version mismatch in " + dir.string());
        const auto diff = nlohmann::json::diff(manifest["config"], setup.config_echo);
        if (!diff.empty()) {
            std::string fields;
            for (const auto& op : diff) fields += (fields.empty() ? "" : ", ") + op["path"].get<std::string>();
            throw ResumeError("config differs from checkpoint at: " + fields);
        }
        Trainer t(train, std::move(setup));
        auto names = t.models_.query.param_names();
        if (manifest["params"].get<std::vector<std::string>>() != names)
            throw ResumeError("checkpoint parameter layout does not match the configured model");
        auto load_into = [&](const std::filesystem::path& sub, std::vector<Tensor*> dst) {
            for (std::size_t i = 0; i < names.size(); ++i) {
                Tensor v = read_tensor_file(dir / sub / (names[i] + ".looc"));
                if (v.shape() != dst[i]->shape()) throw ResumeError("checkpoint tensor " + names[i] + " has wrong shape");
                *dst[i] = std::move(v);
            }
        };
        load_into("query", t.models_.query.params());
        load_into("key", t.models_.key.params());
        if (manifest.value("has_velocity", false)) {
            t.sgd_.velocity.clear();
            for (const auto& n : names) t.sgd_.velocity.push_back(read_tensor_file(dir / "velocity" / (n + ".looc")));
        }
        for (std::size_t i = 0; i < t.queues_.size(); ++i) {
            Tensor q = read_tensor_file(dir / "queue" / (std::to_string(i) + ".looc"));
            for (std::size_t r = 0; r < q.rows(); ++r) t.queues_[i].push(q.row(r));
        }
        t.step_ = manifest["step"].get<std::size_t>();
        t.epoch_ = manifest["epoch"].get<std::size_t>();
        std::ifstream mf(dir / "metrics.csv", std::ios::binary);
        std::stringstream ss;
        ss << mf.rdbuf();
        t.metrics_ = RunMetrics::parse_csv(ss.str(), t.setup_.encoder.n_heads);
        return t;
    }

    static nlohmann::json read_manifest(const std::filesystem::path& dir) {
        std::ifstream f(dir / "manifest.json");
        if (!f) throw ResumeError("no checkpoint manifest in " + dir.string());
        try {
            return nlohmann::json::parse(f);
        } catch (const nlohmann::json::exception& e) {
            throw ResumeError("unreadable checkpoint manifest: " + std::string(e.what()));
        }
    }

    static Tensor concat_batches(const std::vector<const Tensor*>& parts) {
        Shape s = parts.at(0)->shape();
        std::size_t total = 0;
        for (const Tensor* p : parts) total += p->dim(0);
        s[0] = total;
        Tensor out(s);
        std::size_t off = 0;
        for (const Tensor* p : parts) {
            std::copy(p->data().begin(), p->data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
            off += p->numel();
        }
        return out;
    }

    static Tensor rows_slice(const Tensor& t, std::size_t first, std::size_t count) {
        const std::size_t c = t.cols();
        return Tensor(Shape{count, c}, std::vector<double>(t.data().begin() + static_cast<std::ptrdiff_t>(first * c),
                                                           t.data().begin() + static_cast<std::ptrdiff_t>((first + count) * c)));
    }

private:
    const Dataset* data_;
    RunSetup setup_;
    ModelPair models_;
    QueueBank queues_;
    SgdState sgd_;
    RunMetrics metrics_;
    std::size_t epoch_ = 0;
    std::size_t step_ = 0;
};

struct PretrainOptions {
    bool resume = false;
    std::size_t stop_after_epoch = 0;  // 0 = run the full schedule
};

struct PretrainResult {
    std::filesystem::path checkpoint;
    RunMetrics metrics;
};

/// Run directory layout: config.json, metrics.csv, checkpoint/, log.txt.
/// Timestamps go to log.txt only.
inline PretrainResult pretrain(const Dataset& train, const RunSetup& setup, const std::filesystem::path& out,
                               const PretrainOptions& opts = {}) {
    namespace fs = std::filesystem;
    fs::create_directories(out);
    const fs::path ckpt = out / "checkpoint";
    Trainer trainer = opts.resume ? Trainer::resume(ckpt, train, setup) : Trainer(train, setup);
    std::ofstream(out / "config.json") << setup.config_echo.dump(2) << "\n";
    std::ofstream log(out / "log.txt", std::ios::app);
    auto stamp = [] {
        std::time_t t = std::time(nullptr);
        char buf[32];
        std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", std::localtime(&t));
        return std::string(buf);
    };
    log << stamp() << " start epoch " << trainer.epoch() << " step " << trainer.step_count() << "\n";
    const std::size_t end = opts.stop_after_epoch ? std::min(opts.stop_after_epoch, setup.train.epochs) : setup.train.epochs;
    while (trainer.epoch() < end) {
        trainer.run_epoch();
        const auto& last = trainer.metrics().rows();
        log << stamp() << " epoch " << trainer.epoch() << " loss "
            << (last.empty() ? 0.0 : last.back().loss_total) << "\n";
        if (setup.train.checkpoint_every && trainer.epoch() % setup.train.checkpoint_every == 0) trainer.save(ckpt);
    }
    trainer.save(ckpt);
    std::ofstream(out / "metrics.csv", std::ios::binary) << trainer.metrics().csv();
    log << stamp() << " saved checkpoint at epoch " << trainer.epoch() << "\n";
    return PretrainResult{ckpt, trainer.metrics()};
}

/// Loads the query network from a checkpoint directory.
inline Network load_query_network(const std::filesystem::path& ckpt) {
    nlohmann::json m = Trainer::read_manifest(ckpt);
    const auto& e = m["encoder"];
    EncoderCfg cfg;
    cfg.input_dim = e["input_dim"];
    cfg.trunk = e["trunk"].get<std::vector<std::size_t>>();
    cfg.v_dim = e["v_dim"];
    cfg.head_hidden = e["head_hidden"];
    cfg.z_dim = e["z_dim"];
    cfg.n_heads = e["n_heads"];
    cfg.plusplus = e["plusplus"];
    cfg.adapter_width = e["adapter_width"];
    cfg.input_mean = e["input_mean"];
    cfg.input_std = e["input_std"];
    Network net = Network::init(cfg, RngStream(0));
    auto names = net.param_names();
    auto params = net.params();
    for (std::size_t i = 0; i < names.size(); ++i) {
        Tensor v = read_tensor_file(ckpt / "query" / (names[i] + ".looc"));
        if (v.shape() != params[i]->shape()) throw FormatError("checkpoint tensor " + names[i] + " has wrong shape", 0);
        *params[i] = std::move(v);
    }
    return net;
}

}  // namespace looc
