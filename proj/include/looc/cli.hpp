#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "looc/config.hpp"
#include "looc/probes.hpp"
#include "looc/synthdata.hpp"
#include "looc/train.hpp"

namespace looc::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitRuntime = 3;

inline void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
}

inline std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Accepts either a run directory or its checkpoint/ subdirectory.
inline fs::path resolve_checkpoint(const fs::path& p) {
    if (fs::exists(p / "manifest.json")) return p;
    if (fs::exists(p / "checkpoint" / "manifest.json")) return p / "checkpoint";
    throw UsageError("--checkpoint: no checkpoint manifest under " + p.string());
}

// ---- gen -------------------------------------------------------------------

inline void cmd_gen(const fs::path& config, const fs::path& out) {
    const RunConfig c = load_run_config(config);
    const Dataset data = generate_dataset(c.data.spec, c.data.n_per_combo);
    write_dataset_dir(out, data, c.data.spec, c.data.n_per_combo);
    const DatasetSplits sp = split(data, c.data.split, c.data.split_seed);
    auto ids = [](const Dataset& d) {
        std::vector<std::size_t> v;
        for (const auto& im : d) v.push_back(im.id);
        return v;
    };
    nlohmann::json splits = {{"train", ids(sp.train)}, {"val", ids(sp.val)}, {"test", ids(sp.test)}};
    write_text(out / "splits.json", splits.dump() + "\n");
}

// ---- pretrain --------------------------------------------------------------

inline PretrainResult cmd_pretrain(const fs::path& config, const fs::path& out, bool resume, std::size_t stop_after) {
    const RunConfig c = load_run_config(config);
    const DatasetSplits sp = make_splits(c);
    return pretrain(sp.train, make_run_setup(c), out, PretrainOptions{resume, stop_after});
}

// ---- probe -----------------------------------------------------------------

struct ProbeRequest {
    fs::path checkpoint;
    std::string task;
    std::string features = "looc_v";
    std::string target = "shape_id";
    std::vector<std::size_t> shots{5, 10};
    std::size_t top_k = 5;
    fs::path out;
};

inline nlohmann::json probe_metrics(const ProbeResult& r) {
    nlohmann::json m = {{"top1", r.top1}, {"val_top1", r.val_top1}, {"lr", r.lr}, {"n_classes", r.n_classes}};
    if (r.top5) m["top5"] = *r.top5;
    return m;
}

/// Runs one probe against a saved checkpoint; writes probe_report.json (and
/// histograms.csv / retrieval.csv for the tasks that produce them) into out.
inline nlohmann::json cmd_probe(const ProbeRequest& req) {
    const fs::path ckpt = resolve_checkpoint(req.checkpoint);
    const nlohmann::json manifest = Trainer::read_manifest(ckpt);
    const RunConfig c = parse_run_config(manifest.at("config"));
    const Network net = load_query_network(ckpt);

    FeatureSource src;
    try {
        src = FeatureSource::parse(req.features);
        src.validate(net);
    } catch (const ValidationError& e) {
        throw UsageError(std::string("--features: ") + e.what());
    }
    auto target_factor = [&] {
        try {
            return factor_from_string(req.target);
        } catch (const ValidationError& e) {
            throw UsageError(std::string("--target: ") + e.what());
        }
    };

    const DatasetSplits sp = make_splits(c);
    const ProbeSplits data{&sp.train, &sp.val, &sp.test};
    nlohmann::json report = {{"task", req.task}, {"features", src.str()}};
    nlohmann::json metrics = nlohmann::json::object();

    static const std::vector<std::string> factor_names{"shape_id", "color_id", "texture_id", "pose_id"};
    if (std::find(factor_names.begin(), factor_names.end(), req.task) != factor_names.end()) {
        metrics = probe_metrics(factor_probe(net, src, factor_from_string(req.task), data, c.probe));
    } else if (req.task == "rotation") {
        const RotationProbeResult r = rotation_probe(net, src, data, c.probe);
        metrics = {{"pose_accuracy", r.pose_accuracy}, {"object_accuracy", r.object_accuracy}};
    } else if (req.task == "few_shot") {
        const Factor f = target_factor();
        report["target"] = to_string(f);
        const Tensor x = extract_features(net, sp.test, src);
        const auto y = labels_of(sp.test, f);
        for (std::size_t k : req.shots) {
            EpisodeCfg ec;
            ec.k_shot = k;
            ec.seed = c.probe.seed;
            FewShotResult r;
            try {
                r = few_shot(x, y, ec);
            } catch (const EpisodeError& e) {
                throw UsageError(std::string("--shots: ") + e.what());
            }
            metrics[std::to_string(k) + "_shot_mean"] = r.mean;
            metrics[std::to_string(k) + "_shot_ci95"] = r.half_width;
        }
    } else if (req.task == "retrieval") {
        const Tensor q = extract_features(net, sp.test, src), g = extract_features(net, sp.train, src);
        const auto ranks = nn_retrieve(q, g, req.top_k);
        report["top_k"] = req.top_k;
        std::ostringstream grid;
        grid << "query_id,query_shape,query_color,query_texture,query_pose,rank,neighbor_id,shape,color,texture,pose\n";
        for (std::size_t i = 0; i < ranks.size(); ++i)
            for (std::size_t r = 0; r < ranks[i].size(); ++r) {
                const auto& a = sp.test[i].labels;
                const auto& b = sp.train[ranks[i][r]].labels;
                grid << sp.test[i].id << ',' << a.shape_id << ',' << a.color_id << ',' << a.texture_id << ','
                     << a.pose_id << ',' << r + 1 << ',' << sp.train[ranks[i][r]].id << ',' << b.shape_id << ','
                     << b.color_id << ',' << b.texture_id << ',' << b.pose_id << '\n';
            }
        write_text(req.out / "retrieval.csv", grid.str());
        for (Factor f : {Factor::Shape, Factor::Color, Factor::Texture, Factor::Pose})
            metrics[to_string(f) + "_agreement"] = retrieval_agreement(ranks, labels_of(sp.test, f), labels_of(sp.train, f));
    } else if (req.task == "contributions") {
        if (src.kind == FeatureSource::Kind::LoocV || src.kind == FeatureSource::Kind::SingleHead)
            throw UsageError("--features: contributions need loocpp or mask:... features");
        const Factor f = target_factor();
        report["target"] = to_string(f);
        const ProbeResult pr = factor_probe(net, src, f, data, c.probe);
        const Dataset te = f == Factor::Pose ? rotated_probe_set(sp.test) : sp.test;
        const Tensor xt = pr.classifier.transform(extract_features(net, te, src));
        const auto widths = src.slice_widths(net);
        // The classifier acts on transformed features, so the decomposition uses them too.
        const HeadContributions hc =
            head_contributions(xt, labels_of(te, f), pr.classifier.weight, pr.classifier.bias, widths);
        std::vector<std::size_t> head_ids = src.heads;
        if (src.kind == FeatureSource::Kind::LoocppConcat) {
            head_ids.resize(net.n_heads());
            std::iota(head_ids.begin(), head_ids.end(), std::size_t{0});
        }
        std::ostringstream csv;
        csv << "head,mean_share\n";
        for (std::size_t h = 0; h < hc.histogram.size(); ++h) csv << head_ids[h] << ',' << hc.histogram[h] << '\n';
        write_text(req.out / "histograms.csv", csv.str());
        metrics = probe_metrics(pr);
        metrics["entropy_bits"] = hc.entropy_bits;
        metrics["correct_samples"] = hc.samples.size();
        metrics["histogram"] = hc.histogram;
    } else {
        throw UsageError("--task: unknown task '" + req.task +
                         "' (expected shape_id|color_id|texture_id|pose_id|rotation|few_shot|retrieval|contributions)");
    }
    report["metrics"] = metrics;
    write_text(req.out / "probe_report.json", report.dump(2) + "\n");
    return report;
}

// ---- compare ---------------------------------------------------------------

inline std::string fmt_cell(const nlohmann::json& v) {
    if (v.is_number_float()) {
        std::ostringstream s;
        s << std::fixed << std::setprecision(4) << v.get<double>();
        return s.str();
    }
    if (v.is_number()) return v.dump();
    if (v.is_string()) return v.get<std::string>();
    return v.dump();
}

/// One row per run (the probe output directory or report file given), one
/// column per scalar metric seen in any report. Writes compare.csv and
/// compare.md into out.
inline void cmd_compare(const std::vector<std::string>& runs, const fs::path& out) {
    if (runs.empty()) throw UsageError("--runs: at least one run is required");
    std::vector<std::string> columns;
    std::vector<std::map<std::string, std::string>> rows;
    for (const auto& run : runs) {
        fs::path p = run;
        if (fs::is_directory(p)) p /= "probe_report.json";
        nlohmann::json rep;
        try {
            rep = nlohmann::json::parse(read_text(p));
        } catch (const nlohmann::json::exception& e) {
            throw UsageError("--runs: unreadable probe report " + p.string() + ": " + e.what());
        }
        std::map<std::string, std::string> row{{"run", run},
                                               {"task", rep.value("task", "")},
                                               {"features", rep.value("features", "")}};
        const nlohmann::json metrics = rep.value("metrics", nlohmann::json::object());
        for (const auto& [k, v] : metrics.items()) {
            if (!v.is_primitive()) continue;
            if (std::find(columns.begin(), columns.end(), k) == columns.end()) columns.push_back(k);
            row[k] = fmt_cell(v);
        }
        rows.push_back(std::move(row));
    }
    std::vector<std::string> header{"run", "task", "features"};
    header.insert(header.end(), columns.begin(), columns.end());
    std::ostringstream csv, md;
    for (std::size_t i = 0; i < header.size(); ++i) csv << (i ? "," : "") << header[i];
    csv << '\n';
    md << '|';
    for (const auto& h : header) md << ' ' << h << " |";
    md << "\n|";
    for (std::size_t i = 0; i < header.size(); ++i) md << (i < 3 ? "---|" : "---:|");
    md << '\n';
    for (const auto& row : rows) {
        md << '|';
        for (std::size_t i = 0; i < header.size(); ++i) {
            auto it = row.find(header[i]);
            const std::string cell = it == row.end() ? "" : it->second;
            csv << (i ? "," : "") << cell;
            md << ' ' << cell << " |";
        }
        csv << '\n';
        md << '\n';
    }
    write_text(out / "compare.csv", csv.str());
    write_text(out / "compare.md", md.str());
}

// ---- entry point -----------------------------------------------------------

inline std::vector<std::size_t> parse_size_list(const std::string& flag, const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos)
            throw UsageError(flag + ": bad integer '" + item + "'");
        out.push_back(std::stoul(item));
    }
    if (out.empty()) throw UsageError(flag + ": empty list");
    return out;
}

/// Parses argv and dispatches. Returns the process exit code; diagnostics go to err.
inline int run(int argc, const char* const* argv, std::ostream& err = std::cerr) {
    CLI::App app{"looc: multi-space contrastive pretraining on synthetic factor images"};
    app.require_subcommand(1);

    std::string config, out, checkpoint, runs, shots = "5,10";
    bool resume = false;
    std::size_t stop_after = 0;
    ProbeRequest req;

    auto* gen = app.add_subcommand("gen", "generate the synthetic dataset described by a config");
    gen->add_option("--config", config, "run config (JSON)")->required();
    gen->add_option("--out", out, "dataset directory")->required();

    auto* pre = app.add_subcommand("pretrain", "pretrain an encoder; writes checkpoint/ and metrics.csv");
    pre->add_option("--config", config, "run config (JSON)")->required();
    pre->add_option("--out", out, "run directory")->required();
    pre->add_flag("--resume", resume, "continue from <out>/checkpoint");
    pre->add_option("--stop-after", stop_after, "stop after this many epochs (0 = full schedule)");

    auto* probe = app.add_subcommand("probe", "evaluate frozen features of a checkpoint");
    probe->add_option("--checkpoint", checkpoint, "run or checkpoint directory")->required();
    probe->add_option("--task", req.task,
                      "shape_id|color_id|texture_id|pose_id|rotation|few_shot|retrieval|contributions")
        ->required();
    probe->add_option("--features", req.features, "looc_v|loocpp|head:i|mask:i,j");
    probe->add_option("--target", req.target, "factor for few_shot and contributions");
    probe->add_option("--shots", shots, "comma-separated k values for few_shot");
    probe->add_option("--top-k", req.top_k, "neighbours per query for retrieval");
    probe->add_option("--out", out, "report directory")->required();

    auto* cmp = app.add_subcommand("compare", "tabulate probe reports side by side");
    cmp->add_option("--runs", runs, "comma-separated probe report directories")->required();
    cmp->add_option("--out", out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    }

    try {
        if (gen->parsed()) {
            cmd_gen(config, out);
        } else if (pre->parsed()) {
            cmd_pretrain(config, out, resume, stop_after);
        } else if (probe->parsed()) {
            req.checkpoint = checkpoint;
            req.out = out;
            req.shots = parse_size_list("--shots", shots);
            cmd_probe(req);
        } else if (cmp->parsed()) {
            std::vector<std::string> list;
            std::stringstream ss(runs);
            std::string item;
            while (std::getline(ss, item, ','))
                if (!item.empty()) list.push_back(item);
            cmd_compare(list, out);
        }
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}

}  // namespace looc::cli
