#include "nanotfm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "nanotfm/train.hpp"

namespace nanotfm::eval {

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    const std::size_t n = scores.size();
    if (labels.size() != n) throw ShapeError("roc_auc: scores/labels length mismatch");
    std::int64_t npos = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) throw NumericError("roc_auc: labels must be binary");
        npos += l;
    }
    const std::int64_t nneg = static_cast<std::int64_t>(n) - npos;
    if (npos == 0 || nneg == 0)
        throw NumericError("roc_auc undefined: only one class present");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // average ranks over tie groups, 1-based
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t q = i; q < j; ++q)
            if (labels[order[q]] == 1) rank_sum_pos += avg_rank;
        i = j;
    }
    const double u = rank_sum_pos -
                     static_cast<double>(npos) * (static_cast<double>(npos) + 1.0) / 2.0;
    return u / (static_cast<double>(npos) * static_cast<double>(nneg));
}

std::vector<std::vector<int>> stratified_kfold(const std::vector<int>& y, int k,
                                               int repetitions, std::uint64_t seed) {
    if (k < 2) throw ConfigError("stratified_kfold: k must be >= 2");
    const std::size_t n = y.size();
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < n; ++i) by_class[y[i]].push_back(i);
    for (const auto& [cls, members] : by_class)
        if (static_cast<int>(members.size()) < k)
            throw ConfigError("stratified_kfold: class " + std::to_string(cls) +
                              " has " + std::to_string(members.size()) +
                              " members, fewer than k = " + std::to_string(k));

    Rng rng(seed);
    std::vector<std::vector<int>> out(repetitions, std::vector<int>(n, -1));
    for (int rep = 0; rep < repetitions; ++rep) {
        for (auto& [cls, members] : by_class) {
            std::vector<std::size_t> idx = members;
            rng.shuffle(idx);
            for (std::size_t pos = 0; pos < idx.size(); ++pos)
                out[rep][idx[pos]] = static_cast<int>(pos % k);
        }
    }
    return out;
}

std::vector<std::int64_t> stratified_subsample(const std::vector<int>& y,
                                               std::int64_t max_rows, Rng& rng) {
    const std::int64_t n = static_cast<std::int64_t>(y.size());
    std::vector<std::int64_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    if (n <= max_rows) return all;

    std::map<int, std::vector<std::int64_t>> by_class;
    for (std::int64_t i = 0; i < n; ++i) by_class[y[i]].push_back(i);

    // largest-remainder quotas
    std::vector<std::pair<double, int>> rema;
    std::map<int, std::int64_t> quota;
    std::int64_t assigned = 0;
    for (const auto& [cls, members] : by_class) {
        const double exact = static_cast<double>(members.size()) * max_rows / n;
        quota[cls] = static_cast<std::int64_t>(exact);
        assigned += quota[cls];
        rema.push_back({exact - static_cast<double>(quota[cls]), cls});
    }
    std::sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (std::size_t i = 0; assigned < max_rows && i < rema.size(); ++i, ++assigned)
        ++quota[rema[i].second];

    std::vector<std::int64_t> keep;
    keep.reserve(max_rows);
    for (auto& [cls, members] : by_class) {
        std::vector<std::int64_t> idx = members;
        rng.shuffle(idx);
        const std::int64_t q = std::min<std::int64_t>(quota[cls], idx.size());
        keep.insert(keep.end(), idx.begin(), idx.begin() + q);
    }
    std::sort(keep.begin(), keep.end());
    return keep;
}

const char* method_name(Method m) {
    switch (m) {
        case Method::nano: return "nano";
        case Method::knn: return "knn";
        case Method::tree: return "tree";
        case Method::forest: return "forest";
    }
    return "?";
}

std::vector<Method> parse_methods(const std::string& csv) {
    std::vector<Method> out;
    std::size_t start = 0;
    while (start <= csv.size()) {
        std::size_t comma = csv.find(',', start);
        if (comma == std::string::npos) comma = csv.size();
        const std::string tok = csv.substr(start, comma - start);
        if (tok == "nano") out.push_back(Method::nano);
        else if (tok == "knn") out.push_back(Method::knn);
        else if (tok == "tree") out.push_back(Method::tree);
        else if (tok == "forest") out.push_back(Method::forest);
        else if (!tok.empty())
            throw ConfigError("unknown method '" + tok + "' (expected nano,knn,tree,forest)");
        start = comma + 1;
    }
    if (out.empty()) throw ConfigError("no methods selected");
    return out;
}

std::vector<double> nano_predict(const NanoModel& model, const float* train_x,
                                 const int* train_y, std::int64_t n_train,
                                 std::int64_t cols, const float* test_x,
                                 std::int64_t n_test) {
    NoGradGuard ng;
    const std::int64_t r = n_train + n_test;
    TableBatch<float> batch;
    batch.split = n_train;
    batch.x = Tensor<float>::uninit({1, r, cols});
    batch.y = Tensor<float>::zeros({1, r});
    auto xd = batch.x.data();
    std::copy(train_x, train_x + n_train * cols, xd.begin());
    std::copy(test_x, test_x + n_test * cols, xd.begin() + n_train * cols);
    auto yd = batch.y.data();
    for (std::int64_t i = 0; i < n_train; ++i) yd[i] = static_cast<float>(train_y[i]);

    Tensor<float> probs = predict_proba(batch, model.params, model.config);
    const auto pd = probs.data();
    return std::vector<double>(pd.begin(), pd.end());
}

namespace {

struct FoldData {
    std::vector<float> train_x, test_x;
    std::vector<int> train_y, test_y;
};

FoldData split_fold(const EvalTask& task, const std::vector<std::int64_t>& keep,
                    const std::vector<int>& assign, int fold) {
    FoldData fd;
    const std::int64_t c = task.cols;
    for (std::size_t pos = 0; pos < keep.size(); ++pos) {
        const std::int64_t i = keep[pos];
        const float* row = task.x.data() + i * c;
        if (assign[pos] == fold) {
            fd.test_x.insert(fd.test_x.end(), row, row + c);
            fd.test_y.push_back(task.y[i]);
        } else {
            fd.train_x.insert(fd.train_x.end(), row, row + c);
            fd.train_y.push_back(task.y[i]);
        }
    }
    return fd;
}

double accuracy_from_probs(const std::vector<double>& probs,
                           const std::vector<int>& labels, int num_classes) {
    std::int64_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double* row = probs.data() + i * num_classes;
        int best = 0;
        for (int cjj = 1; cjj < num_classes; ++cjj)
            if (row[cjj] > row[best]) best = cjj;
        hits += best == labels[i];
    }
    return labels.empty() ? 0.0 : static_cast<double>(hits) / labels.size();
}

}  // namespace

MetricReport evaluate_tasks(const std::vector<EvalTask>& tasks,
                            const std::vector<Method>& methods, const NanoModel* nano,
                            const EvalProtocol& proto) {
    MetricReport report;
    for (Method m : methods)
        if (m == Method::nano && !nano)
            throw ConfigError("nano among the methods but no checkpoint given");

    for (const auto& task : tasks) {
        if (task.num_classes != 2) {
            report.warnings.push_back(task.name + ": skipped, needs binary labels (got " +
                                      std::to_string(task.num_classes) + " classes)");
            continue;
        }
        if (nano && task.num_classes > nano->config.num_outputs) {
            report.warnings.push_back(task.name + ": skipped, more classes than model outputs");
            continue;
        }
        bool finite = true;
        for (float v : task.x)
            if (!std::isfinite(v)) finite = false;
        if (!finite) {
            report.warnings.push_back(task.name + ": skipped, non-finite feature values");
            continue;
        }

        Rng srng(proto.seed ^ std::hash<std::string>{}(task.name));
        const auto keep = stratified_subsample(task.y, proto.subsample, srng);
        std::vector<int> ysub;
        ysub.reserve(keep.size());
        for (auto i : keep) ysub.push_back(task.y[i]);

        std::map<int, int> counts;
        for (int v : ysub) ++counts[v];
        bool enough = static_cast<int>(counts.size()) == task.num_classes;
        for (const auto& [cls, cnt] : counts)
            if (cnt < proto.folds) enough = false;
        if (!enough) {
            report.warnings.push_back(task.name +
                                      ": skipped, a class has fewer members than folds");
            continue;
        }

        const auto assigns =
            stratified_kfold(ysub, proto.folds, proto.repetitions, srng.next_u64());
        for (int rep = 0; rep < proto.repetitions; ++rep) {
            for (int fold = 0; fold < proto.folds; ++fold) {
                const FoldData fd = split_fold(task, keep, assigns[rep], fold);
                const auto n_train = static_cast<std::int64_t>(fd.train_y.size());
                const auto n_test = static_cast<std::int64_t>(fd.test_y.size());
                for (Method m : methods) {
                    std::vector<double> probs;
                    switch (m) {
                        case Method::nano:
                            probs = nano_predict(*nano, fd.train_x.data(),
                                                 fd.train_y.data(), n_train, task.cols,
                                                 fd.test_x.data(), n_test);
                            break;
                        case Method::knn: {
                            const int k = std::min<int>(proto.knn_k,
                                                        static_cast<int>(n_train));
                            probs = knn_predict(fd.train_x.data(), fd.train_y.data(),
                                                n_train, task.cols, fd.test_x.data(),
                                                n_test, k, task.num_classes);
                            break;
                        }
                        case Method::tree: {
                            DecisionTree t;
                            t.fit(fd.train_x.data(), fd.train_y.data(), n_train,
                                  task.cols, task.num_classes);
                            probs.resize(n_test * task.num_classes);
                            for (std::int64_t i = 0; i < n_test; ++i)
                                t.predict_proba(fd.test_x.data() + i * task.cols,
                                                probs.data() + i * task.num_classes);
                            break;
                        }
                        case Method::forest: {
                            RandomForest rf;
                            ForestConfig fc = proto.forest;
                            fc.seed = srng.next_u64();
                            rf.fit(fd.train_x.data(), fd.train_y.data(), n_train,
                                   task.cols, task.num_classes, fc);
                            probs.resize(n_test * task.num_classes);
                            for (std::int64_t i = 0; i < n_test; ++i)
                                rf.predict_proba(fd.test_x.data() + i * task.cols,
                                                 probs.data() + i * task.num_classes);
                            break;
                        }
                    }
                    std::vector<double> score1(n_test);
                    const int nk =
                        m == Method::nano ? nano->config.num_outputs : task.num_classes;
                    for (std::int64_t i = 0; i < n_test; ++i)
                        score1[i] = probs[i * nk + 1];
                    MetricRow row;
                    row.task = task.name;
                    row.fold = fold;
                    row.repetition = rep;
                    row.method = method_name(m);
                    row.roc_auc = roc_auc(score1, fd.test_y);
                    row.accuracy = accuracy_from_probs(probs, fd.test_y, nk);
                    report.rows.push_back(std::move(row));
                }
            }
        }
    }

    for (Method m : methods) {
        MetricAggregate agg;
        agg.method = method_name(m);
        std::int64_t n = 0;
        for (const auto& row : report.rows) {
            if (row.method != agg.method) continue;
            agg.mean_roc_auc += row.roc_auc;
            agg.mean_accuracy += row.accuracy;
            ++n;
        }
        if (n > 0) {
            agg.mean_roc_auc /= n;
            agg.mean_accuracy /= n;
        }
        report.aggregates.push_back(std::move(agg));
    }
    return report;
}

std::vector<EvalTask> make_holdout_tasks(const SyntheticPriorConfig& cfg, int count,
                                         std::uint64_t seed) {
    std::vector<EvalTask> tasks(count);
    Rng rng(seed);
    std::vector<float> x;
    std::vector<std::int16_t> y;
    for (int i = 0; i < count; ++i) {
        generate_dataset(cfg, rng, x, y);
        auto& t = tasks[i];
        t.name = "synthetic-" + std::to_string(i);
        t.rows = cfg.rows;
        t.cols = cfg.cols;
        t.num_classes = cfg.num_classes;
        t.x = x;
        t.y.assign(y.begin(), y.end());
    }
    return tasks;
}

std::vector<CurvePoint> learning_curve(const ModelConfig& mcfg, const TrainConfig& tcfg,
                                       BatchSource& source,
                                       const std::vector<EvalTask>& tasks,
                                       const std::vector<int>& snapshot_steps,
                                       const std::vector<Method>& methods,
                                       const EvalProtocol& proto,
                                       std::uint64_t init_seed) {
    struct Snapshot {
        int step;
        double seconds;
        ModelParameters<float> params;
    };
    std::vector<Snapshot> snaps;

    const bool wants_nano =
        std::find(methods.begin(), methods.end(), Method::nano) != methods.end();
    std::vector<int> steps = snapshot_steps;
    std::sort(steps.begin(), steps.end());

    Rng rng(init_seed);
    ModelParameters<float> params = ModelParameters<float>::init(mcfg, rng);
    ScheduleFreeAdamW<float> opt(params.named(), tcfg);
    if (wants_nano) {
        train<float>(params, mcfg, source, tcfg, opt, steps,
                     [&](int step, double secs, ModelParameters<float>& p) {
                         snaps.push_back({step, secs, p.clone()});
                     });
    }

    std::vector<CurvePoint> out;
    for (Method m : methods) {
        if (m == Method::nano) {
            for (auto& s : snaps) {
                NanoModel nm{mcfg, std::move(s.params)};
                const auto rep = evaluate_tasks(tasks, {Method::nano}, &nm, proto);
                CurvePoint p;
                p.method = "nano";
                p.step = s.step;
                p.seconds = s.seconds;
                p.mean_roc_auc = rep.aggregates.at(0).mean_roc_auc;
                out.push_back(p);
            }
        } else {
            const auto rep = evaluate_tasks(tasks, {m}, nullptr, proto);
            CurvePoint p;
            p.method = method_name(m);
            p.seconds = 0.0;
            p.step = 0;
            p.mean_roc_auc = rep.aggregates.at(0).mean_roc_auc;
            out.push_back(p);
        }
    }
    return out;
}

}  // namespace nanotfm::eval
