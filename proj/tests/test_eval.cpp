// Metrics and harness: ROC AUC against the all-pairs oracle, stratified
// k-fold counting, baselines against exhaustive oracles, null-model check.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>

#include "nanotfm/eval.hpp"
#include "oracles.hpp"

using namespace nanotfm;
using namespace nanotfm::eval;

// ---------------------------------------------------------------------------
// roc auc
// ---------------------------------------------------------------------------

TEST_CASE("roc_auc basics") {
    CHECK(roc_auc({0.9, 0.1}, {1, 0}) == 1.0);
    CHECK(roc_auc({0.1, 0.9}, {1, 0}) == 0.0);
    CHECK(roc_auc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}) == 0.5);
    CHECK_THROWS_AS(roc_auc({0.3, 0.4}, {1, 1}), NumericError);
}

TEST_CASE("roc_auc equals the all-pairs oracle exactly, ties included") {
    Rng rng(31);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 4 + static_cast<int>(rng.uniform_int(17));  // up to 20
        std::vector<double> scores(n);
        std::vector<int> labels(n);
        bool both = false;
        do {
            for (int i = 0; i < n; ++i) {
                // quantized scores force ties
                scores[i] = static_cast<double>(rng.uniform_int(6)) / 5.0;
                labels[i] = static_cast<int>(rng.uniform_int(2));
            }
            both = std::count(labels.begin(), labels.end(), 1) > 0 &&
                   std::count(labels.begin(), labels.end(), 0) > 0;
        } while (!both);
        CHECK(roc_auc(scores, labels) == oracles::auc_all_pairs(scores, labels));
    }
}

TEST_CASE("roc_auc properties: complement and monotone invariance") {
    Rng rng(32);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 10;
        std::vector<double> scores(n);
        std::vector<int> labels(n);
        std::set<double> uniq;
        for (int i = 0; i < n; ++i) {
            do {
                scores[i] = rng.normal();
            } while (uniq.count(scores[i]));
            uniq.insert(scores[i]);
            labels[i] = i < 4 ? 1 : 0;
        }
        std::vector<double> neg(n), mono(n);
        for (int i = 0; i < n; ++i) {
            neg[i] = -scores[i];
            mono[i] = std::exp(2.0 * scores[i]) + 5.0;  // strictly increasing
        }
        const double auc = roc_auc(scores, labels);
        CHECK(roc_auc(neg, labels) + auc == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(roc_auc(mono, labels) == auc);
    }
}

// ---------------------------------------------------------------------------
// stratified k-fold
// ---------------------------------------------------------------------------

TEST_CASE("stratified_kfold: exact proportional counts") {
    std::vector<int> y(200);
    for (int i = 0; i < 200; ++i) y[i] = i < 100 ? 0 : 1;
    const auto assigns = stratified_kfold(y, 5, 3, 7);
    REQUIRE(assigns.size() == 3);
    for (const auto& rep : assigns) {
        std::map<std::pair<int, int>, int> counts;  // (fold, class) -> n
        for (int i = 0; i < 200; ++i) ++counts[{rep[i], y[i]}];
        for (int f = 0; f < 5; ++f) {
            CHECK(counts[{f, 0}] == 20);
            CHECK(counts[{f, 1}] == 20);
        }
    }
}

TEST_CASE("stratified_kfold: imbalanced classes still divide exactly") {
    std::vector<int> y(200);
    for (int i = 0; i < 200; ++i) y[i] = i < 50 ? 1 : 0;  // 50 minority
    const auto assigns = stratified_kfold(y, 5, 1, 3);
    std::map<int, int> minority;
    for (int i = 0; i < 200; ++i)
        if (y[i] == 1) ++minority[assigns[0][i]];
    for (int f = 0; f < 5; ++f) CHECK(minority[f] == 10);
}

TEST_CASE("stratified_kfold: partition, determinism, class-size guard") {
    std::vector<int> y{0, 0, 0, 1, 1, 1, 0, 1, 0, 1, 0, 1, 1};
    const auto a = stratified_kfold(y, 3, 2, 11);
    const auto b = stratified_kfold(y, 3, 2, 11);
    CHECK(a == b);
    for (const auto& rep : a) {
        for (int f : rep) {
            CHECK(f >= 0);
            CHECK(f < 3);
        }
        // counts per fold-class differ by at most 1 from proportional
        std::map<std::pair<int, int>, int> counts;
        for (std::size_t i = 0; i < y.size(); ++i) ++counts[{rep[i], y[i]}];
        for (int cls : {0, 1}) {
            const int total = static_cast<int>(std::count(y.begin(), y.end(), cls));
            for (int f = 0; f < 3; ++f) {
                const int c = counts[{f, cls}];
                CHECK(c >= total / 3);
                CHECK(c <= total / 3 + 1);
            }
        }
    }
    std::vector<int> tiny{0, 0, 0, 1, 1};  // class 1 has 2 < k members
    CHECK_THROWS_AS(stratified_kfold(tiny, 3, 1, 0), ConfigError);
}

// ---------------------------------------------------------------------------
// baselines
// ---------------------------------------------------------------------------

TEST_CASE("knn: exact training point and full-vote limits") {
    // 4 points, labels 0,0,1,1
    std::vector<float> x{0, 0, 1, 0, 0, 5, 1, 5};
    std::vector<int> y{0, 0, 1, 1};

    std::vector<float> q{1, 0};  // equals training point 1
    auto p1 = knn_predict(x.data(), y.data(), 4, 2, q.data(), 1, 1, 2);
    CHECK(p1[0] == 1.0);
    CHECK(p1[1] == 0.0);

    auto pall = knn_predict(x.data(), y.data(), 4, 2, q.data(), 1, 4, 2);
    CHECK(pall[0] == 0.5);  // prior class frequencies
    CHECK(pall[1] == 0.5);
}

TEST_CASE("knn ties break toward the lower training index") {
    // two training points equidistant from the query, opposite labels
    std::vector<float> x{-1, 0, 1, 0};
    std::vector<int> y{1, 0};
    std::vector<float> q{0, 0};
    auto p = knn_predict(x.data(), y.data(), 2, 2, q.data(), 1, 1, 2);
    CHECK(p[1] == 1.0);  // index 0 (label 1) wins the tie
}

TEST_CASE("knn matches an exhaustive-distance oracle on random instances") {
    Rng rng(41);
    const int n = 20, c = 3, k = 5;
    std::vector<float> x(n * c), q(2 * c);
    std::vector<int> y(n);
    for (auto& v : x) v = static_cast<float>(rng.normal());
    for (auto& v : q) v = static_cast<float>(rng.normal());
    for (auto& v : y) v = static_cast<int>(rng.uniform_int(2));

    auto probs = knn_predict(x.data(), y.data(), n, c, q.data(), 2, k, 2);
    for (int t = 0; t < 2; ++t) {
        std::vector<std::pair<double, int>> d;
        for (int i = 0; i < n; ++i) {
            double s = 0;
            for (int j = 0; j < c; ++j) {
                const double diff = x[i * c + j] - q[t * c + j];
                s += diff * diff;
            }
            d.push_back({s, i});
        }
        std::sort(d.begin(), d.end());
        double vote = 0;
        for (int j = 0; j < k; ++j) vote += y[d[j].second];
        CHECK(probs[t * 2 + 1] == doctest::Approx(vote / k));
    }
}

TEST_CASE("decision tree: linearly separable 1-D data gets one split") {
    std::vector<float> x{0.1f, 0.3f, 0.2f, 0.8f, 0.9f, 0.7f};
    std::vector<int> y{0, 0, 0, 1, 1, 1};
    DecisionTree t;
    t.fit(x.data(), y.data(), 6, 1, 2);
    CHECK(t.depth() == 2);  // root plus two leaves
    for (int i = 0; i < 6; ++i) {
        double p[2];
        t.predict_proba(&x[i], p);
        CHECK(p[y[i]] == 1.0);
    }
}

TEST_CASE("decision tree: constant features make a root-only prior") {
    std::vector<float> x{1, 1, 1, 1, 1, 1};
    std::vector<int> y{0, 0, 1, 0, 1, 0};
    DecisionTree t;
    t.fit(x.data(), y.data(), 6, 1, 2);
    CHECK(t.node_count() == 1);
    double p[2];
    t.predict_proba(&x[0], p);
    CHECK(p[0] == doctest::Approx(4.0 / 6.0));
    CHECK(p[1] == doctest::Approx(2.0 / 6.0));
}

namespace {

// brute-force best split: scan every feature and every midpoint threshold
struct BestSplit {
    double score = std::numeric_limits<double>::infinity();
    int feature = -1;
    float threshold = 0;
};

BestSplit enumerate_best_split(const std::vector<float>& x, const std::vector<int>& y,
                               const std::vector<int>& rows, int cols) {
    BestSplit best;
    const int n = static_cast<int>(rows.size());
    for (int f = 0; f < cols; ++f) {
        std::vector<float> vals;
        for (int r : rows) vals.push_back(x[r * cols + f]);
        std::sort(vals.begin(), vals.end());
        for (int i = 0; i + 1 < n; ++i) {
            if (vals[i] == vals[i + 1]) continue;
            const float thr = vals[i] + (vals[i + 1] - vals[i]) / 2.0f;
            int nl = 0, nr = 0, l1 = 0, r1 = 0;
            for (int r : rows) {
                if (x[r * cols + f] <= thr) {
                    ++nl;
                    l1 += y[r];
                } else {
                    ++nr;
                    r1 += y[r];
                }
            }
            auto gini = [](int total, int ones) {
                if (total == 0) return 0.0;
                const double p1 = static_cast<double>(ones) / total;
                return 1.0 - p1 * p1 - (1 - p1) * (1 - p1);
            };
            const double score = (nl * gini(nl, l1) + nr * gini(nr, r1)) / n;
            if (score < best.score) best = {score, f, thr};
        }
    }
    return best;
}

}  // namespace

TEST_CASE("decision tree solves XOR and matches split enumeration at each node") {
    // XOR-style: class = (x0 > 0.5) != (x1 > 0.5)
    std::vector<float> x;
    std::vector<int> y;
    Rng rng(43);
    for (int i = 0; i < 40; ++i) {
        const int a = static_cast<int>(rng.uniform_int(2));
        const int b = static_cast<int>(rng.uniform_int(2));
        x.push_back(static_cast<float>(a) + 0.1f * static_cast<float>(rng.normal()) * 0.5f);
        x.push_back(static_cast<float>(b) + 0.1f * static_cast<float>(rng.normal()) * 0.5f);
        y.push_back(a != b ? 1 : 0);
    }
    DecisionTree t;
    t.fit(x.data(), y.data(), 40, 2, 2);
    CHECK(t.depth() >= 2);
    int hits = 0;
    for (int i = 0; i < 40; ++i) {
        double p[2];
        t.predict_proba(&x[i * 2], p);
        hits += (p[1] > p[0] ? 1 : 0) == y[i];
    }
    CHECK(hits == 40);

    // walk the tree and re-derive each internal split by enumeration
    std::vector<std::pair<int, std::vector<int>>> stack;
    std::vector<int> all(40);
    std::iota(all.begin(), all.end(), 0);
    stack.push_back({0, all});
    int checked = 0;
    while (!stack.empty()) {
        auto [node, rows] = stack.back();
        stack.pop_back();
        const auto info = t.node_info(node);
        if (info.leaf) continue;
        const auto best = enumerate_best_split(x, y, rows, 2);
        CHECK(info.feature == best.feature);
        CHECK(info.threshold == doctest::Approx(best.threshold));
        ++checked;
        std::vector<int> left, right;
        for (int r : rows)
            (x[r * 2 + info.feature] <= info.threshold ? left : right).push_back(r);
        stack.push_back({info.left, left});
        stack.push_back({info.right, right});
    }
    CHECK(checked >= 2);
}

TEST_CASE("forest with one tree and no subsampling equals that tree on its bootstrap") {
    Rng rng(44);
    const int n = 30, c = 3;
    std::vector<float> x(n * c);
    std::vector<int> y(n);
    for (auto& v : x) v = static_cast<float>(rng.normal());
    for (int i = 0; i < n; ++i) y[i] = x[i * c] > 0 ? 1 : 0;

    ForestConfig fc;
    fc.n_trees = 1;
    fc.sqrt_features = false;
    fc.seed = 77;
    RandomForest rf;
    rf.fit(x.data(), y.data(), n, c, 2, fc);

    // replicate the bootstrap draw with the same generator
    Rng boot(77);
    std::vector<float> bx(n * c);
    std::vector<int> by(n);
    for (int i = 0; i < n; ++i) {
        const auto j = static_cast<std::int64_t>(boot.uniform_int(n));
        std::copy(x.begin() + j * c, x.begin() + (j + 1) * c, bx.begin() + i * c);
        by[i] = y[j];
    }
    DecisionTree t;
    t.fit(bx.data(), by.data(), n, c, 2);

    for (int i = 0; i < n; ++i) {
        double pf[2], pt[2];
        rf.predict_proba(&x[i * c], pf);
        t.predict_proba(&x[i * c], pt);
        CHECK(pf[0] == pt[0]);
        CHECK(pf[1] == pt[1]);
    }
}

TEST_CASE("forest is better than chance on a separable problem") {
    Rng rng(45);
    const int n = 60, c = 2;
    std::vector<float> x(n * c);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
        y[i] = static_cast<int>(rng.uniform_int(2));
        x[i * c] = static_cast<float>(rng.normal() + (y[i] ? 2.0 : -2.0));
        x[i * c + 1] = static_cast<float>(rng.normal());
    }
    ForestConfig fc;
    fc.n_trees = 25;
    fc.seed = 3;
    RandomForest rf;
    rf.fit(x.data(), y.data(), n, c, 2, fc);
    int hits = 0;
    for (int i = 0; i < n; ++i) {
        double p[2];
        rf.predict_proba(&x[i * c], p);
        hits += (p[1] > p[0] ? 1 : 0) == y[i];
    }
    CHECK(hits > 55);
}

// ---------------------------------------------------------------------------
// harness
// ---------------------------------------------------------------------------

TEST_CASE("evaluate_tasks: the full protocol yields 100 rows per task per method") {
    SyntheticPriorConfig cfg;
    cfg.rows = 60;
    cfg.cols = 3;
    auto tasks = make_holdout_tasks(cfg, 2, 50);
    EvalProtocol proto;
    proto.folds = 5;
    proto.repetitions = 20;
    proto.seed = 1;
    auto report = evaluate_tasks(tasks, {Method::knn}, nullptr, proto);
    CHECK(report.rows.size() == 2 * 100);
    CHECK(report.warnings.empty());
    std::map<std::string, int> per_task;
    for (const auto& r : report.rows) ++per_task[r.task];
    for (const auto& [t, n] : per_task) CHECK(n == 100);
}

TEST_CASE("evaluate_tasks twice with the same seed gives identical reports") {
    SyntheticPriorConfig cfg;
    cfg.rows = 40;
    cfg.cols = 3;
    auto tasks = make_holdout_tasks(cfg, 2, 51);
    EvalProtocol proto;
    proto.repetitions = 3;
    proto.seed = 5;
    auto a = evaluate_tasks(tasks, {Method::knn, Method::tree}, nullptr, proto);
    auto b = evaluate_tasks(tasks, {Method::knn, Method::tree}, nullptr, proto);
    REQUIRE(a.rows.size() == b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        CHECK(a.rows[i].roc_auc == b.rows[i].roc_auc);
        CHECK(a.rows[i].accuracy == b.rows[i].accuracy);
    }
}

TEST_CASE("evaluate_tasks subsamples to the protocol limit (stratified)") {
    SyntheticPriorConfig cfg;
    cfg.rows = 300;
    cfg.cols = 3;
    auto tasks = make_holdout_tasks(cfg, 1, 52);
    Rng rng(0);
    auto keep = stratified_subsample(tasks[0].y, 200, rng);
    CHECK(keep.size() == 200);
    int ones = 0;
    for (auto i : keep) ones += tasks[0].y[i];
    CHECK(ones == 100);  // the generator balances classes, the subsample keeps it
}

TEST_CASE("an untrained model scores near chance over 50 balanced tasks") {
    // null-model Monte Carlo: randomly initialized weights, 50 tasks
    SyntheticPriorConfig cfg;
    cfg.rows = 60;
    cfg.cols = 4;
    auto tasks = make_holdout_tasks(cfg, 50, 500);

    ModelConfig mcfg;
    mcfg.embedding_size = 16;
    mcfg.num_attention_heads = 2;
    mcfg.mlp_hidden_size = 32;
    mcfg.num_layers = 1;
    Rng rng(77);
    NanoModel nano{mcfg, ModelParameters<float>::init(mcfg, rng)};

    EvalProtocol proto;
    proto.folds = 5;
    proto.repetitions = 1;
    proto.seed = 3;
    auto report = evaluate_tasks(tasks, {Method::nano}, &nano, proto);
    REQUIRE(report.aggregates.size() == 1);
    CHECK(report.aggregates[0].mean_roc_auc > 0.43);
    CHECK(report.aggregates[0].mean_roc_auc < 0.57);
}

TEST_CASE("tasks violating preconditions are skipped with a warning") {
    SyntheticPriorConfig cfg;
    cfg.rows = 40;
    cfg.cols = 2;
    cfg.num_classes = 3;  // not binary
    auto tasks = make_holdout_tasks(cfg, 1, 53);
    SyntheticPriorConfig ok = cfg;
    ok.num_classes = 2;
    auto good = make_holdout_tasks(ok, 1, 54);
    tasks.push_back(good[0]);

    EvalProtocol proto;
    proto.repetitions = 1;
    auto report = evaluate_tasks(tasks, {Method::knn}, nullptr, proto);
    CHECK(report.warnings.size() == 1);
    CHECK(report.rows.size() == 5);  // only the good task contributes
}

TEST_CASE("learning_curve: baselines constant, snapshots ordered, reproducible") {
    SyntheticPriorConfig cfg;
    cfg.rows = 40;
    cfg.cols = 3;
    cfg.seed = 6;
    const std::string dump = "/tmp/nanotfm_curve_dump.h5";
    write_dump(dump, cfg, 64);

    auto tasks = make_holdout_tasks(cfg, 4, 60);
    ModelConfig mcfg;
    mcfg.embedding_size = 8;
    mcfg.num_attention_heads = 2;
    mcfg.mlp_hidden_size = 16;
    mcfg.num_layers = 1;
    TrainConfig tcfg;
    tcfg.lr = 5e-3;
    tcfg.num_steps = 12;
    tcfg.batch_size = 8;
    tcfg.warmup_steps = 4;
    tcfg.seed = 8;
    EvalProtocol proto;
    proto.repetitions = 2;
    proto.seed = 8;

    auto run = [&] {
        PriorDumpLoader loader(dump, tcfg.num_steps, tcfg.batch_size, tcfg.seed);
        return learning_curve(mcfg, tcfg, loader, tasks, {4, 12},
                              {Method::nano, Method::knn, Method::tree}, proto, 8);
    };
    const auto a = run();
    const auto b = run();
    REQUIRE(a.size() == 4);  // 2 snapshots + 2 baselines
    CHECK(a[0].method == "nano");
    CHECK(a[0].step == 4);
    CHECK(a[1].step == 12);
    CHECK(a[1].seconds > a[0].seconds);
    CHECK(a[2].method == "knn");
    CHECK(a[2].seconds == 0.0);
    CHECK(a[3].method == "tree");
    for (std::size_t i = 0; i < a.size(); ++i)
        CHECK(a[i].mean_roc_auc == b[i].mean_roc_auc);  // bit-reproducible metrics
    std::filesystem::remove(dump);
}
