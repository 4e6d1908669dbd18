#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nanotfm/baselines.hpp"
#include "nanotfm/model.hpp"
#include "nanotfm/optim.hpp"
#include "nanotfm/prior.hpp"

// Metrics, the cross-validation harness and the learning-curve experiment.

namespace nanotfm::eval {

struct EvalTask {
    std::string name;
    std::int64_t rows = 0, cols = 0;
    std::vector<float> x;  // rows x cols, row-major
    std::vector<int> y;    // labels in [0, num_classes)
    int num_classes = 0;
};

// Mann-Whitney: P(score+ > score-) + 0.5 P(tie), via average ranks in
// O(n log n). Labels must contain both classes.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

// assignments[rep][i] = fold of sample i; per repetition each fold's class
// counts differ from exact proportionality by at most one. Every class needs
// at least k members.
std::vector<std::vector<int>> stratified_kfold(const std::vector<int>& y, int k,
                                               int repetitions, std::uint64_t seed);

// Stratified subsample of at most max_rows indices (seeded, largest-remainder
// quotas per class). Returns all indices when the task is already small.
std::vector<std::int64_t> stratified_subsample(const std::vector<int>& y,
                                               std::int64_t max_rows, Rng& rng);

enum class Method { nano, knn, tree, forest };
const char* method_name(Method m);
std::vector<Method> parse_methods(const std::string& csv);  // "nano,knn,tree,forest"

struct EvalProtocol {
    int folds = 5;
    int repetitions = 20;
    int subsample = 200;
    std::uint64_t seed = 0;
    int knn_k = 5;
    ForestConfig forest{};
};

struct NanoModel {
    ModelConfig config;
    ModelParameters<float> params;
};

struct MetricRow {
    std::string task;
    int fold = 0;
    int repetition = 0;
    std::string method;
    double roc_auc = 0.0;
    double accuracy = 0.0;
};

struct MetricAggregate {
    std::string method;
    double mean_roc_auc = 0.0;
    double mean_accuracy = 0.0;
    double cumulative_train_seconds = 0.0;
};

struct MetricReport {
    std::vector<MetricRow> rows;
    std::vector<MetricAggregate> aggregates;
    std::vector<std::string> warnings;  // skipped tasks, with reasons
};

// In-context prediction for one table: the train part is the context, the
// test part the query rows. Returns (n_test x num_outputs) probabilities.
std::vector<double> nano_predict(const NanoModel& model, const float* train_x,
                                 const int* train_y, std::int64_t n_train,
                                 std::int64_t cols, const float* test_x,
                                 std::int64_t n_test);

// Subsample, stratified k-fold x repetitions, ROC AUC and accuracy per
// (task, fold, repetition, method). Tasks violating the preconditions are
// skipped with a warning. nano may be null when not among the methods.
MetricReport evaluate_tasks(const std::vector<EvalTask>& tasks,
                            const std::vector<Method>& methods, const NanoModel* nano,
                            const EvalProtocol& proto);

// Held-out synthetic tasks from the same generator family (seed offsets make
// them disjoint from any dump written with a different seed).
std::vector<EvalTask> make_holdout_tasks(const SyntheticPriorConfig& cfg, int count,
                                         std::uint64_t seed);

struct CurvePoint {
    std::string method;
    double seconds = 0.0;  // cumulative training seconds; 0 for baselines
    double mean_roc_auc = 0.0;
    int step = 0;  // snapshot step; 0 for baselines
};

// Trains from scratch, snapshotting at the given steps (training clock stops
// while evaluating), evaluates every snapshot and each baseline once.
std::vector<CurvePoint> learning_curve(const ModelConfig& mcfg, const TrainConfig& tcfg,
                                       BatchSource& source,
                                       const std::vector<EvalTask>& tasks,
                                       const std::vector<int>& snapshot_steps,
                                       const std::vector<Method>& methods,
                                       const EvalProtocol& proto,
                                       std::uint64_t init_seed);

}  // namespace nanotfm::eval
