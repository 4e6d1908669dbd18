#include "nanotfm/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "nanotfm/common.hpp"

namespace nanotfm::eval {

std::vector<double> knn_predict(const float* train_x, const int* train_y,
                                std::int64_t n_train, std::int64_t cols,
                                const float* test_x, std::int64_t n_test, int k,
                                int num_classes) {
    if (n_train <= 0) throw ConfigError("knn: empty training set");
    if (k <= 0 || k > n_train)
        throw ConfigError("knn: k = " + std::to_string(k) + " with " +
                          std::to_string(n_train) + " training points");
    std::vector<double> out(static_cast<std::size_t>(n_test) * num_classes, 0.0);
    std::vector<std::pair<double, std::int64_t>> dist(n_train);
    for (std::int64_t t = 0; t < n_test; ++t) {
        const float* q = test_x + t * cols;
        for (std::int64_t i = 0; i < n_train; ++i) {
            const float* p = train_x + i * cols;
            double d = 0.0;
            for (std::int64_t c = 0; c < cols; ++c) {
                const double diff = static_cast<double>(p[c]) - q[c];
                d += diff * diff;
            }
            dist[i] = {d, i};
        }
        std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
        double* row = out.data() + static_cast<std::size_t>(t) * num_classes;
        for (int j = 0; j < k; ++j) row[train_y[dist[j].second]] += 1.0;
        for (int c = 0; c < num_classes; ++c) row[c] /= k;
    }
    return out;
}

// ---------------------------------------------------------------------------
// CART
// ---------------------------------------------------------------------------

namespace {

double gini(const std::vector<std::int64_t>& counts, std::int64_t total) {
    if (total == 0) return 0.0;
    double g = 1.0;
    for (auto c : counts) {
        const double p = static_cast<double>(c) / total;
        g -= p * p;
    }
    return g;
}

}  // namespace

void DecisionTree::fit(const float* x, const int* y, std::int64_t n, std::int64_t cols,
                       int num_classes, const TreeConfig& cfg, Rng* rng) {
    if (n <= 0) throw ConfigError("decision tree: empty training set");
    nodes_.clear();
    cols_ = cols;
    num_classes_ = num_classes;
    std::vector<std::int64_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    build(x, y, idx, 0, n, cfg, rng);
}

int DecisionTree::build(const float* x, const int* y, std::vector<std::int64_t>& idx,
                        std::int64_t lo, std::int64_t hi, const TreeConfig& cfg,
                        Rng* rng) {
    const std::int64_t n = hi - lo;
    std::vector<std::int64_t> counts(num_classes_, 0);
    for (std::int64_t i = lo; i < hi; ++i) ++counts[y[idx[i]]];
    const double node_gini = gini(counts, n);

    const int me = static_cast<int>(nodes_.size());
    nodes_.emplace_back();

    auto make_leaf = [&] {
        auto& nd = nodes_[me];
        nd.dist.resize(num_classes_);
        for (int c = 0; c < num_classes_; ++c)
            nd.dist[c] = static_cast<double>(counts[c]) / n;
        return me;
    };
    if (n < cfg.min_samples_split || node_gini == 0.0) return make_leaf();

    // candidate features: all, or a random subset of max_features per split
    std::vector<std::int64_t> feats(cols_);
    std::iota(feats.begin(), feats.end(), 0);
    std::int64_t nf = cols_;
    if (cfg.max_features > 0 && cfg.max_features < cols_ && rng) {
        nf = cfg.max_features;
        for (std::int64_t i = 0; i < nf; ++i) {
            const std::int64_t j =
                i + static_cast<std::int64_t>(rng->uniform_int(cols_ - i));
            std::swap(feats[i], feats[j]);
        }
        std::sort(feats.begin(), feats.begin() + nf);  // deterministic scan order
    }

    double best_score = std::numeric_limits<double>::infinity();
    std::int64_t best_feature = -1;
    float best_threshold = 0.0f;

    std::vector<std::pair<float, int>> vals(n);
    std::vector<std::int64_t> left_counts(num_classes_);
    for (std::int64_t fi = 0; fi < nf; ++fi) {
        const std::int64_t f = feats[fi];
        for (std::int64_t i = 0; i < n; ++i)
            vals[i] = {x[idx[lo + i] * cols_ + f], y[idx[lo + i]]};
        std::sort(vals.begin(), vals.end(),
                  [](const auto& a, const auto& b) { return a.first < b.first; });
        if (vals.front().first == vals.back().first) continue;  // constant feature

        std::fill(left_counts.begin(), left_counts.end(), 0);
        std::int64_t nl = 0;
        for (std::int64_t i = 0; i + 1 < n; ++i) {
            ++left_counts[vals[i].second];
            ++nl;
            if (vals[i].first == vals[i + 1].first) continue;
            double gl = 1.0, gr = 1.0;
            const std::int64_t nr = n - nl;
            for (int c = 0; c < num_classes_; ++c) {
                const double pl = static_cast<double>(left_counts[c]) / nl;
                const double pr =
                    static_cast<double>(counts[c] - left_counts[c]) / nr;
                gl -= pl * pl;
                gr -= pr * pr;
            }
            const double score = (nl * gl + nr * gr) / n;
            if (score < best_score) {
                best_score = score;
                best_feature = f;
                best_threshold =
                    vals[i].first + (vals[i + 1].first - vals[i].first) / 2.0f;
            }
        }
    }
    // zero-gain splits are allowed (XOR-style data needs them); recursion
    // still terminates because both children are non-empty
    if (best_feature < 0) return make_leaf();

    // partition idx[lo, hi) in place, preserving relative order
    std::vector<std::int64_t> left, right;
    left.reserve(n);
    right.reserve(n);
    for (std::int64_t i = lo; i < hi; ++i) {
        if (x[idx[i] * cols_ + best_feature] <= best_threshold) left.push_back(idx[i]);
        else right.push_back(idx[i]);
    }
    if (left.empty() || right.empty()) return make_leaf();
    std::copy(left.begin(), left.end(), idx.begin() + lo);
    std::copy(right.begin(), right.end(), idx.begin() + lo + left.size());

    nodes_[me].feature = static_cast<int>(best_feature);
    nodes_[me].threshold = best_threshold;
    const int l = build(x, y, idx, lo, lo + static_cast<std::int64_t>(left.size()), cfg, rng);
    nodes_[me].left = l;
    const int r = build(x, y, idx, lo + static_cast<std::int64_t>(left.size()), hi, cfg, rng);
    nodes_[me].right = r;
    return me;
}

void DecisionTree::predict_proba(const float* row, double* out) const {
    int cur = 0;
    while (nodes_[cur].feature >= 0)
        cur = row[nodes_[cur].feature] <= nodes_[cur].threshold ? nodes_[cur].left
                                                                : nodes_[cur].right;
    for (int c = 0; c < num_classes_; ++c) out[c] = nodes_[cur].dist[c];
}

int DecisionTree::depth() const {
    if (nodes_.empty()) return 0;
    // iterative depth over the explicit node array
    std::vector<std::pair<int, int>> stack{{0, 1}};
    int best = 0;
    while (!stack.empty()) {
        auto [i, d] = stack.back();
        stack.pop_back();
        best = std::max(best, d);
        if (nodes_[i].feature >= 0) {
            stack.push_back({nodes_[i].left, d + 1});
            stack.push_back({nodes_[i].right, d + 1});
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// forest
// ---------------------------------------------------------------------------

void RandomForest::fit(const float* x, const int* y, std::int64_t n, std::int64_t cols,
                       int num_classes, const ForestConfig& cfg) {
    if (n <= 0) throw ConfigError("random forest: empty training set");
    num_classes_ = num_classes;
    trees_.assign(cfg.n_trees, {});
    Rng rng(cfg.seed);
    TreeConfig tc;
    tc.max_features = cfg.sqrt_features
                          ? std::max<int>(1, static_cast<int>(std::sqrt(
                                                 static_cast<double>(cols))))
                          : 0;
    std::vector<float> bx(static_cast<std::size_t>(n) * cols);
    std::vector<int> by(n);
    for (auto& tree : trees_) {
        for (std::int64_t i = 0; i < n; ++i) {
            const std::int64_t j = static_cast<std::int64_t>(rng.uniform_int(n));
            std::copy(x + j * cols, x + (j + 1) * cols, bx.begin() + i * cols);
            by[i] = y[j];
        }
        tree.fit(bx.data(), by.data(), n, cols, num_classes, tc, &rng);
    }
}

void RandomForest::predict_proba(const float* row, double* out) const {
    std::vector<double> acc(num_classes_, 0.0);
    std::vector<double> one(num_classes_);
    for (const auto& t : trees_) {
        t.predict_proba(row, one.data());
        for (int c = 0; c < num_classes_; ++c) acc[c] += one[c];
    }
    for (int c = 0; c < num_classes_; ++c) out[c] = acc[c] / trees_.size();
}

}  // namespace nanotfm::eval
