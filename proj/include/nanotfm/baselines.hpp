#pragma once

#include <cstdint>
#include <vector>

#include "nanotfm/rng.hpp"

// Classical baselines, written to match the cited library's defaults:
// k-nearest neighbors (k = 5), CART decision tree (Gini, best split, grown
// until pure or fewer than two samples), random forest (100 bootstrapped
// trees, sqrt(C) feature subsampling per split, mean of leaf distributions).

namespace nanotfm::eval {

// Euclidean distances, vote fractions among the k nearest; distance ties are
// broken by lower training-row index. Returns (n_test x num_classes).
std::vector<double> knn_predict(const float* train_x, const int* train_y,
                                std::int64_t n_train, std::int64_t cols,
                                const float* test_x, std::int64_t n_test, int k,
                                int num_classes);

struct TreeConfig {
    int min_samples_split = 2;
    int max_features = 0;  // 0 = consider all features at every split
};

class DecisionTree {
public:
    // rng is only consumed when max_features is in (0, cols)
    void fit(const float* x, const int* y, std::int64_t n, std::int64_t cols,
             int num_classes, const TreeConfig& cfg = {}, Rng* rng = nullptr);
    void predict_proba(const float* row, double* out) const;
    int depth() const;
    std::int64_t node_count() const { return static_cast<std::int64_t>(nodes_.size()); }

    struct SplitInfo {
        bool leaf = true;
        int feature = -1;
        float threshold = 0.0f;
        int left = -1, right = -1;
    };
    SplitInfo node_info(int i) const {
        const auto& n = nodes_.at(i);
        return {n.feature < 0, n.feature, n.threshold, n.left, n.right};
    }

private:
    struct NodeT {
        int feature = -1;  // -1 marks a leaf
        float threshold = 0.0f;
        int left = -1, right = -1;
        std::vector<double> dist;  // class fractions at the leaf
    };
    int build(const float* x, const int* y, std::vector<std::int64_t>& idx,
              std::int64_t lo, std::int64_t hi, const TreeConfig& cfg, Rng* rng);
    std::vector<NodeT> nodes_;
    std::int64_t cols_ = 0;
    int num_classes_ = 0;
};

struct ForestConfig {
    int n_trees = 100;
    bool sqrt_features = true;  // false = all features at every split
    std::uint64_t seed = 0;
};

class RandomForest {
public:
    void fit(const float* x, const int* y, std::int64_t n, std::int64_t cols,
             int num_classes, const ForestConfig& cfg = {});
    void predict_proba(const float* row, double* out) const;

private:
    std::vector<DecisionTree> trees_;
    int num_classes_ = 0;
};

}  // namespace nanotfm::eval
