// Datasets, synthetic Gaussian-mixture generation, N-way K-shot episode
// sampling, class-disjoint train/test splits, and the greedy N-way K~2K
// sampler for multi-label items.
#pragma once

#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include "fewshot/numerics.hpp"

namespace fewshot {

// Thrown when a sampling request cannot be satisfied by the data
// (not enough classes, not enough items in a class, ...).
class SamplingError : public std::runtime_error {
 public:
  explicit SamplingError(const std::string& what) : std::runtime_error(what) {}
};

// Thrown by greedy_sample_k2k when max_attempts draws pass without reaching a
// satisfying sample.
class SamplingTimeout : public SamplingError {
 public:
  explicit SamplingTimeout(const std::string& what) : SamplingError(what) {}
};

struct Dataset {
  struct Item {
    Vec features;
    int label = 0;
  };
  std::vector<Item> items;
  std::map<int, std::vector<std::size_t>> class_index;
  // Generator ground truth (sigma per class); empty for loaded data.
  std::map<int, double> true_spread;

  static Dataset from_items(std::vector<Item> items);
  std::size_t n_classes() const { return class_index.size(); }
  int feature_dim() const;
};

struct Episode {
  std::vector<std::pair<Vec, int>> support;  // N*K
  std::vector<std::pair<Vec, int>> query;    // N*K'
  std::vector<int> classes;                  // the N sampled class ids
};

struct MixtureSpec {
  int n_classes = 0;
  int dim = 0;
  int samples_per_class = 0;
  double mean_scale = 1.0;   // class means uniform in [-mean_scale, mean_scale]^dim
  double sigma_lo = 1.0;     // per-class spread uniform in [sigma_lo, sigma_hi]
  double sigma_hi = 1.0;
  std::uint64_t seed = 0;
};

struct MultiLabelDataset {
  struct Item {
    int id = 0;
    std::map<int, int> labels;  // class id -> count, all counts >= 1
  };
  std::vector<Item> items;
};

Dataset make_gaussian_mixture(const MixtureSpec& spec);

Episode sample_episode(const Dataset& ds, int n_way, int k_shot, int k_query,
                       Rng& rng);

struct GreedySample {
  std::vector<std::size_t> item_indices;  // accepted items, in draw order
  std::map<int, int> class_counts;        // exactly N classes, counts in [K, 2K]
};

GreedySample greedy_sample_k2k(const MultiLabelDataset& ds, int n_way,
                               int k_shot, Rng& rng,
                               long max_attempts = 1000000);

// Moves n_test_classes whole classes (chosen uniformly) into the second
// dataset; class ids are preserved so the two halves stay provably disjoint.
std::pair<Dataset, Dataset> split_train_test_classes(const Dataset& ds,
                                                     int n_test_classes,
                                                     Rng& rng);

}  // namespace fewshot
