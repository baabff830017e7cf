#include "fewshot/episodes.hpp"

#include <algorithm>
#include <string>

namespace fewshot {

Dataset Dataset::from_items(std::vector<Item> items) {
  Dataset ds;
  ds.items = std::move(items);
  std::size_t dim = ds.items.empty() ? 0 : ds.items[0].features.size();
  for (std::size_t i = 0; i < ds.items.size(); ++i) {
    const Item& it = ds.items[i];
    require(it.label >= 0, "dataset: negative class id");
    require(it.features.size() == dim, "dataset: mixed feature dimensions");
    ds.class_index[it.label].push_back(i);
  }
  return ds;
}

int Dataset::feature_dim() const {
  require(!items.empty(), "dataset: empty");
  return static_cast<int>(items[0].features.size());
}

Dataset make_gaussian_mixture(const MixtureSpec& spec) {
  require(spec.n_classes >= 1, "mixture: n_classes must be >= 1");
  require(spec.dim >= 1, "mixture: dim must be >= 1");
  require(spec.samples_per_class >= 1, "mixture: samples_per_class must be >= 1");
  require(spec.mean_scale >= 0.0, "mixture: mean_scale must be >= 0");
  require(spec.sigma_lo > 0.0, "mixture: sigma_lo must be > 0");
  require(spec.sigma_hi >= spec.sigma_lo, "mixture: sigma_hi < sigma_lo");

  Rng root(spec.seed);
  Rng mean_rng = root.fork(0);
  Rng spread_rng = root.fork(1);
  Rng noise_rng = root.fork(2);

  std::vector<Dataset::Item> items;
  items.reserve(static_cast<std::size_t>(spec.n_classes) *
                spec.samples_per_class);
  std::map<int, double> spreads;
  for (int c = 0; c < spec.n_classes; ++c) {
    Vec mean(spec.dim);
    for (auto& m : mean)
      m = (2.0 * mean_rng.next_double() - 1.0) * spec.mean_scale;
    double sigma =
        spec.sigma_lo + (spec.sigma_hi - spec.sigma_lo) * spread_rng.next_double();
    spreads[c] = sigma;
    for (int s = 0; s < spec.samples_per_class; ++s) {
      Vec x(spec.dim);
      for (int d = 0; d < spec.dim; ++d)
        x[d] = mean[d] + sigma * noise_rng.next_normal();
      items.push_back({std::move(x), c});
    }
  }
  Dataset ds = Dataset::from_items(std::move(items));
  ds.true_spread = std::move(spreads);
  return ds;
}

Episode sample_episode(const Dataset& ds, int n_way, int k_shot, int k_query,
                       Rng& rng) {
  require(n_way >= 1 && k_shot >= 1 && k_query >= 1,
          "sample_episode: N, K, K' must be >= 1");
  if (ds.n_classes() < static_cast<std::size_t>(n_way))
    throw SamplingError("sample_episode: need " + std::to_string(n_way) +
                        " classes, dataset has " +
                        std::to_string(ds.n_classes()));

  std::vector<int> ids;
  ids.reserve(ds.n_classes());
  for (const auto& [c, idx] : ds.class_index) ids.push_back(c);
  rng.partial_shuffle(ids, n_way);

  Episode ep;
  ep.classes.assign(ids.begin(), ids.begin() + n_way);
  std::size_t need = static_cast<std::size_t>(k_shot) + k_query;
  for (int c : ep.classes) {
    std::vector<std::size_t> pool = ds.class_index.at(c);
    if (pool.size() < need)
      throw SamplingError("sample_episode: class " + std::to_string(c) +
                          " has " + std::to_string(pool.size()) +
                          " items, needs " + std::to_string(need));
    rng.partial_shuffle(pool, need);
    for (int i = 0; i < k_shot; ++i)
      ep.support.emplace_back(ds.items[pool[i]].features, c);
    for (int i = k_shot; i < static_cast<int>(need); ++i)
      ep.query.emplace_back(ds.items[pool[i]].features, c);
  }
  return ep;
}

GreedySample greedy_sample_k2k(const MultiLabelDataset& ds, int n_way,
                               int k_shot, Rng& rng, long max_attempts) {
  require(n_way >= 1 && k_shot >= 1, "greedy_sample_k2k: N, K must be >= 1");
  require(max_attempts >= 1, "greedy_sample_k2k: max_attempts must be >= 1");
  if (ds.items.empty())
    throw SamplingError("greedy_sample_k2k: empty dataset");
  for (const auto& item : ds.items)
    for (const auto& [cls, count] : item.labels)
      require(count >= 1, "greedy_sample_k2k: label counts must be >= 1");

  GreedySample out;
  std::vector<bool> taken(ds.items.size(), false);
  const int cap = 2 * k_shot;

  auto satisfied = [&] {
    if (out.class_counts.size() != static_cast<std::size_t>(n_way))
      return false;
    for (const auto& [cls, count] : out.class_counts)
      if (count < k_shot) return false;
    return true;
  };

  long attempts = 0;
  while (!satisfied()) {
    if (++attempts > max_attempts)
      throw SamplingTimeout(
          "greedy_sample_k2k: no satisfying sample after " +
          std::to_string(max_attempts) + " draws");
    std::size_t pick = rng.next_below(ds.items.size());
    if (taken[pick]) continue;  // the sample is a set; re-draws are no-ops

    // Tentatively add the item's full label multiset, then apply the
    // "|Count| > N or any Count[i] > 2K" rejection rule.
    const auto& labels = ds.items[pick].labels;
    std::size_t distinct = out.class_counts.size();
    bool reject = false;
    for (const auto& [cls, count] : labels) {
      auto it = out.class_counts.find(cls);
      int next = (it == out.class_counts.end() ? 0 : it->second) + count;
      if (it == out.class_counts.end()) ++distinct;
      if (next > cap) reject = true;
    }
    if (distinct > static_cast<std::size_t>(n_way)) reject = true;
    if (reject) continue;

    taken[pick] = true;
    out.item_indices.push_back(pick);
    for (const auto& [cls, count] : labels) out.class_counts[cls] += count;
  }
  return out;
}

std::pair<Dataset, Dataset> split_train_test_classes(const Dataset& ds,
                                                     int n_test_classes,
                                                     Rng& rng) {
  require(n_test_classes >= 1, "split: n_test_classes must be >= 1");
  require(static_cast<std::size_t>(n_test_classes) < ds.n_classes(),
          "split: n_test_classes must leave at least one training class");

  std::vector<int> ids;
  for (const auto& [c, idx] : ds.class_index) ids.push_back(c);
  rng.partial_shuffle(ids, n_test_classes);
  std::map<int, bool> test_set;
  for (int i = 0; i < n_test_classes; ++i) test_set[ids[i]] = true;

  std::vector<Dataset::Item> train_items, test_items;
  for (const auto& item : ds.items) {
    if (test_set.count(item.label))
      test_items.push_back(item);
    else
      train_items.push_back(item);
  }
  Dataset train = Dataset::from_items(std::move(train_items));
  Dataset test = Dataset::from_items(std::move(test_items));
  for (const auto& [c, s] : ds.true_spread) {
    if (test_set.count(c))
      test.true_spread[c] = s;
    else
      train.true_spread[c] = s;
  }
  return {std::move(train), std::move(test)};
}

}  // namespace fewshot
