#pragma once

// Training-free prototype Task-ID discriminator: a test image belongs to
// the seen domain whose best category prototype has the highest cosine
// similarity. Ties resolve to the lowest domain index.

#include <cmath>
#include <string>
#include <vector>

#include "odcl/errors.hpp"
#include "odcl/prototypes.hpp"

namespace odcl {

enum class PrototypeGranularity { Category, Domain };

inline const char* to_string(PrototypeGranularity g) {
  return g == PrototypeGranularity::Category ? "category" : "domain";
}

struct DiscriminatorOptions {
  PrototypeKind prototype = PrototypeKind::Combined;
  PrototypeGranularity granularity = PrototypeGranularity::Category;
};

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size(), "cosine: width mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(na) * std::sqrt(nb);
  if (denom < 1e-30) throw NumericalError("cosine: zero-norm vector");
  return dot / denom;
}

struct TaskIdPrediction {
  int domain_index = -1;       // argmax of domain_scores, lowest index on ties
  std::vector<double> domain_scores;
  int category_index = -1;     // winning category within the winning domain
};

inline TaskIdPrediction predict_task_id(const std::vector<double>& image_feature,
                                        const std::vector<DomainPrototypeSet>& seen_domains,
                                        const DiscriminatorOptions& opts = {}) {
  require(!seen_domains.empty(), "task-id: no seen domains registered");
  TaskIdPrediction out;
  std::vector<int> best_category(seen_domains.size(), -1);
  for (std::size_t d = 0; d < seen_domains.size(); ++d) {
    const DomainPrototypeSet& set = seen_domains[d];
    require(!set.categories.empty(), "task-id: domain without prototypes");
    double best = -2.0;
    int best_j = 0;
    for (std::size_t j = 0; j < set.categories.size(); ++j) {
      const double s = cosine(image_feature, set.categories[j].vec(opts.prototype));
      if (s > best) {
        best = s;
        best_j = static_cast<int>(j);
      }
    }
    best_category[d] = best_j;
    if (opts.granularity == PrototypeGranularity::Domain)
      best = cosine(image_feature, set.domain_level(opts.prototype));
    out.domain_scores.push_back(best);
  }
  out.domain_index = 0;
  for (std::size_t d = 1; d < out.domain_scores.size(); ++d)
    if (out.domain_scores[d] > out.domain_scores[static_cast<std::size_t>(out.domain_index)])
      out.domain_index = static_cast<int>(d);
  out.category_index = best_category[static_cast<std::size_t>(out.domain_index)];
  return out;
}

// Lower-triangular matrix of Task-ID accuracy: entry [u][n] (n <= u) is the
// fraction of domain-n test features routed to domain n when domains 0..u
// are registered. Cells above the diagonal stay 0, matching the published
// table convention.
struct TaskIdMatrix {
  std::size_t n = 0;
  std::vector<std::string> names;
  std::vector<double> cells;  // row-major

  double at(std::size_t stage, std::size_t dataset) const { return cells[stage * n + dataset]; }
  double& at(std::size_t stage, std::size_t dataset) { return cells[stage * n + dataset]; }
};

inline TaskIdMatrix task_id_accuracy_matrix(const std::vector<DomainPrototypeSet>& sets_in_task_order,
                                            const std::vector<std::vector<std::vector<double>>>& test_features_in_task_order,
                                            const DiscriminatorOptions& opts = {}) {
  const std::size_t n = sets_in_task_order.size();
  require(test_features_in_task_order.size() == n, "task-id matrix: one test feature set per domain required");
  TaskIdMatrix m;
  m.n = n;
  m.cells.assign(n * n, 0.0);
  for (const auto& s : sets_in_task_order) m.names.push_back(s.domain_name);
  for (std::size_t stage = 0; stage < n; ++stage) {
    const std::vector<DomainPrototypeSet> seen(sets_in_task_order.begin(),
                                               sets_in_task_order.begin() + static_cast<std::ptrdiff_t>(stage + 1));
    for (std::size_t dataset = 0; dataset <= stage; ++dataset) {
      const auto& feats = test_features_in_task_order[dataset];
      require(!feats.empty(), "task-id matrix: empty test set");
      std::size_t correct = 0;
      for (const auto& f : feats)
        if (predict_task_id(f, seen, opts).domain_index == static_cast<int>(dataset)) ++correct;
      m.at(stage, dataset) = static_cast<double>(correct) / static_cast<double>(feats.size());
    }
  }
  return m;
}

}  // namespace odcl
