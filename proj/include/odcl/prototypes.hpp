#pragma once

// Prototype calculation stage: per-category image and text prototypes from
// the frozen encoders, combined by elementwise summation into the
// intra-domain category-aware prototype. Training-free; never touches any
// parameter.

#include <cstdio>
#include <string>
#include <vector>

#include "odcl/encoder.hpp"
#include "odcl/errors.hpp"
#include "odcl/tensor.hpp"

namespace odcl {

enum class PrototypeKind { Combined, ImageOnly, TextOnly };

inline const char* to_string(PrototypeKind k) {
  switch (k) {
    case PrototypeKind::Combined: return "combined";
    case PrototypeKind::ImageOnly: return "image";
    case PrototypeKind::TextOnly: return "text";
  }
  return "?";
}

struct PrototypeOptions {
  // The encoders emit unit-norm features; these flags control the extra
  // renormalizations after averaging and after the elementwise sum. Both
  // on by default; off reproduces the unnormalized ablation variants.
  bool renormalize_mean = true;
  bool renormalize_combined = true;
};

// Mean of equal-length vectors, optionally renormalized to unit length.
// A degenerate near-zero mean falls back to the first vector and warns.
inline std::vector<double> normalized_mean(const std::vector<std::vector<double>>& features, bool renormalize,
                                           const char* what) {
  require(!features.empty(), std::string(what) + ": empty feature set");
  std::vector<double> mean(features[0].size(), 0.0);
  for (const auto& f : features) {
    require(f.size() == mean.size(), std::string(what) + ": feature width mismatch");
    for (std::size_t i = 0; i < f.size(); ++i) mean[i] += f[i];
  }
  for (double& v : mean) v /= static_cast<double>(features.size());
  if (!renormalize) return mean;
  double nrm = 0.0;
  for (double v : mean) nrm += v * v;
  nrm = std::sqrt(nrm);
  if (nrm < 1e-8) {
    std::fprintf(stderr, "[odcl] %s: near-zero mean (norm %.3e), falling back to first feature\n", what, nrm);
    return features[0];
  }
  for (double& v : mean) v /= nrm;
  return mean;
}

struct CategoryPrototype {
  int domain_index = 0;
  int category_index = 0;
  std::string name;
  std::vector<double> image_prototype;
  std::vector<double> text_prototype;
  std::vector<double> combined_prototype;
  int sample_count = 0;
  int template_count = 0;

  const std::vector<double>& vec(PrototypeKind kind) const {
    switch (kind) {
      case PrototypeKind::ImageOnly: return image_prototype;
      case PrototypeKind::TextOnly: return text_prototype;
      case PrototypeKind::Combined: return combined_prototype;
    }
    return combined_prototype;
  }
};

struct DomainPrototypeSet {
  int domain_index = 0;
  std::string domain_name;
  std::vector<CategoryPrototype> categories;

  std::vector<std::string> category_names() const {
    std::vector<std::string> out;
    out.reserve(categories.size());
    for (const auto& c : categories) out.push_back(c.name);
    return out;
  }

  // S x d matrix of prototypes in category order, as a constant graph leaf.
  Tensor matrix(PrototypeKind kind) const {
    require(!categories.empty(), "prototype set: no categories");
    const std::size_t d = categories[0].vec(kind).size();
    std::vector<double> rows;
    rows.reserve(categories.size() * d);
    for (const auto& c : categories) {
      require(c.vec(kind).size() == d, "prototype set: inconsistent widths");
      rows.insert(rows.end(), c.vec(kind).begin(), c.vec(kind).end());
    }
    return Tensor::from({categories.size(), d}, std::move(rows));
  }

  // One prototype per domain: normalized mean of the category prototypes.
  std::vector<double> domain_level(PrototypeKind kind) const {
    std::vector<std::vector<double>> vs;
    vs.reserve(categories.size());
    for (const auto& c : categories) vs.push_back(c.vec(kind));
    return normalized_mean(vs, true, "domain-level prototype");
  }
};

inline std::vector<double> compute_image_prototype(const DualEncoder& encoder,
                                                   const std::vector<std::vector<double>>& images,
                                                   const PrototypeOptions& opts = {}) {
  require(!images.empty(), "image prototype: empty image set");
  std::vector<std::vector<double>> feats;
  feats.reserve(images.size());
  for (const auto& img : images) feats.push_back(encoder.image_feature(img));
  return normalized_mean(feats, opts.renormalize_mean, "image prototype");
}

inline std::vector<double> compute_text_prototype(const DualEncoder& encoder, const std::string& category_name,
                                                  const std::vector<std::string>& templates,
                                                  const PrototypeOptions& opts = {}) {
  require(!templates.empty(), "text prototype: empty template list");
  std::vector<std::vector<double>> feats;
  feats.reserve(templates.size());
  for (const auto& t : templates) feats.push_back(encoder.text_feature(apply_template(t, category_name)));
  return normalized_mean(feats, opts.renormalize_mean, "text prototype");
}

inline DomainPrototypeSet build_domain_prototypes(const DualEncoder& encoder, int domain_index,
                                                  const std::string& domain_name,
                                                  const std::vector<std::string>& category_names,
                                                  const std::vector<std::vector<std::vector<double>>>& images_per_category,
                                                  const std::vector<std::string>& templates,
                                                  const PrototypeOptions& opts = {}) {
  require(!category_names.empty(), "domain prototypes: at least one category required");
  require(category_names.size() == images_per_category.size(),
          "domain prototypes: one image set per category required");
  DomainPrototypeSet set;
  set.domain_index = domain_index;
  set.domain_name = domain_name;
  for (std::size_t j = 0; j < category_names.size(); ++j) {
    CategoryPrototype p;
    p.domain_index = domain_index;
    p.category_index = static_cast<int>(j);
    p.name = category_names[j];
    p.image_prototype = compute_image_prototype(encoder, images_per_category[j], opts);
    p.text_prototype = compute_text_prototype(encoder, category_names[j], templates, opts);
    p.sample_count = static_cast<int>(images_per_category[j].size());
    p.template_count = static_cast<int>(templates.size());
    std::vector<double> sum(p.image_prototype.size());
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] = p.image_prototype[i] + p.text_prototype[i];
    if (opts.renormalize_combined) {
      p.combined_prototype = normalized_mean({sum}, true, "combined prototype");
    } else {
      p.combined_prototype = std::move(sum);
    }
    set.categories.push_back(std::move(p));
  }
  return set;
}

}  // namespace odcl
