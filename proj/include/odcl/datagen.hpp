#pragma once

// Seeded synthetic multi-domain benchmark. Every category has a latent
// code in image space (4x4 grid of 8-dim patches, 128 values) composed of
// word semantics plus a domain offset:
//
//   latent(category) = g(noun) + 0.35 * g(modifier) + centre(domain)
//
// where g(word) is a fixed seeded Gaussian per vocabulary word and the
// domain centres sit at exact pairwise distance separation * sigma
// (orthonormal directions, so "separation" reads in units of the
// within-category noise). Images are latent + N(0, sigma^2) per value.
// Category names are "<modifier> <noun>" pairs drawn from the same word
// pools, so text semantics and image semantics agree and a contrastively
// pretrained encoder generalizes zero-shot to unseen word pairs.
//
// separation == 0 degenerates to one shared category set (same names and
// latents replicated into every domain): the domains become statistically
// indistinguishable, which is what drives a task-id discriminator to
// chance accuracy.
//
// Overlap pairs rewrite category b's latent to an exact declared cosine
// against category a's latent, with either a shared name or a near-
// duplicate name (same noun, fresh modifier).

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "odcl/encoder.hpp"
#include "odcl/errors.hpp"
#include "odcl/serialize.hpp"
#include "odcl/tensor.hpp"

namespace odcl {

struct OverlapSpec {
  int domain_a = 0;
  int category_a = 0;
  int domain_b = 1;
  int category_b = 0;
  double similarity = 1.0;  // cosine of the two latent codes, in [0, 1]
  bool shared_name = false; // same name string vs near-duplicate name
};

struct BenchmarkSpec {
  int domains = 4;
  int categories_per_domain = 5;
  int train_per_category = 16;
  int test_per_category = 8;
  double separation = 6.0;   // domain-centre spacing in units of noise sigma
  double noise_sigma = 0.08; // per-value Gaussian noise
  std::vector<OverlapSpec> overlaps;
  std::uint64_t seed = 7;
  int pretext_categories = 12;
  int pretext_train_per_category = 20;
  int pretext_test_per_category = 8;

  void validate() const {
    require(domains >= 1, "benchmark spec: at least one domain");
    require(categories_per_domain >= 1, "benchmark spec: at least one category per domain");
    require(train_per_category >= 1 && test_per_category >= 1, "benchmark spec: sample counts must be positive");
    require(separation >= 0.0, "benchmark spec: separation must be non-negative");
    require(noise_sigma > 0.0, "benchmark spec: noise sigma must be positive");
    require(pretext_categories >= 1 && pretext_train_per_category >= 1 && pretext_test_per_category >= 1,
            "benchmark spec: pretext sizes must be positive");
    for (const auto& o : overlaps) {
      require(o.similarity >= 0.0 && o.similarity <= 1.0, "benchmark spec: overlap similarity must lie in [0, 1]");
      require(o.domain_a >= 0 && o.domain_a < domains && o.domain_b >= 0 && o.domain_b < domains,
              "benchmark spec: overlap domain out of range");
      require(o.domain_a != o.domain_b, "benchmark spec: overlap must cross domains");
      require(o.category_a >= 0 && o.category_a < categories_per_domain && o.category_b >= 0 &&
                  o.category_b < categories_per_domain,
              "benchmark spec: overlap category out of range");
    }
  }
};

struct Sample {
  std::vector<double> image;
  int label = 0;
};

struct DomainData {
  std::string name;
  std::vector<std::string> categories;
  std::vector<std::vector<double>> category_latents;
  std::vector<Sample> train, test;

  std::vector<std::vector<double>> train_images_of(int category) const {
    std::vector<std::vector<double>> out;
    for (const auto& s : train)
      if (s.label == category) out.push_back(s.image);
    return out;
  }
  std::vector<std::vector<std::vector<double>>> train_images_by_category() const {
    std::vector<std::vector<std::vector<double>>> out(categories.size());
    for (const auto& s : train) out[static_cast<std::size_t>(s.label)].push_back(s.image);
    return out;
  }
};

struct SyntheticDataset {
  BenchmarkSpec spec;
  Vocabulary vocab;
  std::vector<std::string> templates;
  std::vector<DomainData> domains;
  DomainData pretext;
};

namespace words {

inline const std::array<const char*, 12> kModifiers = {"amber", "birch",  "cobalt", "dusty", "ember", "fen",
                                                       "gilded", "hollow", "ivory",  "jade",  "karst", "lunar"};
inline const std::array<const char*, 12> kNouns = {"chair",   "crane", "dune",   "ferry", "glacier", "harp",
                                                   "kettle", "lantern", "mill", "otter", "prism",   "saddle"};
inline const std::array<const char*, 15> kTemplateWords = {"a",     "photo",     "of",       "an",   "image",
                                                           "picture", "drawing", "close",    "up",   "small",
                                                           "rendering", "snapshot", "view", "sketch", "the"};
inline const std::array<const char*, 12> kDomainNames = {"aria",  "brook", "cedar", "delta", "evergreen", "flint",
                                                         "grove", "heath", "inlet", "juniper", "knoll",   "larch"};

}  // namespace words

inline std::vector<std::string> clip_style_templates() {
  return {
      "a photo of a {}",          "an image of a {}",        "a picture of a {}",    "a drawing of a {}",
      "a close up photo of a {}", "a small rendering of a {}", "a snapshot view of a {}", "a sketch of the {}",
  };
}

inline Vocabulary benchmark_vocabulary() {
  std::vector<std::string> list;
  for (const char* w : words::kTemplateWords) list.emplace_back(w);
  for (const char* w : words::kModifiers) list.emplace_back(w);
  for (const char* w : words::kNouns) list.emplace_back(w);
  return Vocabulary::from_words(std::move(list));
}

namespace detail {

inline std::uint64_t word_seed(const std::string& word, std::uint64_t seed) {
  return fnv1a(reinterpret_cast<const std::uint8_t*>(word.data()), word.size(), seed ^ 0x9e3779b97f4a7c15ULL);
}

inline std::vector<double> word_latent(const std::string& word, std::uint64_t seed, std::size_t dim) {
  std::mt19937_64 rng(word_seed(word, seed));
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
  std::vector<double> v(dim);
  for (double& x : v) x = dist(rng);
  return v;
}

// Noun carries the bulk of the semantics, modifiers shade it.
inline std::vector<double> name_latent(const std::string& name, std::uint64_t seed, std::size_t dim) {
  std::istringstream in(name);
  std::vector<std::string> parts;
  std::string w;
  while (in >> w) parts.push_back(w);
  require(!parts.empty(), "name latent: empty name");
  std::vector<double> out = word_latent(parts.back(), seed, dim);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    const std::vector<double> g = word_latent(parts[i], seed, dim);
    for (std::size_t j = 0; j < dim; ++j) out[j] += 0.35 * g[j];
  }
  return out;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}
inline double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

// Orthonormal domain directions via Gram-Schmidt on seeded Gaussians.
inline std::vector<std::vector<double>> orthonormal_directions(std::size_t count, std::size_t dim,
                                                               std::mt19937_64& rng) {
  require(count <= dim, "domain centres: more domains than latent dimensions");
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<std::vector<double>> dirs;
  while (dirs.size() < count) {
    std::vector<double> v(dim);
    for (double& x : v) x = dist(rng);
    for (const auto& u : dirs) {
      const double p = dot(v, u);
      for (std::size_t i = 0; i < dim; ++i) v[i] -= p * u[i];
    }
    const double n = norm(v);
    if (n < 1e-6) continue;
    for (double& x : v) x /= n;
    dirs.push_back(std::move(v));
  }
  return dirs;
}

inline void fill_samples(DomainData& domain, const BenchmarkSpec& spec, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  const auto draw = [&](int category) {
    Sample s;
    s.label = category;
    s.image = domain.category_latents[static_cast<std::size_t>(category)];
    for (double& v : s.image) v += noise(rng);
    return s;
  };
  for (int j = 0; j < static_cast<int>(domain.categories.size()); ++j)
    for (int m = 0; m < spec.train_per_category; ++m) domain.train.push_back(draw(j));
  for (int j = 0; j < static_cast<int>(domain.categories.size()); ++j)
    for (int m = 0; m < spec.test_per_category; ++m) domain.test.push_back(draw(j));
}

}  // namespace detail

inline SyntheticDataset generate(const BenchmarkSpec& spec) {
  spec.validate();
  SyntheticDataset ds;
  ds.spec = spec;
  ds.vocab = benchmark_vocabulary();
  ds.templates = clip_style_templates();
  const std::size_t dim = 16 * 8;  // patch grid fixed by the encoder front-end

  std::mt19937_64 rng(spec.seed);

  // pretext category names pair modifier i with noun i, covering the pools
  std::vector<std::string> pretext_names;
  for (int i = 0; i < spec.pretext_categories; ++i) {
    const std::size_t m = static_cast<std::size_t>(i) % words::kModifiers.size();
    const std::size_t n = static_cast<std::size_t>(i) % words::kNouns.size();
    pretext_names.push_back(std::string(words::kModifiers[m]) + " " + words::kNouns[n]);
  }

  // benchmark names: every other modifier/noun pair, shuffled
  std::vector<std::string> candidates;
  for (std::size_t m = 0; m < words::kModifiers.size(); ++m)
    for (std::size_t n = 0; n < words::kNouns.size(); ++n) {
      if (m % words::kNouns.size() == n) continue;  // reserved for pretext
      candidates.push_back(std::string(words::kModifiers[m]) + " " + words::kNouns[n]);
    }
  std::shuffle(candidates.begin(), candidates.end(), rng);
  const std::size_t need =
      static_cast<std::size_t>(spec.separation == 0.0 ? spec.categories_per_domain
                                                      : spec.domains * spec.categories_per_domain);
  require(need <= candidates.size(), "benchmark spec: word pool too small for the requested categories");

  std::vector<std::string> domain_names;
  for (int d = 0; d < spec.domains; ++d)
    domain_names.push_back(words::kDomainNames[static_cast<std::size_t>(d) % words::kDomainNames.size()]);
  const auto centres = detail::orthonormal_directions(static_cast<std::size_t>(spec.domains), dim, rng);
  const double centre_scale = spec.separation * spec.noise_sigma / std::sqrt(2.0);

  std::size_t next_candidate = 0;
  for (int d = 0; d < spec.domains; ++d) {
    DomainData domain;
    domain.name = domain_names[static_cast<std::size_t>(d)];
    for (int j = 0; j < spec.categories_per_domain; ++j) {
      // separation 0: one shared category set replicated into every domain
      const std::string name = spec.separation == 0.0
                                   ? candidates[static_cast<std::size_t>(j)]
                                   : candidates[next_candidate++];
      domain.categories.push_back(name);
      std::vector<double> latent = detail::name_latent(name, spec.seed, dim);
      for (std::size_t i = 0; i < dim; ++i) latent[i] += centre_scale * centres[static_cast<std::size_t>(d)][i];
      domain.category_latents.push_back(std::move(latent));
    }
    ds.domains.push_back(std::move(domain));
  }

  // overlap pairs: rotate category b's latent to the declared cosine
  for (const auto& o : spec.overlaps) {
    DomainData& da = ds.domains[static_cast<std::size_t>(o.domain_a)];
    DomainData& db = ds.domains[static_cast<std::size_t>(o.domain_b)];
    const std::vector<double>& ca = da.category_latents[static_cast<std::size_t>(o.category_a)];
    std::vector<double>& cb = db.category_latents[static_cast<std::size_t>(o.category_b)];
    const double na = detail::norm(ca), nb = detail::norm(cb);
    std::vector<double> u(ca);
    for (double& v : u) v /= na;
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> w(dim);
    for (double& v : w) v = dist(rng);
    const double p = detail::dot(w, u);
    for (std::size_t i = 0; i < dim; ++i) w[i] -= p * u[i];
    const double nw = detail::norm(w);
    require(nw > 1e-9, "overlap: degenerate orthogonal direction");
    const double s = o.similarity, t = std::sqrt(1.0 - s * s);
    for (std::size_t i = 0; i < dim; ++i) cb[i] = nb * (s * u[i] + t * w[i] / nw);

    const std::string& name_a = da.categories[static_cast<std::size_t>(o.category_a)];
    if (o.shared_name) {
      db.categories[static_cast<std::size_t>(o.category_b)] = name_a;
    } else {
      // near-duplicate: keep the noun, swap in an unused modifier
      std::istringstream in(name_a);
      std::string modifier, noun;
      in >> modifier >> noun;
      for (const char* m : words::kModifiers) {
        const std::string candidate = std::string(m) + " " + noun;
        bool used = candidate == name_a;
        for (const auto& dd : ds.domains)
          for (const auto& cname : dd.categories) used = used || cname == candidate;
        if (!used) {
          db.categories[static_cast<std::size_t>(o.category_b)] = candidate;
          break;
        }
      }
    }
  }

  // pretext domain: pure word semantics, no centre offset
  ds.pretext.name = "pretext";
  for (const auto& name : pretext_names) {
    ds.pretext.categories.push_back(name);
    ds.pretext.category_latents.push_back(detail::name_latent(name, spec.seed, dim));
  }

  // per-domain sample noise from derived seeds
  for (int d = 0; d < spec.domains; ++d) {
    std::mt19937_64 drng(spec.seed ^ fnv1a(reinterpret_cast<const std::uint8_t*>(&d), sizeof d, 0x0ddc1adULL));
    detail::fill_samples(ds.domains[static_cast<std::size_t>(d)], spec, drng);
  }
  {
    BenchmarkSpec pretext_sizes = spec;
    pretext_sizes.train_per_category = spec.pretext_train_per_category;
    pretext_sizes.test_per_category = spec.pretext_test_per_category;
    std::mt19937_64 prng(spec.seed ^ 0x9027e575e7ULL);
    detail::fill_samples(ds.pretext, pretext_sizes, prng);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// encoder pretraining: symmetric contrastive alignment on the pretext
// domain, then freeze.

struct PretrainOptions {
  int batch_size = 16;
  double learning_rate = 1e-3;
  double temperature = 0.07;
  std::uint64_t seed = 1;
};

struct PretrainStats {
  std::vector<double> losses;
};

inline PretrainStats pretrain_encoders(DualEncoder& encoder, const SyntheticDataset& data, int steps,
                                       const PretrainOptions& opts = {}) {
  require(steps >= 0, "pretrain: negative step count");
  PretrainStats stats;
  if (steps == 0) {
    encoder.weights().set_trainable(false);
    return stats;  // random-init weights pass through unchanged
  }
  const DomainData& pretext = data.pretext;
  const int categories = static_cast<int>(pretext.categories.size());
  const int batch = std::min(opts.batch_size, categories);
  require(batch >= 2, "pretrain: need at least two categories per batch");

  std::vector<std::vector<int>> token_ids;
  for (const auto& name : pretext.categories)
    token_ids.push_back(data.vocab.tokenize(apply_template(data.templates[0], name)));
  const auto by_cat = pretext.train_images_by_category();

  encoder.weights().set_trainable(true);
  std::vector<Tensor> params = encoder.weights().parameters();
  AdamState adam;
  adam.learning_rate = opts.learning_rate;
  std::mt19937_64 rng(opts.seed);
  std::vector<int> order(static_cast<std::size_t>(categories));
  for (int i = 0; i < categories; ++i) order[static_cast<std::size_t>(i)] = i;
  std::vector<int> diagonal(static_cast<std::size_t>(batch));
  for (int i = 0; i < batch; ++i) diagonal[static_cast<std::size_t>(i)] = i;

  for (int step = 0; step < steps; ++step) {
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<Tensor> image_rows, text_rows;
    for (int b = 0; b < batch; ++b) {
      const int cat = order[static_cast<std::size_t>(b)];
      const auto& imgs = by_cat[static_cast<std::size_t>(cat)];
      std::uniform_int_distribution<std::size_t> pick(0, imgs.size() - 1);
      image_rows.push_back(encoder.encode_image(encoder.patches_tensor(imgs[pick(rng)]), nullptr, nullptr));
      text_rows.push_back(encoder.encode_text(token_ids[static_cast<std::size_t>(cat)], nullptr, nullptr));
    }
    Tensor images = concat_rows(image_rows);
    Tensor texts = concat_rows(text_rows);
    Tensor logits_it = scale(matmul_nt(images, texts), 1.0 / opts.temperature);
    Tensor logits_ti = scale(matmul_nt(texts, images), 1.0 / opts.temperature);
    Tensor loss = scale(add(cross_entropy_with_logits(logits_it, diagonal),
                            cross_entropy_with_logits(logits_ti, diagonal)),
                        0.5);
    stats.losses.push_back(loss.value());
    backward(loss);
    adam_step(params, adam);
    for (Tensor& p : params) p.zero_grad();
  }

  // divergence check: once past warmup the loss must not exceed the start
  if (steps >= 20) {
    const std::size_t k = 5;
    double head = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      head += stats.losses[i];
      tail += stats.losses[stats.losses.size() - 1 - i];
    }
    if (tail > head)
      throw NumericalError("pretraining diverged: final loss above initial loss after warmup");
  }
  encoder.weights().set_trainable(false);
  return stats;
}

// ---------------------------------------------------------------------------
// dataset directory I/O: manifest.json + per-domain binary tensors

inline nlohmann::json to_json(const BenchmarkSpec& s) {
  nlohmann::json j;
  j["domains"] = s.domains;
  j["categories_per_domain"] = s.categories_per_domain;
  j["train_per_category"] = s.train_per_category;
  j["test_per_category"] = s.test_per_category;
  j["separation"] = s.separation;
  j["noise_sigma"] = s.noise_sigma;
  j["seed"] = s.seed;
  j["pretext_categories"] = s.pretext_categories;
  j["pretext_train_per_category"] = s.pretext_train_per_category;
  j["pretext_test_per_category"] = s.pretext_test_per_category;
  j["overlaps"] = nlohmann::json::array();
  for (const auto& o : s.overlaps)
    j["overlaps"].push_back({{"domain_a", o.domain_a},
                             {"category_a", o.category_a},
                             {"domain_b", o.domain_b},
                             {"category_b", o.category_b},
                             {"similarity", o.similarity},
                             {"shared_name", o.shared_name}});
  return j;
}

inline BenchmarkSpec benchmark_spec_from_json(const nlohmann::json& j) {
  BenchmarkSpec s;
  s.domains = j.value("domains", s.domains);
  s.categories_per_domain = j.value("categories_per_domain", s.categories_per_domain);
  s.train_per_category = j.value("train_per_category", s.train_per_category);
  s.test_per_category = j.value("test_per_category", s.test_per_category);
  s.separation = j.value("separation", s.separation);
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.seed = j.value("seed", s.seed);
  s.pretext_categories = j.value("pretext_categories", s.pretext_categories);
  s.pretext_train_per_category = j.value("pretext_train_per_category", s.pretext_train_per_category);
  s.pretext_test_per_category = j.value("pretext_test_per_category", s.pretext_test_per_category);
  for (const auto& jo : j.value("overlaps", nlohmann::json::array())) {
    OverlapSpec o;
    o.domain_a = jo.at("domain_a").get<int>();
    o.category_a = jo.at("category_a").get<int>();
    o.domain_b = jo.at("domain_b").get<int>();
    o.category_b = jo.at("category_b").get<int>();
    o.similarity = jo.at("similarity").get<double>();
    o.shared_name = jo.value("shared_name", false);
    s.overlaps.push_back(o);
  }
  s.validate();
  return s;
}

namespace detail {

inline void save_domain(const std::filesystem::path& path, const DomainData& d) {
  ArchiveWriter ar("ODCLDAT1");
  ar.add_text("name", d.name);
  std::ostringstream cats;
  for (std::size_t i = 0; i < d.categories.size(); ++i) cats << (i ? "\n" : "") << d.categories[i];
  ar.add_text("categories", cats.str());
  const std::size_t dim = d.category_latents.empty() ? 0 : d.category_latents[0].size();
  auto pack = [dim](const std::vector<Sample>& split, std::vector<double>& images, std::vector<double>& labels) {
    for (const auto& s : split) {
      images.insert(images.end(), s.image.begin(), s.image.end());
      labels.push_back(static_cast<double>(s.label));
    }
    (void)dim;
  };
  std::vector<double> latents;
  for (const auto& l : d.category_latents) latents.insert(latents.end(), l.begin(), l.end());
  ar.add_tensor("latents", {d.category_latents.size(), dim}, latents);
  std::vector<double> tri, trl, tei, tel;
  pack(d.train, tri, trl);
  pack(d.test, tei, tel);
  ar.add_tensor("train_images", {d.train.size(), dim}, tri);
  ar.add_tensor("train_labels", {d.train.size()}, trl);
  ar.add_tensor("test_images", {d.test.size(), dim}, tei);
  ar.add_tensor("test_labels", {d.test.size()}, tel);
  ar.write(path);
}

inline DomainData load_domain(const std::filesystem::path& path) {
  Archive ar = Archive::read(path, "ODCLDAT1");
  DomainData d;
  d.name = ar.text("name");
  std::istringstream cats(ar.text("categories"));
  std::string line;
  while (std::getline(cats, line)) d.categories.push_back(line);
  const Tensor latents = ar.tensor("latents");
  for (std::size_t i = 0; i < latents.rows(); ++i) {
    d.category_latents.emplace_back(latents.values().begin() + static_cast<std::ptrdiff_t>(i * latents.cols()),
                                    latents.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * latents.cols()));
  }
  auto unpack = [](const Tensor& images, const Tensor& labels, std::vector<Sample>& out) {
    for (std::size_t i = 0; i < images.rows(); ++i) {
      Sample s;
      s.image.assign(images.values().begin() + static_cast<std::ptrdiff_t>(i * images.cols()),
                     images.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * images.cols()));
      s.label = static_cast<int>(labels.values()[i]);
      out.push_back(std::move(s));
    }
  };
  unpack(ar.tensor("train_images"), ar.tensor("train_labels"), d.train);
  unpack(ar.tensor("test_images"), ar.tensor("test_labels"), d.test);
  return d;
}

}  // namespace detail

inline void save_dataset(const std::filesystem::path& dir, const SyntheticDataset& ds) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["spec"] = to_json(ds.spec);
  manifest["templates"] = ds.templates;
  manifest["vocabulary"] = ds.vocab.words;
  manifest["domain_files"] = nlohmann::json::array();
  for (std::size_t d = 0; d < ds.domains.size(); ++d) {
    const std::string file = "domain-" + std::to_string(d) + ".bin";
    manifest["domain_files"].push_back(file);
    detail::save_domain(dir / file, ds.domains[d]);
  }
  detail::save_domain(dir / "pretext.bin", ds.pretext);
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw NotFoundError("dataset: cannot write manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

inline SyntheticDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw NotFoundError("dataset: missing manifest.json in " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(in);
  SyntheticDataset ds;
  ds.spec = benchmark_spec_from_json(manifest.at("spec"));
  ds.templates = manifest.at("templates").get<std::vector<std::string>>();
  ds.vocab = Vocabulary::from_words(manifest.at("vocabulary").get<std::vector<std::string>>());
  for (const auto& file : manifest.at("domain_files"))
    ds.domains.push_back(detail::load_domain(dir / file.get<std::string>()));
  ds.pretext = detail::load_domain(dir / "pretext.bin");
  return ds;
}

}  // namespace odcl
