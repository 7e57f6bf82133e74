#pragma once

// Trainable per-domain components: the text general prompt, the Text
// Self-Attention module producing the domain prior prompt (one row per
// category), the per-layer image general prompts, and the Image
// Cross-Attention module producing the instance prompt from the class
// token. Plus the append-only domain prior prompt pool.
//
// Both attention modules sum their softmax normalizer and value mix in a
// canonical operand order, so permuting prototype rows permutes TSA output
// rows bit-exactly and leaves ICA output bit-identical.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "odcl/errors.hpp"
#include "odcl/prototypes.hpp"
#include "odcl/serialize.hpp"
#include "odcl/tensor.hpp"

namespace odcl {

// Plain evaluates exactly FFD(Attention(Q,K,V)); PreNorm wraps the same
// attention and feed-forward in a standard pre-norm residual block.
enum class BlockMode { PreNorm, Plain };

inline const char* to_string(BlockMode m) { return m == BlockMode::PreNorm ? "prenorm" : "plain"; }

namespace detail {

// Two-layer feed-forward, GELU, no biases; the output layer is zero-
// initialized so freshly built modules pass their input through (PreNorm)
// or emit zero (Plain).
inline Tensor ffd(const Tensor& x, const Tensor& w1, const Tensor& w2) { return matmul(gelu(matmul(x, w1)), w2); }

inline Tensor attention_mix(const Tensor& queries, const Tensor& keys, const Tensor& values, double dim) {
  Tensor scores = scale(matmul_nt(queries, keys), 1.0 / std::sqrt(dim));
  Tensor weights = softmax_rows(scores, SumOrder::Canonical);
  return matmul(weights, values, SumOrder::Canonical);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// TSA

struct TsaWeights {
  Tensor w_q, w_k, w_v;        // [d x d]
  Tensor ff_w1, ff_w2;         // [d x 4d], [4d x d]
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  BlockMode mode = BlockMode::PreNorm;

  static TsaWeights init(int dim, BlockMode mode, std::mt19937_64& rng) {
    require(dim >= 1, "tsa: non-positive width");
    const std::size_t d = static_cast<std::size_t>(dim);
    TsaWeights w;
    w.mode = mode;
    w.w_q = Tensor::randn({d, d}, rng, 0.02);
    w.w_k = Tensor::randn({d, d}, rng, 0.02);
    w.w_v = Tensor::randn({d, d}, rng, 0.02);
    w.ff_w1 = Tensor::randn({d, 4 * d}, rng, 0.02);
    w.ff_w2 = Tensor::zeros({4 * d, d});
    w.ln1_g = Tensor::full({1, d}, 1.0);
    w.ln1_b = Tensor::zeros({1, d});
    w.ln2_g = Tensor::full({1, d}, 1.0);
    w.ln2_b = Tensor::zeros({1, d});
    return w;
  }

  std::vector<Tensor> parameters() {
    if (mode == BlockMode::Plain) return {w_q, w_k, w_v, ff_w1, ff_w2};
    return {w_q, w_k, w_v, ff_w1, ff_w2, ln1_g, ln1_b, ln2_g, ln2_b};
  }
};

// Self-attention of the prototype rows (pre-FFD part of the module).
inline Tensor tsa_attention(const TsaWeights& w, const Tensor& prototypes) {
  require(prototypes.rows() >= 1, "tsa: at least one prototype row required");
  require(prototypes.cols() == w.w_q.rows(), "tsa: prototype width disagrees with projections");
  Tensor base = w.mode == BlockMode::PreNorm ? layer_norm_rows(prototypes, w.ln1_g, w.ln1_b) : prototypes;
  Tensor q = matmul(base, w.w_q);
  Tensor k = matmul(base, w.w_k);
  Tensor v = matmul(base, w.w_v);
  return detail::attention_mix(q, k, v, static_cast<double>(prototypes.cols()));
}

// Domain prior prompt: row j is the prompt token for category j.
inline Tensor tsa_forward(const TsaWeights& w, const Tensor& prototypes) {
  Tensor mixed = tsa_attention(w, prototypes);
  if (w.mode == BlockMode::Plain) return detail::ffd(mixed, w.ff_w1, w.ff_w2);
  Tensor a = add(prototypes, mixed);
  return add(a, detail::ffd(layer_norm_rows(a, w.ln2_g, w.ln2_b), w.ff_w1, w.ff_w2));
}

// ---------------------------------------------------------------------------
// ICA

struct IcaWeights {
  Tensor w_q;                  // [d_img x d_img]
  Tensor w_k, w_v;             // [d_text x d_img]
  Tensor ff_w1, ff_w2;         // [d_img x 4 d_img], [4 d_img x d_img]
  Tensor ln_q_g, ln_q_b;       // over the class token
  Tensor ln_kv_g, ln_kv_b;     // over the prototype rows
  Tensor ln2_g, ln2_b;
  BlockMode mode = BlockMode::PreNorm;

  static IcaWeights init(int text_dim, int image_dim, BlockMode mode, std::mt19937_64& rng) {
    require(text_dim >= 1 && image_dim >= 1, "ica: non-positive width");
    const std::size_t dt = static_cast<std::size_t>(text_dim), di = static_cast<std::size_t>(image_dim);
    IcaWeights w;
    w.mode = mode;
    w.w_q = Tensor::randn({di, di}, rng, 0.02);
    w.w_k = Tensor::randn({dt, di}, rng, 0.02);
    w.w_v = Tensor::randn({dt, di}, rng, 0.02);
    w.ff_w1 = Tensor::randn({di, 4 * di}, rng, 0.02);
    w.ff_w2 = Tensor::zeros({4 * di, di});
    w.ln_q_g = Tensor::full({1, di}, 1.0);
    w.ln_q_b = Tensor::zeros({1, di});
    w.ln_kv_g = Tensor::full({1, dt}, 1.0);
    w.ln_kv_b = Tensor::zeros({1, dt});
    w.ln2_g = Tensor::full({1, di}, 1.0);
    w.ln2_b = Tensor::zeros({1, di});
    return w;
  }

  std::vector<Tensor> parameters() {
    if (mode == BlockMode::Plain) return {w_q, w_k, w_v, ff_w1, ff_w2};
    return {w_q, w_k, w_v, ff_w1, ff_w2, ln_q_g, ln_q_b, ln_kv_g, ln_kv_b, ln2_g, ln2_b};
  }
};

// Cross-attention: class token queries the prototype rows (pre-FFD part).
inline Tensor ica_attention(const IcaWeights& w, const Tensor& cls_token, const Tensor& prototypes) {
  require(cls_token.rows() == 1, "ica: class token must be a single row");
  require(cls_token.cols() == w.w_q.rows(), "ica: class-token width disagrees with query projection");
  require(prototypes.rows() >= 1, "ica: at least one prototype row required");
  require(prototypes.cols() == w.w_k.rows(), "ica: prototype width disagrees with key projection");
  Tensor qbase = w.mode == BlockMode::PreNorm ? layer_norm_rows(cls_token, w.ln_q_g, w.ln_q_b) : cls_token;
  Tensor kvbase = w.mode == BlockMode::PreNorm ? layer_norm_rows(prototypes, w.ln_kv_g, w.ln_kv_b) : prototypes;
  Tensor q = matmul(qbase, w.w_q);
  Tensor k = matmul(kvbase, w.w_k);
  Tensor v = matmul(kvbase, w.w_v);
  return detail::attention_mix(q, k, v, static_cast<double>(cls_token.cols()));
}

// Instance prompt: conditioned on the class token and the domain's
// prototypes.
inline Tensor ica_forward(const IcaWeights& w, const Tensor& cls_token, const Tensor& prototypes) {
  Tensor mixed = ica_attention(w, cls_token, prototypes);
  if (w.mode == BlockMode::Plain) return detail::ffd(mixed, w.ff_w1, w.ff_w2);
  Tensor a = add(cls_token, mixed);
  return add(a, detail::ffd(layer_norm_rows(a, w.ln2_g, w.ln2_b), w.ff_w1, w.ff_w2));
}

// ---------------------------------------------------------------------------
// domain components and the prompt pool

struct DomainComponent {
  int domain_index = -1;
  std::string domain_name;
  std::vector<std::string> categories;
  Tensor text_general_prompt;                 // [prompt_length x d_text]
  std::vector<Tensor> image_general_prompts;  // layers 1..h-1, each [prompt_length x d_img]
  TsaWeights tsa;
  IcaWeights ica;
  int epochs = 0;
  std::uint64_t seed = 0;

  std::vector<Tensor> parameters() {
    std::vector<Tensor> out = {text_general_prompt};
    for (Tensor& t : image_general_prompts) out.push_back(t);
    for (Tensor& t : tsa.parameters()) out.push_back(t);
    for (Tensor& t : ica.parameters()) out.push_back(t);
    return out;
  }

  std::vector<Tensor> all_tensors() {
    std::vector<Tensor> out = {text_general_prompt};
    for (Tensor& t : image_general_prompts) out.push_back(t);
    for (Tensor* t : {&tsa.w_q, &tsa.w_k, &tsa.w_v, &tsa.ff_w1, &tsa.ff_w2, &tsa.ln1_g, &tsa.ln1_b, &tsa.ln2_g,
                      &tsa.ln2_b})
      out.push_back(*t);
    for (Tensor* t : {&ica.w_q, &ica.w_k, &ica.w_v, &ica.ff_w1, &ica.ff_w2, &ica.ln_q_g, &ica.ln_q_b,
                      &ica.ln_kv_g, &ica.ln_kv_b, &ica.ln2_g, &ica.ln2_b})
      out.push_back(*t);
    return out;
  }

  std::uint64_t content_hash() const {
    std::uint64_t h = 14695981039346656037ULL;
    h = fnv1a(reinterpret_cast<const std::uint8_t*>(domain_name.data()), domain_name.size(), h);
    for (const auto& c : categories) h = fnv1a(reinterpret_cast<const std::uint8_t*>(c.data()), c.size(), h);
    for (const Tensor& t : const_cast<DomainComponent*>(this)->all_tensors()) h = fnv1a_doubles(t.values(), h);
    return h;
  }

  static DomainComponent init(int domain_index, std::string domain_name, std::vector<std::string> categories,
                              int text_dim, int image_dim, int prompt_length, int replace_depth, BlockMode mode,
                              std::uint64_t seed) {
    require(replace_depth >= 1, "domain component: replacement depth must be >= 1");
    std::mt19937_64 rng(seed);
    DomainComponent c;
    c.domain_index = domain_index;
    c.domain_name = std::move(domain_name);
    c.categories = std::move(categories);
    c.seed = seed;
    c.text_general_prompt =
        Tensor::randn({static_cast<std::size_t>(prompt_length), static_cast<std::size_t>(text_dim)}, rng, 0.02);
    for (int l = 0; l < replace_depth - 1; ++l)
      c.image_general_prompts.push_back(
          Tensor::randn({static_cast<std::size_t>(prompt_length), static_cast<std::size_t>(image_dim)}, rng, 0.02));
    c.tsa = TsaWeights::init(text_dim, mode, rng);
    c.ica = IcaWeights::init(text_dim, image_dim, mode, rng);
    return c;
  }
};

// Append-only store of trained components plus the seen-category
// vocabulary (normalized name -> domains where it was seen).
class PromptPool {
 public:
  bool contains(int domain_index) const { return by_domain_.count(domain_index) > 0; }
  std::size_t size() const { return by_domain_.size(); }

  void save_component(DomainComponent component) {
    require(component.domain_index >= 0, "prompt pool: component has no domain index");
    require(!contains(component.domain_index),
            "prompt pool: domain " + std::to_string(component.domain_index) + " already saved");
    for (const auto& name : component.categories) vocabulary_[normalize_name(name)].push_back(component.domain_index);
    order_.push_back(component.domain_index);
    hashes_[component.domain_index] = component.content_hash();
    by_domain_.emplace(component.domain_index, std::move(component));
  }

  const DomainComponent& component(int domain_index) const {
    auto it = by_domain_.find(domain_index);
    if (it == by_domain_.end())
      throw NotFoundError("prompt pool: no component for domain " + std::to_string(domain_index));
    return it->second;
  }

  std::uint64_t saved_hash(int domain_index) const {
    auto it = hashes_.find(domain_index);
    if (it == hashes_.end())
      throw NotFoundError("prompt pool: no component for domain " + std::to_string(domain_index));
    return it->second;
  }

  const std::vector<int>& domain_order() const { return order_; }

  std::vector<int> domains_for_category(const std::string& name) const {
    auto it = vocabulary_.find(normalize_name(name));
    if (it == vocabulary_.end()) return {};
    return it->second;
  }
  const std::map<std::string, std::vector<int>>& vocabulary() const { return vocabulary_; }

 private:
  std::map<int, DomainComponent> by_domain_;
  std::map<int, std::uint64_t> hashes_;
  std::vector<int> order_;
  std::map<std::string, std::vector<int>> vocabulary_;
};

// ---------------------------------------------------------------------------
// pool file I/O ("ODCLPOOL": components and prototype sets side by side,
// per-domain section prefixes, recorded content hashes verified on load)

inline void save_pool(const std::filesystem::path& path, const PromptPool& pool,
                      const std::vector<DomainPrototypeSet>& prototypes, const std::string& provenance) {
  ArchiveWriter ar("ODCLPOOL");
  ar.add_text("provenance", provenance);
  std::ostringstream order;
  for (std::size_t i = 0; i < pool.domain_order().size(); ++i) order << (i ? " " : "") << pool.domain_order()[i];
  ar.add_text("domains", order.str());

  for (int d : pool.domain_order()) {
    const DomainComponent& c = pool.component(d);
    const std::string p = "component" + std::to_string(d) + ".";
    std::ostringstream meta;
    meta << c.epochs << ' ' << c.seed << ' ' << to_string(c.tsa.mode) << ' ' << c.image_general_prompts.size();
    ar.add_text(p + "meta", meta.str());
    ar.add_text(p + "name", c.domain_name);
    std::ostringstream cats;
    for (std::size_t i = 0; i < c.categories.size(); ++i) cats << (i ? "\n" : "") << c.categories[i];
    ar.add_text(p + "categories", cats.str());
    std::ostringstream hash;
    hash << pool.saved_hash(d);
    ar.add_text(p + "hash", hash.str());
    ar.add_tensor(p + "text_general_prompt", c.text_general_prompt);
    for (std::size_t l = 0; l < c.image_general_prompts.size(); ++l)
      ar.add_tensor(p + "image_general_prompt" + std::to_string(l), c.image_general_prompts[l]);
    const TsaWeights& t = c.tsa;
    for (auto& [n, v] : std::initializer_list<std::pair<const char*, const Tensor*>>{
             {"tsa.w_q", &t.w_q}, {"tsa.w_k", &t.w_k}, {"tsa.w_v", &t.w_v}, {"tsa.ff_w1", &t.ff_w1},
             {"tsa.ff_w2", &t.ff_w2}, {"tsa.ln1_g", &t.ln1_g}, {"tsa.ln1_b", &t.ln1_b}, {"tsa.ln2_g", &t.ln2_g},
             {"tsa.ln2_b", &t.ln2_b}})
      ar.add_tensor(p + n, *v);
    const IcaWeights& i = c.ica;
    for (auto& [n, v] : std::initializer_list<std::pair<const char*, const Tensor*>>{
             {"ica.w_q", &i.w_q}, {"ica.w_k", &i.w_k}, {"ica.w_v", &i.w_v}, {"ica.ff_w1", &i.ff_w1},
             {"ica.ff_w2", &i.ff_w2}, {"ica.ln_q_g", &i.ln_q_g}, {"ica.ln_q_b", &i.ln_q_b},
             {"ica.ln_kv_g", &i.ln_kv_g}, {"ica.ln_kv_b", &i.ln_kv_b}, {"ica.ln2_g", &i.ln2_g},
             {"ica.ln2_b", &i.ln2_b}})
      ar.add_tensor(p + n, *v);
  }

  for (const auto& set : prototypes) {
    const std::string p = "prototypes" + std::to_string(set.domain_index) + ".";
    ar.add_text(p + "name", set.domain_name);
    std::ostringstream cats;
    for (std::size_t i = 0; i < set.categories.size(); ++i) cats << (i ? "\n" : "") << set.categories[i].name;
    ar.add_text(p + "categories", cats.str());
    for (const auto& c : set.categories) {
      const std::string q = p + "cat" + std::to_string(c.category_index) + ".";
      std::ostringstream meta;
      meta << c.sample_count << ' ' << c.template_count;
      ar.add_text(q + "meta", meta.str());
      ar.add_tensor(q + "image", {c.image_prototype.size()}, c.image_prototype);
      ar.add_tensor(q + "text", {c.text_prototype.size()}, c.text_prototype);
      ar.add_tensor(q + "combined", {c.combined_prototype.size()}, c.combined_prototype);
    }
  }
  std::ostringstream protodomains;
  for (std::size_t i = 0; i < prototypes.size(); ++i) protodomains << (i ? " " : "") << prototypes[i].domain_index;
  ar.add_text("prototype_domains", protodomains.str());
  ar.write(path);
}

struct PoolFile {
  PromptPool pool;
  std::vector<DomainPrototypeSet> prototypes;
  std::string provenance;
};

inline PoolFile load_pool(const std::filesystem::path& path) {
  Archive ar = Archive::read(path, "ODCLPOOL");
  PoolFile out;
  out.provenance = ar.text("provenance");

  std::istringstream order(ar.text("domains"));
  int d;
  std::vector<int> domains;
  while (order >> d) domains.push_back(d);
  for (int domain : domains) {
    const std::string p = "component" + std::to_string(domain) + ".";
    DomainComponent c;
    c.domain_index = domain;
    c.domain_name = ar.text(p + "name");
    std::istringstream cats(ar.text(p + "categories"));
    std::string line;
    while (std::getline(cats, line)) c.categories.push_back(line);
    std::istringstream meta(ar.text(p + "meta"));
    std::string mode;
    std::size_t n_image_prompts = 0;
    meta >> c.epochs >> c.seed >> mode >> n_image_prompts;
    require(static_cast<bool>(meta), "pool file: malformed component meta");
    const BlockMode bm = mode == "plain" ? BlockMode::Plain : BlockMode::PreNorm;
    c.tsa.mode = bm;
    c.ica.mode = bm;
    c.text_general_prompt = ar.tensor(p + "text_general_prompt");
    for (std::size_t l = 0; l < n_image_prompts; ++l)
      c.image_general_prompts.push_back(ar.tensor(p + "image_general_prompt" + std::to_string(l)));
    c.tsa.w_q = ar.tensor(p + "tsa.w_q");
    c.tsa.w_k = ar.tensor(p + "tsa.w_k");
    c.tsa.w_v = ar.tensor(p + "tsa.w_v");
    c.tsa.ff_w1 = ar.tensor(p + "tsa.ff_w1");
    c.tsa.ff_w2 = ar.tensor(p + "tsa.ff_w2");
    c.tsa.ln1_g = ar.tensor(p + "tsa.ln1_g");
    c.tsa.ln1_b = ar.tensor(p + "tsa.ln1_b");
    c.tsa.ln2_g = ar.tensor(p + "tsa.ln2_g");
    c.tsa.ln2_b = ar.tensor(p + "tsa.ln2_b");
    c.ica.w_q = ar.tensor(p + "ica.w_q");
    c.ica.w_k = ar.tensor(p + "ica.w_k");
    c.ica.w_v = ar.tensor(p + "ica.w_v");
    c.ica.ff_w1 = ar.tensor(p + "ica.ff_w1");
    c.ica.ff_w2 = ar.tensor(p + "ica.ff_w2");
    c.ica.ln_q_g = ar.tensor(p + "ica.ln_q_g");
    c.ica.ln_q_b = ar.tensor(p + "ica.ln_q_b");
    c.ica.ln_kv_g = ar.tensor(p + "ica.ln_kv_g");
    c.ica.ln_kv_b = ar.tensor(p + "ica.ln_kv_b");
    c.ica.ln2_g = ar.tensor(p + "ica.ln2_g");
    c.ica.ln2_b = ar.tensor(p + "ica.ln2_b");

    const std::uint64_t recorded = std::stoull(ar.text(p + "hash"));
    require(c.content_hash() == recorded, "pool file: component " + std::to_string(domain) +
                                              " hash disagrees with the hash recorded at save time");
    out.pool.save_component(std::move(c));
  }

  std::istringstream protodomains(ar.text("prototype_domains"));
  std::vector<int> pdomains;
  while (protodomains >> d) pdomains.push_back(d);
  for (int domain : pdomains) {
    const std::string p = "prototypes" + std::to_string(domain) + ".";
    DomainPrototypeSet set;
    set.domain_index = domain;
    set.domain_name = ar.text(p + "name");
    std::istringstream cats(ar.text(p + "categories"));
    std::string line;
    int j = 0;
    while (std::getline(cats, line)) {
      const std::string q = p + "cat" + std::to_string(j) + ".";
      CategoryPrototype c;
      c.domain_index = domain;
      c.category_index = j;
      c.name = line;
      std::istringstream meta(ar.text(q + "meta"));
      meta >> c.sample_count >> c.template_count;
      c.image_prototype = ar.tensor(q + "image").values();
      c.text_prototype = ar.tensor(q + "text").values();
      c.combined_prototype = ar.tensor(q + "combined").values();
      set.categories.push_back(std::move(c));
      ++j;
    }
    out.prototypes.push_back(std::move(set));
  }
  return out;
}

}  // namespace odcl
