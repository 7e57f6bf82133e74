#pragma once

// Frozen dual encoder: a pair of small pre-norm transformer towers with a
// shared embedding width, CLIP-style pooling (last content token for text,
// class token for images), frozen output projections and unit-norm
// features. Both towers expose prompt slots at the tail of the token
// sequence: general prompts enter at layer 1 (text) or layers 1..h-1
// (image, one learnable prompt per layer), and a domain prior prompt
// replaces the first prompt slot at layer h. With no prompts the forward
// is the plain zero-shot path.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "odcl/errors.hpp"
#include "odcl/serialize.hpp"
#include "odcl/tensor.hpp"

namespace odcl {

// ---------------------------------------------------------------------------
// vocabulary / tokenizer

inline std::string normalize_name(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  std::string out = s.substr(b, e - b);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

// Substitutes the category name into a template's "{}" placeholder.
inline std::string apply_template(const std::string& tmpl, const std::string& category_name) {
  const auto pos = tmpl.find("{}");
  require(pos != std::string::npos, "template '" + tmpl + "' lacks a {} placeholder");
  return tmpl.substr(0, pos) + category_name + tmpl.substr(pos + 2);
}

// Whitespace word-to-id tokenizer over the synthetic vocabulary.
struct Vocabulary {
  std::vector<std::string> words;
  std::unordered_map<std::string, int> ids;

  static Vocabulary from_words(std::vector<std::string> list) {
    Vocabulary v;
    v.words = std::move(list);
    for (std::size_t i = 0; i < v.words.size(); ++i) {
      require(!v.ids.count(v.words[i]), "vocabulary: duplicate word '" + v.words[i] + "'");
      v.ids[v.words[i]] = static_cast<int>(i);
    }
    return v;
  }

  int size() const { return static_cast<int>(words.size()); }

  std::vector<int> tokenize(const std::string& text) const {
    std::istringstream in(normalize_name(text));
    std::vector<int> out;
    std::string w;
    while (in >> w) {
      auto it = ids.find(w);
      if (it == ids.end()) throw ContractError("tokenize: word '" + w + "' not in vocabulary");
      out.push_back(it->second);
    }
    require(!out.empty(), "tokenize: empty text");
    return out;
  }
};

// ---------------------------------------------------------------------------
// configuration

struct EncoderConfig {
  int layers = 6;
  int width = 64;        // d^T == d^I, also the shared feature width
  int heads = 4;
  int text_budget = 16;  // max content tokens
  int patch_count = 16;  // 4x4 grid
  int patch_dim = 8;
  int replace_depth = 4;  // h, 1-based layer where the prior prompt lands
  int prompt_length = 1;
  int ffn_hidden = 256;
  int vocab_size = 0;

  void validate() const {
    require(layers >= 1 && width >= 1 && heads >= 1, "encoder config: non-positive dimensions");
    require(width % heads == 0, "encoder config: width must be divisible by head count");
    require(replace_depth >= 1 && replace_depth <= layers, "encoder config: replacement depth out of range");
    require(prompt_length >= 1, "encoder config: prompt length must be >= 1");
    require(text_budget >= 1 && patch_count >= 1 && patch_dim >= 1, "encoder config: bad token budgets");
    require(vocab_size >= 1, "encoder config: vocabulary not set");
  }

  std::size_t image_size() const { return static_cast<std::size_t>(patch_count) * patch_dim; }
};

// ---------------------------------------------------------------------------
// weights

struct LayerWeights {
  Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;

  void collect(std::vector<Tensor>& out) {
    for (Tensor* t : {&w_q, &b_q, &w_k, &b_k, &w_v, &b_v, &w_o, &b_o, &ln1_g, &ln1_b, &ln2_g, &ln2_b,
                      &ff_w1, &ff_b1, &ff_w2, &ff_b2})
      out.push_back(*t);
  }
};

struct Tower {
  std::vector<LayerWeights> layers;
  Tensor final_ln_g, final_ln_b;
};

struct FrozenWeights {
  EncoderConfig config;
  Vocabulary vocab;
  Tensor token_embedding;   // [vocab x width]
  Tensor text_positional;   // [text_budget x width]
  Tensor patch_proj_w;      // [patch_dim x width]
  Tensor patch_proj_b;      // [1 x width]
  Tensor class_token;       // [1 x width]
  Tensor image_positional;  // [patch_count + 1 x width]
  Tower text_tower, image_tower;
  Tensor text_projection;   // [width x width]
  Tensor image_projection;  // [width x width]

  static FrozenWeights random_init(EncoderConfig cfg, Vocabulary vocab, std::uint64_t seed) {
    cfg.vocab_size = vocab.size();
    cfg.validate();
    std::mt19937_64 rng(seed);
    const std::size_t w = static_cast<std::size_t>(cfg.width);
    auto mat = [&](std::size_t r, std::size_t c, double sd) { return Tensor::randn({r, c}, rng, sd); };

    FrozenWeights fw;
    fw.config = cfg;
    fw.vocab = std::move(vocab);
    fw.token_embedding = mat(static_cast<std::size_t>(cfg.vocab_size), w, 0.1);
    fw.text_positional = mat(static_cast<std::size_t>(cfg.text_budget), w, 0.02);
    fw.patch_proj_w = mat(static_cast<std::size_t>(cfg.patch_dim), w, 0.1);
    fw.patch_proj_b = Tensor::zeros({1, w});
    fw.class_token = mat(1, w, 0.1);
    fw.image_positional = mat(static_cast<std::size_t>(cfg.patch_count) + 1, w, 0.02);

    auto make_tower = [&] {
      Tower t;
      for (int l = 0; l < cfg.layers; ++l) {
        LayerWeights lw;
        lw.w_q = mat(w, w, 0.02);
        lw.b_q = Tensor::zeros({1, w});
        lw.w_k = mat(w, w, 0.02);
        lw.b_k = Tensor::zeros({1, w});
        lw.w_v = mat(w, w, 0.02);
        lw.b_v = Tensor::zeros({1, w});
        lw.w_o = mat(w, w, 0.02);
        lw.b_o = Tensor::zeros({1, w});
        lw.ln1_g = Tensor::full({1, w}, 1.0);
        lw.ln1_b = Tensor::zeros({1, w});
        lw.ln2_g = Tensor::full({1, w}, 1.0);
        lw.ln2_b = Tensor::zeros({1, w});
        lw.ff_w1 = mat(w, static_cast<std::size_t>(cfg.ffn_hidden), 0.02);
        lw.ff_b1 = Tensor::zeros({1, static_cast<std::size_t>(cfg.ffn_hidden)});
        lw.ff_w2 = mat(static_cast<std::size_t>(cfg.ffn_hidden), w, 0.02);
        lw.ff_b2 = Tensor::zeros({1, w});
        t.layers.push_back(std::move(lw));
      }
      t.final_ln_g = Tensor::full({1, w}, 1.0);
      t.final_ln_b = Tensor::zeros({1, w});
      return t;
    };
    fw.text_tower = make_tower();
    fw.image_tower = make_tower();
    fw.text_projection = mat(w, w, 0.05);
    fw.image_projection = mat(w, w, 0.05);
    return fw;
  }

  std::vector<Tensor> parameters() {
    std::vector<Tensor> out;
    out.push_back(token_embedding);
    out.push_back(text_positional);
    out.push_back(patch_proj_w);
    out.push_back(patch_proj_b);
    out.push_back(class_token);
    out.push_back(image_positional);
    for (Tower* t : {&text_tower, &image_tower}) {
      for (auto& lw : t->layers) lw.collect(out);
      out.push_back(t->final_ln_g);
      out.push_back(t->final_ln_b);
    }
    out.push_back(text_projection);
    out.push_back(image_projection);
    return out;
  }

  void set_trainable(bool trainable) {
    for (Tensor t : parameters()) t.set_requires_grad(trainable);
  }

  std::uint64_t checksum() const {
    std::uint64_t h = 14695981039346656037ULL;
    for (const Tensor& t : const_cast<FrozenWeights*>(this)->parameters()) h = fnv1a_doubles(t.values(), h);
    return h;
  }

  void save(const std::filesystem::path& path) const;
  static FrozenWeights load(const std::filesystem::path& path);
};

// ---------------------------------------------------------------------------
// token sequences

enum class TokenRole { Content, Cls, GeneralPrompt, DomainPriorPrompt };

// Embedded tokens plus a role label per row; prompt rows sit contiguously
// at the tail.
struct TokenSequence {
  Tensor tokens;
  std::vector<TokenRole> roles;

  std::size_t content_length() const {
    std::size_t n = 0;
    for (TokenRole r : roles)
      if (r == TokenRole::Content || r == TokenRole::Cls) ++n;
    return n;
  }
  std::size_t prompt_length() const { return roles.size() - content_length(); }

  void append_prompt(const Tensor& prompt, TokenRole role) {
    tokens = concat_rows({tokens, prompt});
    roles.insert(roles.end(), prompt.rows(), role);
  }
  // Replaces prompt rows starting at the first prompt slot.
  void replace_prompt(const Tensor& prompt, TokenRole role) {
    const std::size_t content = content_length();
    const std::size_t tail = prompt_length();
    require(prompt.rows() <= tail, "token sequence: replacement larger than prompt block");
    std::vector<Tensor> parts = {slice_rows(tokens, 0, content), prompt};
    if (prompt.rows() < tail) parts.push_back(slice_rows(tokens, content + prompt.rows(), tokens.rows()));
    tokens = concat_rows(parts);
    for (std::size_t i = 0; i < prompt.rows(); ++i) roles[content + i] = role;
  }
};

// Given the class token entering layer h, returns the 1 x width instance
// prompt that occupies the prompt slot for layers h..L.
using InstancePromptProvider = std::function<Tensor(const Tensor& cls_at_h)>;

// ---------------------------------------------------------------------------
// encoder

class DualEncoder {
 public:
  explicit DualEncoder(FrozenWeights weights) : w_(std::move(weights)) { w_.config.validate(); }

  const EncoderConfig& config() const { return w_.config; }
  const Vocabulary& vocab() const { return w_.vocab; }
  FrozenWeights& weights() { return w_; }
  const FrozenWeights& weights() const { return w_; }

  // Text branch. `general_prompt` (if any) is appended at layer 1 and
  // persists until `domain_prior_prompt` (1 x width) replaces the first
  // prompt slot at layer h. Pooling takes the last content token; prompt
  // rows never pool.
  Tensor encode_text(const std::vector<int>& token_ids, const Tensor* general_prompt,
                     const Tensor* domain_prior_prompt) const {
    const auto& cfg = w_.config;
    require(!token_ids.empty(), "encode_text: empty token sequence");
    require(token_ids.size() <= static_cast<std::size_t>(cfg.text_budget),
            "encode_text: token length exceeds budget");
    const std::size_t content = token_ids.size();

    TokenSequence seq;
    seq.tokens = add(embedding_rows(w_.token_embedding, token_ids),
                     slice_rows(w_.text_positional, 0, content));
    seq.roles.assign(content, TokenRole::Content);

    for (int layer = 1; layer <= cfg.layers; ++layer) {
      if (layer == 1 && general_prompt) {
        check_prompt(*general_prompt, "general prompt");
        seq.append_prompt(*general_prompt, TokenRole::GeneralPrompt);
      }
      if (layer == cfg.replace_depth && domain_prior_prompt) {
        require(domain_prior_prompt->rows() == 1, "encode_text: domain prior prompt must be a single token");
        check_prompt(*domain_prior_prompt, "domain prior prompt");
        if (seq.prompt_length() > 0)
          seq.replace_prompt(*domain_prior_prompt, TokenRole::DomainPriorPrompt);
        else
          seq.append_prompt(*domain_prior_prompt, TokenRole::DomainPriorPrompt);
      }
      require(seq.content_length() == content, "encode_text: content tokens must be preserved");
      seq.tokens = layer_forward(w_.text_tower.layers[static_cast<std::size_t>(layer - 1)], seq.tokens);
    }
    Tensor final = layer_norm_rows(seq.tokens, w_.text_tower.final_ln_g, w_.text_tower.final_ln_b);
    Tensor pooled = row(final, content - 1);
    return l2_normalize_rows(matmul(pooled, w_.text_projection));
  }

  // Image branch. One general prompt per layer 1..h-1 (deep prompting:
  // each layer's input slot is overwritten by that layer's prompt). At
  // layer h the provider sees cls^(h) and its output replaces the first
  // prompt slot for the remaining layers.
  Tensor encode_image(const Tensor& patches, const std::vector<Tensor>* general_prompts,
                      const InstancePromptProvider* instance_prompt_provider) const {
    const auto& cfg = w_.config;
    require(patches.rows() == static_cast<std::size_t>(cfg.patch_count) &&
                patches.cols() == static_cast<std::size_t>(cfg.patch_dim),
            "encode_image: patch grid has wrong shape");
    if (general_prompts)
      require(general_prompts->size() == static_cast<std::size_t>(cfg.replace_depth - 1),
              "encode_image: expected one general prompt per layer below the replacement depth");

    TokenSequence seq;
    Tensor patch_tokens = add_row_bias(matmul(patches, w_.patch_proj_w), w_.patch_proj_b);
    seq.tokens = add(concat_rows({w_.class_token, patch_tokens}), w_.image_positional);
    seq.roles.assign(1, TokenRole::Cls);
    seq.roles.insert(seq.roles.end(), static_cast<std::size_t>(cfg.patch_count), TokenRole::Content);
    const std::size_t content = seq.roles.size();

    for (int layer = 1; layer <= cfg.layers; ++layer) {
      if (general_prompts && layer <= cfg.replace_depth - 1) {
        const Tensor& prompt = (*general_prompts)[static_cast<std::size_t>(layer - 1)];
        check_prompt(prompt, "image general prompt");
        if (layer == 1)
          seq.append_prompt(prompt, TokenRole::GeneralPrompt);
        else
          seq.replace_prompt(prompt, TokenRole::GeneralPrompt);
      }
      if (layer == cfg.replace_depth && instance_prompt_provider) {
        Tensor cls_now = row(seq.tokens, 0);
        Tensor instance_prompt = (*instance_prompt_provider)(cls_now);
        require(instance_prompt.rows() == 1 && instance_prompt.cols() == static_cast<std::size_t>(cfg.width),
                "encode_image: instance prompt provider returned wrong width");
        if (seq.prompt_length() > 0)
          seq.replace_prompt(instance_prompt, TokenRole::DomainPriorPrompt);
        else
          seq.append_prompt(instance_prompt, TokenRole::DomainPriorPrompt);
      }
      require(seq.content_length() == content, "encode_image: content tokens must be preserved");
      seq.tokens = layer_forward(w_.image_tower.layers[static_cast<std::size_t>(layer - 1)], seq.tokens);
    }
    Tensor final = layer_norm_rows(seq.tokens, w_.image_tower.final_ln_g, w_.image_tower.final_ln_b);
    Tensor pooled = row(final, 0);
    return l2_normalize_rows(matmul(pooled, w_.image_projection));
  }

  // Plain-vector helpers for the zero-shot path (no prompts, no graph).
  std::vector<double> text_feature(const std::vector<int>& token_ids) const {
    NoGradGuard ng;
    return encode_text(token_ids, nullptr, nullptr).values();
  }
  std::vector<double> text_feature(const std::string& text) const { return text_feature(w_.vocab.tokenize(text)); }
  std::vector<double> image_feature(const std::vector<double>& image) const {
    NoGradGuard ng;
    return encode_image(patches_tensor(image), nullptr, nullptr).values();
  }

  Tensor patches_tensor(const std::vector<double>& image) const {
    require(image.size() == w_.config.image_size(), "patches: image has wrong size");
    return Tensor::from({static_cast<std::size_t>(w_.config.patch_count),
                         static_cast<std::size_t>(w_.config.patch_dim)},
                        image);
  }

 private:
  void check_prompt(const Tensor& p, const char* what) const {
    require(p.cols() == static_cast<std::size_t>(w_.config.width),
            std::string("encode: ") + what + " has wrong width");
  }

  Tensor layer_forward(const LayerWeights& lw, const Tensor& x) const {
    const auto& cfg = w_.config;
    Tensor y = layer_norm_rows(x, lw.ln1_g, lw.ln1_b);
    Tensor q = add_row_bias(matmul(y, lw.w_q), lw.b_q);
    Tensor k = add_row_bias(matmul(y, lw.w_k), lw.b_k);
    Tensor v = add_row_bias(matmul(y, lw.w_v), lw.b_v);
    const std::size_t hd = static_cast<std::size_t>(cfg.width / cfg.heads);
    std::vector<Tensor> ctx;
    ctx.reserve(static_cast<std::size_t>(cfg.heads));
    for (int head = 0; head < cfg.heads; ++head) {
      const std::size_t c0 = static_cast<std::size_t>(head) * hd;
      Tensor qh = slice_cols(q, c0, c0 + hd);
      Tensor kh = slice_cols(k, c0, c0 + hd);
      Tensor vh = slice_cols(v, c0, c0 + hd);
      Tensor att = softmax_rows(scale(matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(hd))));
      ctx.push_back(matmul(att, vh));
    }
    Tensor attn_out = add_row_bias(matmul(concat_cols(ctx), lw.w_o), lw.b_o);
    Tensor a = add(x, attn_out);
    Tensor z = layer_norm_rows(a, lw.ln2_g, lw.ln2_b);
    Tensor ff = add_row_bias(matmul(gelu(add_row_bias(matmul(z, lw.ff_w1), lw.ff_b1)), lw.ff_w2), lw.ff_b2);
    return add(a, ff);
  }

  FrozenWeights w_;
};

// ---------------------------------------------------------------------------
// zero-shot classification

struct Classification {
  int index = -1;
  std::vector<double> scores;
};

// Argmax of dot products over unit-norm features; ties resolve to the
// lowest index.
inline Classification zero_shot_classify(const std::vector<double>& image_feature,
                                         const std::vector<std::vector<double>>& text_features) {
  require(!text_features.empty(), "zero_shot_classify: empty candidate list");
  Classification out;
  out.scores.reserve(text_features.size());
  for (const auto& t : text_features) {
    require(t.size() == image_feature.size(), "zero_shot_classify: feature width mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) s += image_feature[i] * t[i];
    out.scores.push_back(s);
  }
  out.index = 0;
  for (std::size_t i = 1; i < out.scores.size(); ++i)
    if (out.scores[i] > out.scores[static_cast<std::size_t>(out.index)]) out.index = static_cast<int>(i);
  return out;
}

// ---------------------------------------------------------------------------
// weights file I/O ("ODCLWTS1": header magic, config, vocabulary, tensors,
// trailing FNV-1a checksum; see serialize.hpp for the container layout)

namespace detail {

inline void tower_io_names(std::vector<std::pair<std::string, Tensor LayerWeights::*>>& fields) {
  fields = {
      {"w_q", &LayerWeights::w_q},     {"b_q", &LayerWeights::b_q},   {"w_k", &LayerWeights::w_k},
      {"b_k", &LayerWeights::b_k},     {"w_v", &LayerWeights::w_v},   {"b_v", &LayerWeights::b_v},
      {"w_o", &LayerWeights::w_o},     {"b_o", &LayerWeights::b_o},   {"ln1_g", &LayerWeights::ln1_g},
      {"ln1_b", &LayerWeights::ln1_b}, {"ln2_g", &LayerWeights::ln2_g}, {"ln2_b", &LayerWeights::ln2_b},
      {"ff_w1", &LayerWeights::ff_w1}, {"ff_b1", &LayerWeights::ff_b1}, {"ff_w2", &LayerWeights::ff_w2},
      {"ff_b2", &LayerWeights::ff_b2},
  };
}

}  // namespace detail

inline void FrozenWeights::save(const std::filesystem::path& path) const {
  ArchiveWriter ar("ODCLWTS1");
  std::ostringstream cfg;
  cfg << config.layers << ' ' << config.width << ' ' << config.heads << ' ' << config.text_budget << ' '
      << config.patch_count << ' ' << config.patch_dim << ' ' << config.replace_depth << ' '
      << config.prompt_length << ' ' << config.ffn_hidden << ' ' << config.vocab_size;
  ar.add_text("config", cfg.str());
  std::ostringstream words;
  for (std::size_t i = 0; i < vocab.words.size(); ++i) words << (i ? "\n" : "") << vocab.words[i];
  ar.add_text("vocab", words.str());

  ar.add_tensor("token_embedding", token_embedding);
  ar.add_tensor("text_positional", text_positional);
  ar.add_tensor("patch_proj_w", patch_proj_w);
  ar.add_tensor("patch_proj_b", patch_proj_b);
  ar.add_tensor("class_token", class_token);
  ar.add_tensor("image_positional", image_positional);
  std::vector<std::pair<std::string, Tensor LayerWeights::*>> fields;
  detail::tower_io_names(fields);
  auto dump_tower = [&](const char* prefix, const Tower& t) {
    for (std::size_t l = 0; l < t.layers.size(); ++l)
      for (auto& [name, member] : fields)
        ar.add_tensor(std::string(prefix) + ".layer" + std::to_string(l) + "." + name, t.layers[l].*member);
    ar.add_tensor(std::string(prefix) + ".final_ln_g", t.final_ln_g);
    ar.add_tensor(std::string(prefix) + ".final_ln_b", t.final_ln_b);
  };
  dump_tower("text", text_tower);
  dump_tower("image", image_tower);
  ar.add_tensor("text_projection", text_projection);
  ar.add_tensor("image_projection", image_projection);
  ar.write(path);
}

inline FrozenWeights FrozenWeights::load(const std::filesystem::path& path) {
  Archive ar = Archive::read(path, "ODCLWTS1");
  FrozenWeights fw;
  std::istringstream cfg(ar.text("config"));
  cfg >> fw.config.layers >> fw.config.width >> fw.config.heads >> fw.config.text_budget >>
      fw.config.patch_count >> fw.config.patch_dim >> fw.config.replace_depth >> fw.config.prompt_length >>
      fw.config.ffn_hidden >> fw.config.vocab_size;
  require(static_cast<bool>(cfg), "weights file: malformed config section");

  std::vector<std::string> words;
  std::istringstream wordstream(ar.text("vocab"));
  std::string line;
  while (std::getline(wordstream, line)) words.push_back(line);
  fw.vocab = Vocabulary::from_words(std::move(words));
  require(fw.vocab.size() == fw.config.vocab_size, "weights file: vocabulary size disagrees with config");

  fw.token_embedding = ar.tensor("token_embedding");
  fw.text_positional = ar.tensor("text_positional");
  fw.patch_proj_w = ar.tensor("patch_proj_w");
  fw.patch_proj_b = ar.tensor("patch_proj_b");
  fw.class_token = ar.tensor("class_token");
  fw.image_positional = ar.tensor("image_positional");
  std::vector<std::pair<std::string, Tensor LayerWeights::*>> fields;
  detail::tower_io_names(fields);
  auto read_tower = [&](const char* prefix, Tower& t) {
    t.layers.resize(static_cast<std::size_t>(fw.config.layers));
    for (std::size_t l = 0; l < t.layers.size(); ++l)
      for (auto& [name, member] : fields)
        t.layers[l].*member = ar.tensor(std::string(prefix) + ".layer" + std::to_string(l) + "." + name);
    t.final_ln_g = ar.tensor(std::string(prefix) + ".final_ln_g");
    t.final_ln_b = ar.tensor(std::string(prefix) + ".final_ln_b");
  };
  read_tower("text", fw.text_tower);
  read_tower("image", fw.image_tower);
  fw.text_projection = ar.tensor("text_projection");
  fw.image_projection = ar.tensor("image_projection");
  fw.config.validate();
  return fw;
}

}  // namespace odcl
