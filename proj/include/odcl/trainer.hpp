#pragma once

// Sequential continual training: one domain at a time, frozen encoders,
// cross-entropy over cosine logits, Adam on the domain component only.
// Components freeze into the pool as soon as their domain finishes; later
// stages never touch them.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "odcl/datagen.hpp"
#include "odcl/discriminator.hpp"
#include "odcl/encoder.hpp"
#include "odcl/errors.hpp"
#include "odcl/prompts.hpp"
#include "odcl/prototypes.hpp"
#include "odcl/tensor.hpp"

namespace odcl {

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 32;       // desk-scale counterpart of the reference 128
  int default_epochs = 5;
  double temperature = 0.07; // fixed cosine logit scale
  std::uint64_t seed = 1;
  BlockMode block_mode = BlockMode::PreNorm;
  PrototypeKind prompt_prototype = PrototypeKind::Combined;

  void validate() const {
    require(learning_rate > 0.0, "train config: learning rate must be positive");
    require(batch_size >= 1, "train config: batch size must be positive");
    require(default_epochs >= 1, "train config: epochs must be >= 1");
    require(temperature > 0.0, "train config: temperature must be positive");
  }
};

// Per-dataset epoch counts from the reference benchmarks, applied when a
// domain carries one of these names.
inline const std::map<std::string, int>& dataset_epoch_table() {
  static const std::map<std::string, int> table = {
      {"aircraft", 20}, {"caltech101", 10}, {"cifar100", 2}, {"dtd", 35},      {"eurosat", 3}, {"flowers", 63},
      {"food", 1},      {"mnist", 2},       {"oxfordpet", 18}, {"cars", 8},    {"sun397", 1},
  };
  return table;
}

struct TaskSequence {
  std::vector<int> domain_order;  // indices into SyntheticDataset::domains
  std::vector<int> epochs;        // per stage
  std::string order_label;

  void validate(std::size_t available) const {
    require(!domain_order.empty(), "task sequence: empty");
    require(domain_order.size() == epochs.size(), "task sequence: one epoch count per stage required");
    std::vector<bool> seen(available, false);
    for (int d : domain_order) {
      require(d >= 0 && static_cast<std::size_t>(d) < available, "task sequence: domain index out of range");
      require(!seen[static_cast<std::size_t>(d)], "task sequence: domains must be distinct");
      seen[static_cast<std::size_t>(d)] = true;
    }
    for (int e : epochs) require(e >= 1, "task sequence: epochs must be positive");
  }
};

// order: "order1" (alphabetical), "order2" (seeded shuffle), or "custom"
// with an explicit index list.
inline TaskSequence make_task_sequence(const SyntheticDataset& ds, const std::string& order, const TrainConfig& cfg,
                                       const std::vector<int>& custom = {}) {
  TaskSequence seq;
  seq.order_label = order;
  const int n = static_cast<int>(ds.domains.size());
  if (order == "order1") {
    for (int i = 0; i < n; ++i) seq.domain_order.push_back(i);
    std::sort(seq.domain_order.begin(), seq.domain_order.end(), [&](int a, int b) {
      return ds.domains[static_cast<std::size_t>(a)].name < ds.domains[static_cast<std::size_t>(b)].name;
    });
  } else if (order == "order2") {
    for (int i = 0; i < n; ++i) seq.domain_order.push_back(i);
    std::mt19937_64 rng(cfg.seed ^ 0x5eedULL);
    std::shuffle(seq.domain_order.begin(), seq.domain_order.end(), rng);
  } else if (order == "custom") {
    seq.domain_order = custom;
  } else {
    throw ContractError("task sequence: unknown order '" + order + "'");
  }
  for (int d : seq.domain_order) {
    const std::string key = normalize_name(ds.domains[static_cast<std::size_t>(d)].name);
    auto it = dataset_epoch_table().find(key);
    seq.epochs.push_back(it != dataset_epoch_table().end() ? it->second : cfg.default_epochs);
  }
  seq.validate(ds.domains.size());
  return seq;
}

struct TrainStats {
  std::vector<double> epoch_mean_loss;
  std::vector<double> epoch_accuracy;
};

inline DomainComponent train_domain(const DualEncoder& encoder, int domain_index, const DomainData& domain,
                                    const DomainPrototypeSet& prototypes, const TrainConfig& cfg, int epochs,
                                    TrainStats* stats = nullptr) {
  cfg.validate();
  require(epochs >= 1, "train_domain: epochs must be >= 1");
  require(!domain.train.empty(), "train_domain: empty training split");
  require(prototypes.categories.size() == domain.categories.size(),
          "train_domain: prototypes must cover the domain's categories");

  const EncoderConfig& ec = encoder.config();
  const std::uint64_t component_seed =
      cfg.seed ^ fnv1a(reinterpret_cast<const std::uint8_t*>(&domain_index), sizeof domain_index, 0xc0317ULL);
  DomainComponent component = DomainComponent::init(domain_index, domain.name, domain.categories, ec.width,
                                                    ec.width, ec.prompt_length, ec.replace_depth, cfg.block_mode,
                                                    component_seed);
  component.epochs = epochs;
  std::vector<Tensor> params = component.parameters();
  for (Tensor& p : params) p.set_requires_grad(true);

  Tensor proto_matrix = prototypes.matrix(cfg.prompt_prototype);  // fixed input, receives no gradient
  std::vector<std::vector<int>> token_ids;
  for (const auto& name : domain.categories)
    token_ids.push_back(encoder.vocab().tokenize(apply_template("a photo of a {}", name)));
  const int s_categories = static_cast<int>(domain.categories.size());

  std::vector<Tensor> frozen = const_cast<DualEncoder&>(encoder).weights().parameters();
  AdamState adam;
  adam.learning_rate = cfg.learning_rate;
  std::mt19937_64 rng(component_seed ^ 0x7ra1nULL);

  std::vector<std::size_t> order(domain.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      try {
        Tensor v_p = tsa_forward(component.tsa, proto_matrix);
        std::vector<Tensor> text_rows;
        for (int j = 0; j < s_categories; ++j)
          text_rows.push_back(encoder.encode_text(token_ids[static_cast<std::size_t>(j)],
                                                  &component.text_general_prompt,
                                                  nullptr));
        // replace the layer-h prompt with row j of the TSA output
        // (encode_text consumes one prior-prompt row per category)
        text_rows.clear();
        for (int j = 0; j < s_categories; ++j) {
          Tensor prior = row(v_p, static_cast<std::size_t>(j));
          text_rows.push_back(encoder.encode_text(token_ids[static_cast<std::size_t>(j)],
                                                  &component.text_general_prompt, &prior));
        }
        Tensor text_features = concat_rows(text_rows);

        std::vector<Tensor> image_rows;
        std::vector<int> labels;
        InstancePromptProvider provider = [&](const Tensor& cls) {
          return ica_forward(component.ica, cls, proto_matrix);
        };
        for (std::size_t i = begin; i < end; ++i) {
          const Sample& sample = domain.train[order[i]];
          image_rows.push_back(
              encoder.encode_image(encoder.patches_tensor(sample.image), &component.image_general_prompts, &provider));
          labels.push_back(sample.label);
        }
        Tensor image_features = concat_rows(image_rows);
        Tensor logits = scale(matmul_nt(image_features, text_features), 1.0 / cfg.temperature);
        Tensor loss = cross_entropy_with_logits(logits, labels);
        backward(loss);

        // freezing contract: only the in-flight component may accumulate
        for (const Tensor& f : frozen)
          require(!f.has_grad(), "train_domain: a frozen encoder parameter received a gradient");
        require(!proto_matrix.has_grad(), "train_domain: prototypes received a gradient");

        adam_step(params, adam);
        for (Tensor& p : params) p.zero_grad();

        loss_sum += loss.value() * static_cast<double>(end - begin);
        for (std::size_t i = begin; i < end; ++i) {
          const std::size_t r = i - begin;
          int best = 0;
          for (int j = 1; j < s_categories; ++j)
            if (logits.at(r, static_cast<std::size_t>(j)) > logits.at(r, static_cast<std::size_t>(best))) best = j;
          if (best == domain.train[order[i]].label) ++correct;
        }
      } catch (const NumericalError& e) {
        throw NumericalError("train_domain: numerical failure at epoch " + std::to_string(epoch + 1) + ", batch " +
                             std::to_string(begin / static_cast<std::size_t>(cfg.batch_size) + 1) + " of domain '" +
                             domain.name + "': " + e.what());
      }
    }
    if (stats) {
      stats->epoch_mean_loss.push_back(loss_sum / static_cast<double>(order.size()));
      stats->epoch_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(order.size()));
    }
  }
  for (Tensor& p : params) p.set_requires_grad(false);
  return component;
}

struct StageCheckpoint {
  PromptPool pool;                              // components of stages 0..s
  std::vector<DomainPrototypeSet> prototypes;   // matching prototype sets
};

struct SequentialRunResult {
  TaskSequence sequence;
  PromptPool pool;
  std::vector<DomainPrototypeSet> prototypes;   // in task order
  std::vector<StageCheckpoint> checkpoints;     // one per stage
  std::vector<TrainStats> stats;                // one per stage
};

inline SequentialRunResult sequential_run(const DualEncoder& encoder, const SyntheticDataset& ds,
                                          const TaskSequence& sequence, const TrainConfig& cfg,
                                          const PrototypeOptions& proto_opts = {}) {
  cfg.validate();
  sequence.validate(ds.domains.size());
  SequentialRunResult out;
  out.sequence = sequence;
  for (std::size_t stage = 0; stage < sequence.domain_order.size(); ++stage) {
    const int d = sequence.domain_order[stage];
    const DomainData& domain = ds.domains[static_cast<std::size_t>(d)];
    DomainPrototypeSet protos = build_domain_prototypes(encoder, d, domain.name, domain.categories,
                                                        domain.train_images_by_category(), ds.templates, proto_opts);
    TrainStats stats;
    DomainComponent component =
        train_domain(encoder, d, domain, protos, cfg, sequence.epochs[stage], &stats);
    out.pool.save_component(std::move(component));
    out.prototypes.push_back(std::move(protos));
    out.stats.push_back(std::move(stats));
    out.checkpoints.push_back({out.pool, out.prototypes});
  }
  return out;
}

}  // namespace odcl
