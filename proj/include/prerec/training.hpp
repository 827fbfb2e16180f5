#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "prerec/autograd.hpp"
#include "prerec/evaluation.hpp"
#include "prerec/inference.hpp"
#include "prerec/model.hpp"

namespace prerec::training {

struct TrainConfig {
  double lr = 3e-4;
  std::size_t batch_size = 256;  // events per step, whole user windows
  std::size_t max_epochs = 30;
  std::size_t patience = 3;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  double k_pct = 0.04;  // validation metric cutoff

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Adam with L2 weight decay added to the gradient, applied to parameters
// flagged for decay only.
class Adam {
 public:
  struct Moments {
    Matrix m;
    Matrix v;
  };

  Adam() = default;
  explicit Adam(const TrainConfig& config);

  void step(const std::vector<ag::Param*>& params);
  std::uint64_t steps() const { return t_; }
  void set_steps(std::uint64_t t) { t_ = t; }
  std::map<std::string, Moments>& state() { return state_; }
  const std::map<std::string, Moments>& state() const { return state_; }

 private:
  double lr_ = 3e-4;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  double weight_decay_ = 0.0;
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> state_;
};

// Uniform in-domain negatives with replacement, never the positive.
std::vector<std::size_t> sample_negatives(std::size_t item_count, std::size_t positive, std::size_t n,
                                          std::mt19937_64& rng);
std::vector<std::string> sample_negatives(const corpus::DomainData& domain, const std::string& positive, std::size_t n,
                                          std::mt19937_64& rng);

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // total loss per training event
  double val_r_ndcg = 0.0;
  double wallclock_s = 0.0;
};
nlohmann::json to_json(const EpochLog& e);
EpochLog epoch_log_from_json(const nlohmann::json& j);

struct Checkpoint {
  model::Model model;
  Adam optimizer;
  TrainConfig train;
  std::size_t epoch = 0;  // epoch of the retained parameters
  double best_metric = 0.0;
  std::vector<EpochLog> history;
  // Set when training stopped on a numerical failure; the model is then the
  // last good one.
  std::optional<std::string> aborted;

  explicit Checkpoint(model::ModelConfig config) : model(std::move(config)) {}
};

using EpochCallback = std::function<void(const EpochLog&)>;

// Training events at positions >= 0 of every training user in every source.
Checkpoint pretrain(const std::vector<const inference::PreparedDomain*>& sources, const model::ModelConfig& config,
                    const TrainConfig& train, const EpochCallback& on_epoch = {});

// Adds a fresh slot for the target (D = 0, offsets 0) on a copy of `base`
// and trains everything on the target's training split. Epoch 0 is the
// untrained copy, so max_epochs = 0 reproduces zero-shot scoring. With
// `limit`, only the chronologically first `limit` training events are used.
Checkpoint finetune(const Checkpoint& base, const inference::PreparedDomain& target, const TrainConfig& train,
                    std::optional<std::size_t> limit = std::nullopt, const EpochCallback& on_epoch = {});

// Training events of the domain (positions >= 0).
std::size_t training_event_count(const inference::PreparedDomain& domain);

struct IncrementalPoint {
  std::size_t size = 0;
  evaluation::DomainResult result;
};

// Independent fine-tunes of `base` on growing prefixes, each scored on the
// target test split. Sizes must be strictly ascending and available.
std::vector<IncrementalPoint> incremental_schedule(const Checkpoint& base, const inference::PreparedDomain& target,
                                                   const std::vector<std::size_t>& sizes, const TrainConfig& train,
                                                   const evaluation::MetricConfig& metric);

// Average learned-mode r-NDCG over the validation splits.
double validation_metric(model::Model& model, const std::vector<const inference::PreparedDomain*>& domains,
                         const evaluation::MetricConfig& metric);

// ---------------------------------------------------------------------------
// Persistence: "PRERECCK", uint32 version, uint64 header length, JSON header,
// then little-endian doubles for every tensor in header order.

inline constexpr std::uint32_t kCheckpointVersion = 1;

// First 16 hex digits of SHA-256 over the canonical JSON dump.
std::string fingerprint(const nlohmann::json& j);
std::string checkpoint_fingerprint(const Checkpoint& c);

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace prerec::training
