#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prerec/corpus.hpp"
#include "prerec/model.hpp"
#include "prerec/popularity.hpp"

namespace prerec::inference {

// One domain ready for training and scoring: catalog-ordered content, the
// three user splits and popularity factors from the full domain log.
struct PreparedDomain {
  std::string id;
  corpus::DomainData train;
  corpus::DomainData validation;
  corpus::DomainData test;
  corpus::InteractionLog test_log;  // raw rows of the test users
  popularity::DomainCounts counts;
  std::int64_t origin = 0;
  std::int64_t interval_seconds = popularity::kDefaultIntervalSeconds;
  std::vector<Matrix> factors;  // see model::build_factor_table
  std::size_t dropped_users = 0;

  PreparedDomain() = default;
  PreparedDomain(const PreparedDomain&) = delete;
  PreparedDomain& operator=(const PreparedDomain&) = delete;

  const std::vector<std::string>& item_ids() const { return train.item_ids; }
  std::size_t item_count() const { return train.item_ids.size(); }
  const Matrix& content() const { return train.content; }
  std::int64_t interval_of(std::int64_t timestamp) const;
  const corpus::DomainData& split(corpus::Split s) const;
  model::DomainView view(std::size_t slot = model::kNoSlot) const;
};

struct PrepareOptions {
  std::int64_t interval_seconds = popularity::kDefaultIntervalSeconds;
  std::optional<std::int64_t> origin;  // defaults to the first timestamp of `log`
  std::size_t min_length = 2;
};

// `log` may hold several domains; only `domain_id` rows are used, but the
// default interval origin is the first timestamp of the whole log.
std::unique_ptr<PreparedDomain> prepare_domain(const std::string& domain_id, const corpus::InteractionLog& log,
                                               const corpus::SplitAssignment& split,
                                               const corpus::ItemCatalog& catalog,
                                               const corpus::EmbeddingLookup& embeddings,
                                               const PrepareOptions& options);

// Indexed view of an arbitrary log restricted to the domain's catalog order,
// used for the unseen-filtered test set.
corpus::DomainData reindex(const PreparedDomain& domain, const corpus::InteractionLog& log, std::size_t min_length = 2);

// Next-item prediction at `position` of one user sequence.
struct Event {
  std::size_t user = 0;
  std::size_t position = 0;
  std::int64_t interval = 0;
  std::size_t target = 0;
};

// Events at positions >= min_position of every user, user-major order.
std::vector<Event> make_events(const PreparedDomain& domain, const corpus::DomainData& split,
                               std::size_t min_position);

class Ranker {
 public:
  virtual ~Ranker() = default;
  virtual std::string name() const = 0;
  // Scores over the domain catalog, one row per event; higher is better.
  virtual Matrix score(const PreparedDomain& domain, const corpus::DomainData& split,
                       std::span<const Event> events) = 0;
};

// Scores with a PreRec-family model. Zero-shot mode needs no slot; learned
// mode uses the model's latents for the domain and fails if it has none.
class ModelRanker : public Ranker {
 public:
  ModelRanker(model::Model& model, model::Mode mode, std::string name = "prerec");
  std::string name() const override { return name_; }
  Matrix score(const PreparedDomain& domain, const corpus::DomainData& split, std::span<const Event> events) override;

 private:
  model::Model* model_;
  model::Mode mode_;
  std::string name_;
};

struct RankingRequest {
  std::string user_id;
  std::vector<std::string> history;  // item ids, oldest first
  std::int64_t timestamp = 0;
};

// Probabilities over the catalog (catalog order). Unknown history items are
// skipped with a warning on stderr.
std::vector<double> zero_shot_scores(model::Model& model, const PreparedDomain& domain, const RankingRequest& request);
std::vector<double> finetuned_scores(model::Model& model, const PreparedDomain& domain, const RankingRequest& request);

// ceil(n * k_pct / 100), at least 1; rejects k_pct outside (0, 100].
std::size_t topk_cutoff(std::size_t n, double k_pct);

struct RankedList {
  std::vector<std::string> items;
  std::vector<double> scores;
};

// Descending by score, ties by catalog position (item id order), truncated
// to topk_cutoff(scores.size(), k_pct).
RankedList rank_topk(std::span<const double> scores, double k_pct, std::span<const std::string> item_ids);

// 1-based rank of `target` under the same ordering, by counting.
std::size_t rank_of(std::span<const double> scores, std::size_t target);

}  // namespace prerec::inference
