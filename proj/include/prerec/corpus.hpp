#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "prerec/tensor.hpp"

namespace prerec::corpus {

struct Interaction {
  std::string user_id;
  std::string item_id;
  std::string domain_id;
  std::int64_t timestamp = 0;
};

// One user's chronologically ordered events inside one domain. Users that
// appear in several domains get one sequence per domain.
struct UserSequence {
  std::string user_id;
  std::string domain_id;
  std::vector<std::size_t> events;  // indices into InteractionLog::rows()
};

// Timestamped (user, item, domain) events. Rows keep input order; sequences()
// orders each user's events by (timestamp, input position).
class InteractionLog {
 public:
  InteractionLog() = default;
  explicit InteractionLog(std::vector<Interaction> rows);

  const std::vector<Interaction>& rows() const { return rows_; }
  std::size_t size() const { return rows_.size(); }
  bool empty() const { return rows_.empty(); }

  const std::vector<UserSequence>& sequences() const { return sequences_; }
  std::vector<std::string> domains() const;
  std::size_t user_count() const { return sequences_.size(); }

  // Rows restricted to a domain, in input order.
  InteractionLog domain(const std::string& domain_id) const;
  std::int64_t min_timestamp() const;
  std::int64_t max_timestamp() const;

 private:
  std::vector<Interaction> rows_;
  std::vector<UserSequence> sequences_;
};

enum class Format { kCsv, kJsonl };
Format parse_format(const std::string& name);
Format format_from_path(const std::filesystem::path& path);

// Throws DataError naming the 1-based data row on malformed input.
InteractionLog load_interactions(const std::filesystem::path& path, Format format);
void save_interactions_csv(const InteractionLog& log, const std::filesystem::path& path);

struct ItemRecord {
  std::string item_id;
  std::string domain_id;
  std::optional<std::string> text;
  std::optional<std::size_t> embedding_ref;
};

class ItemCatalog {
 public:
  ItemCatalog() = default;
  explicit ItemCatalog(std::vector<ItemRecord> items);

  const std::vector<ItemRecord>& items() const { return items_; }
  const ItemRecord* find(const std::string& item_id) const;
  // Item ids of one domain sorted lexicographically.
  std::vector<std::string> domain_items(const std::string& domain_id) const;
  std::vector<std::string> domains() const;

 private:
  std::vector<ItemRecord> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

ItemCatalog load_catalog(const std::filesystem::path& path);
void save_catalog(const ItemCatalog& catalog, const std::filesystem::path& path);

struct DomainMeta {
  std::string domain_id;
  std::size_t item_count = 0;
  std::size_t user_count = 0;
};
std::vector<DomainMeta> domain_meta(const InteractionLog& log, const ItemCatalog& catalog);

enum class Split { kTrain, kValidation, kTest };
const char* split_name(Split s);

struct SplitAssignment {
  std::map<std::string, Split> users;
  std::uint64_t seed = 0;
  bool per_domain = false;

  std::optional<Split> lookup(const std::string& domain_id, const std::string& user_id) const;

  std::size_t count(Split s) const;
};

// Seeded shuffle of the distinct user ids followed by a proportional cut.
SplitAssignment split_users(const InteractionLog& log, double train, double validation, double test,
                            std::uint64_t seed);
// Per-domain variant: each domain's users are split independently and keyed
// as "<domain>\x1f<user>"; use split_key() to look them up.
SplitAssignment split_users_per_domain(const InteractionLog& log, double train, double validation, double test,
                                       std::uint64_t seed);
std::string split_key(const std::string& domain_id, const std::string& user_id);

// Rows whose user (per-domain split key) is assigned to `which`.
InteractionLog select_split(const InteractionLog& log, const SplitAssignment& split, Split which);

// Drops every row whose user id or item id occurs in any source log.
InteractionLog filter_unseen(const InteractionLog& test_log, const std::vector<const InteractionLog*>& source_logs);

// ---------------------------------------------------------------------------
// Indexed per-domain view used by training, inference and evaluation.

struct IndexedSequence {
  std::string user_id;
  std::vector<std::size_t> items;  // domain-local item indices
  std::vector<std::int64_t> timestamps;
};

struct DomainData {
  std::string domain_id;
  std::vector<std::string> item_ids;  // sorted; index == tie-break order
  std::unordered_map<std::string, std::size_t> item_index;
  Matrix content;  // item_count x input_dim universal content vectors
  std::vector<IndexedSequence> users;

  std::size_t item_count() const { return item_ids.size(); }
  std::size_t event_count(std::size_t min_history = 1) const;
};

class EmbeddingLookup {
 public:
  virtual ~EmbeddingLookup() = default;
  virtual std::size_t dim() const = 0;
  virtual std::vector<double> vector_for(const std::string& item_id) const = 0;
};

// Indexed view of one domain: catalog items sorted by id with their content
// vectors, and user sequences. Interactions with items outside the catalog
// raise DataError. Sequences shorter than `min_length` are dropped and counted
// into `dropped` when provided.
DomainData build_domain(const std::string& domain_id, const InteractionLog& log, const ItemCatalog& catalog,
                        const EmbeddingLookup& embeddings, std::size_t min_length = 2,
                        std::size_t* dropped = nullptr);

// ---------------------------------------------------------------------------
// Synthetic benchmark with planted cross-domain and popularity biases.

struct SynthConfig {
  std::size_t num_domains = 4;
  std::size_t items_per_domain = 400;
  std::size_t users_per_domain = 1000;
  std::size_t content_dim = 32;
  std::size_t min_seq_len = 4;
  std::size_t max_seq_len = 12;
  std::size_t num_intervals = 8;
  std::int64_t interval_seconds = 15 * 86400;
  // Sharpness of the user/item affinity.
  double affinity_scale = 4.0;
  // Weight of recent history in the user's momentary interest.
  double history_weight = 1.0;
  // Norm of each planted domain vector (0 disables cross-domain bias).
  double domain_bias_scale = 0.0;
  // Scale of the planted popularity logit (0 disables in-domain bias).
  double popularity_scale = 0.0;
  // Lag-one autocorrelation of the per-interval item hotness.
  double popularity_persistence = 0.8;
  // Per-interval multipliers on the popularity logit, cycled over intervals.
  std::vector<double> popularity_multipliers{1.0};
  // Extra additive logits for specific items: (domain index, item index, boost).
  struct ItemBoost {
    std::size_t domain = 0;
    std::size_t item = 0;
    double boost = 0.0;
  };
  std::vector<ItemBoost> item_boosts;
  // Scale of the planted constant domain logit shift (softmax-invariant).
  double domain_logit_scale = 1.0;

  void validate() const;
};

struct GroundTruth {
  SynthConfig config;
  std::uint64_t seed = 0;
  std::vector<std::string> domain_ids;
  std::vector<std::vector<double>> domain_vectors;        // planted D_k (content space)
  std::vector<double> domain_logit_shift;                 // planted D_k . w_d per domain
  std::vector<std::vector<std::vector<double>>> item_hotness;  // [domain][interval][item]
  std::vector<std::vector<double>> popularity_logit(std::size_t domain) const;  // [interval][item]
};

struct SyntheticData {
  InteractionLog log;
  ItemCatalog catalog;
  Matrix embeddings;  // row r = catalog item with embedding_ref r
  std::vector<std::string> embedding_ids;
  GroundTruth truth;
};

SyntheticData generate_synthetic(const SynthConfig& config, std::uint64_t seed);

std::string domain_name(std::size_t index);
std::string item_name(std::size_t domain, std::size_t item);
std::string user_name(std::size_t domain, std::size_t user);

void save_ground_truth(const GroundTruth& truth, const std::filesystem::path& path);
GroundTruth load_ground_truth(const std::filesystem::path& path);

}  // namespace prerec::corpus
