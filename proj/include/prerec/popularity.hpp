#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "prerec/corpus.hpp"
#include "prerec/tensor.hpp"

namespace prerec::popularity {

inline constexpr std::size_t kFactorDim = 4;
inline constexpr std::int64_t kDefaultIntervalSeconds = 15 * 86400;

using Factors = std::array<double, kFactorDim>;

struct DomainCounts {
  std::vector<std::string> item_ids;  // sorted
  std::unordered_map<std::string, std::size_t> item_index;
  std::vector<std::vector<std::uint64_t>> counts;  // [interval][item]
  std::vector<Factors> normalizers;                // s_1..s_4 per interval
  std::vector<bool> degenerate;                    // no interactions in the interval

  std::size_t item(const std::string& item_id) const;
};

struct IntervalCounts {
  std::int64_t origin = 0;
  std::int64_t interval_seconds = kDefaultIntervalSeconds;
  std::size_t num_intervals = 0;
  std::map<std::string, DomainCounts> domains;

  // floor((t - origin) / interval_seconds); negative before the origin.
  std::int64_t interval_of(std::int64_t timestamp) const;
  const DomainCounts& domain(const std::string& domain_id) const;
};

// Counts per (domain, item, interval). With a catalog, every catalog item of a
// counted domain takes part in the normalizers (zero counts included) and
// interactions with items outside it raise DataError; otherwise the item set is
// the items seen in the log. `origin` defaults to the log's first timestamp.
IntervalCounts count_intervals(const corpus::InteractionLog& log, std::int64_t interval_seconds,
                               const corpus::ItemCatalog* catalog = nullptr,
                               std::optional<std::int64_t> origin = std::nullopt);

// s_w = (sum_j c_j^w / |J|)^(1/w) for w = 1..4.
Factors power_mean_normalizers(std::span<const std::uint64_t> counts);

// F_j for an event at `timestamp`, read from the interval before it. Zero in
// the first interval, before the origin, or after a degenerate interval.
Factors popularity_factors(const IntervalCounts& counts, const std::string& domain_id, const std::string& item_id,
                           std::int64_t timestamp);

// F rows for `item_ids` at interval `interval` (item_ids.size() x 4).
Matrix factor_matrix(const DomainCounts& counts, std::span<const std::string> item_ids, std::int64_t interval);

// Raw counts of the interval before `interval`, zero where there is none.
std::vector<double> previous_counts(const DomainCounts& counts, std::span<const std::string> item_ids,
                                    std::int64_t interval);

enum class Activation { kTanh, kIdentity };
Activation parse_activation(const std::string& name);
const char* activation_name(Activation a);

struct PopNetParams {
  Matrix weight;        // 4 x B
  Matrix bias;          // 1 x B
  Matrix score_weight;  // 1 x B (W_z)
};

// Z = activation(F * weight + bias).
std::vector<double> pop_embed(std::span<const double> factors, const PopNetParams& params,
                              Activation activation = Activation::kTanh);
// Z . W_z
double pop_score(std::span<const double> z, const PopNetParams& params);

// CSV `domain,interval,item,count`, nonzero cells only.
void export_counts_csv(const IntervalCounts& counts, const std::filesystem::path& path);

}  // namespace prerec::popularity
