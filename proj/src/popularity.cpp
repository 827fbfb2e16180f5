#include "prerec/popularity.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "prerec/error.hpp"

namespace prerec::popularity {

std::size_t DomainCounts::item(const std::string& item_id) const {
  auto it = item_index.find(item_id);
  if (it == item_index.end()) throw DataError("item " + item_id + " has no popularity counts");
  return it->second;
}

std::int64_t IntervalCounts::interval_of(std::int64_t timestamp) const {
  const std::int64_t d = timestamp - origin;
  // floor division for timestamps before the origin
  return d >= 0 ? d / interval_seconds : -((-d + interval_seconds - 1) / interval_seconds);
}

const DomainCounts& IntervalCounts::domain(const std::string& domain_id) const {
  auto it = domains.find(domain_id);
  if (it == domains.end()) throw DataError("no popularity counts for domain " + domain_id);
  return it->second;
}

// Computed as M * (mean (c/M)^w)^(1/w) with M the largest count, so constant
// count vectors give s_w == c exactly.
Factors power_mean_normalizers(std::span<const std::uint64_t> counts) {
  Factors s{};
  if (counts.empty()) return s;
  const double mx = static_cast<double>(*std::max_element(counts.begin(), counts.end()));
  if (mx == 0.0) return s;
  for (std::size_t w = 1; w <= kFactorDim; ++w) {
    double acc = 0.0;
    for (std::uint64_t c : counts) acc += std::pow(static_cast<double>(c) / mx, static_cast<double>(w));
    s[w - 1] = mx * std::pow(acc / static_cast<double>(counts.size()), 1.0 / static_cast<double>(w));
  }
  return s;
}

IntervalCounts count_intervals(const corpus::InteractionLog& log, std::int64_t interval_seconds,
                               const corpus::ItemCatalog* catalog, std::optional<std::int64_t> origin) {
  if (interval_seconds <= 0) throw ConfigError("interval length must be positive");
  if (log.empty()) throw DataError("cannot count intervals of an empty log");
  IntervalCounts out;
  out.interval_seconds = interval_seconds;
  out.origin = origin.value_or(log.min_timestamp());
  if (log.max_timestamp() < out.origin) throw DataError("log ends before the interval origin");
  out.num_intervals = static_cast<std::size_t>(out.interval_of(log.max_timestamp())) + 1;

  std::map<std::string, std::set<std::string>> seen;
  for (const corpus::Interaction& r : log.rows()) seen[r.domain_id].insert(r.item_id);
  for (auto& [domain, items] : seen) {
    DomainCounts& dc = out.domains[domain];
    if (catalog) {
      dc.item_ids = catalog->domain_items(domain);
    } else {
      dc.item_ids.assign(items.begin(), items.end());
    }
    for (std::size_t j = 0; j < dc.item_ids.size(); ++j) dc.item_index.emplace(dc.item_ids[j], j);
    dc.counts.assign(out.num_intervals, std::vector<std::uint64_t>(dc.item_ids.size(), 0));
  }
  for (std::size_t row = 0; row < log.rows().size(); ++row) {
    const corpus::Interaction& r = log.rows()[row];
    const std::int64_t l = out.interval_of(r.timestamp);
    if (l < 0) continue;
    DomainCounts& dc = out.domains.at(r.domain_id);
    auto it = dc.item_index.find(r.item_id);
    if (it == dc.item_index.end()) {
      throw DataError("row " + std::to_string(row + 1) + ": item " + r.item_id + " is not in the catalog of domain " +
                      r.domain_id);
    }
    ++dc.counts[static_cast<std::size_t>(l)][it->second];
  }
  for (auto& [domain, dc] : out.domains) {
    for (const auto& c : dc.counts) {
      const bool empty = std::all_of(c.begin(), c.end(), [](std::uint64_t v) { return v == 0; });
      dc.degenerate.push_back(empty);
      dc.normalizers.push_back(empty ? Factors{} : power_mean_normalizers(c));
    }
  }
  return out;
}

namespace {

// Index of the interval preceding `interval`, or -1 when it has no usable counts.
std::int64_t usable_previous(const DomainCounts& dc, std::int64_t interval) {
  const std::int64_t prev = interval - 1;
  if (prev < 0 || prev >= static_cast<std::int64_t>(dc.counts.size())) return -1;
  if (dc.degenerate[static_cast<std::size_t>(prev)]) return -1;
  return prev;
}

Factors factors_at(const DomainCounts& dc, std::size_t item, std::int64_t prev) {
  Factors f{};
  if (prev < 0) return f;
  const auto p = static_cast<std::size_t>(prev);
  const double c = static_cast<double>(dc.counts[p][item]);
  for (std::size_t w = 0; w < kFactorDim; ++w) f[w] = c / dc.normalizers[p][w];
  return f;
}

}  // namespace

Factors popularity_factors(const IntervalCounts& counts, const std::string& domain_id, const std::string& item_id,
                           std::int64_t timestamp) {
  const DomainCounts& dc = counts.domain(domain_id);
  const std::size_t item = dc.item(item_id);
  return factors_at(dc, item, usable_previous(dc, counts.interval_of(timestamp)));
}

Matrix factor_matrix(const DomainCounts& counts, std::span<const std::string> item_ids, std::int64_t interval) {
  Matrix out(item_ids.size(), kFactorDim);
  const std::int64_t prev = usable_previous(counts, interval);
  if (prev < 0) return out;
  for (std::size_t r = 0; r < item_ids.size(); ++r) {
    const Factors f = factors_at(counts, counts.item(item_ids[r]), prev);
    std::copy(f.begin(), f.end(), out.row_span(r).begin());
  }
  return out;
}

std::vector<double> previous_counts(const DomainCounts& counts, std::span<const std::string> item_ids,
                                    std::int64_t interval) {
  std::vector<double> out(item_ids.size(), 0.0);
  const std::int64_t prev = interval - 1;
  if (prev < 0 || prev >= static_cast<std::int64_t>(counts.counts.size())) return out;
  for (std::size_t r = 0; r < item_ids.size(); ++r)
    out[r] = static_cast<double>(counts.counts[static_cast<std::size_t>(prev)][counts.item(item_ids[r])]);
  return out;
}

Activation parse_activation(const std::string& name) {
  if (name == "tanh") return Activation::kTanh;
  if (name == "identity") return Activation::kIdentity;
  throw ConfigError("unknown popularity activation '" + name + "'");
}

const char* activation_name(Activation a) { return a == Activation::kTanh ? "tanh" : "identity"; }

std::vector<double> pop_embed(std::span<const double> factors, const PopNetParams& params, Activation activation) {
  if (factors.size() != params.weight.rows) {
    throw DataError("popularity factors have dimension " + std::to_string(factors.size()) + ", weight expects " +
                    std::to_string(params.weight.rows));
  }
  if (params.bias.size() != params.weight.cols) throw DataError("popularity bias does not match weight columns");
  std::vector<double> z(params.weight.cols);
  for (std::size_t b = 0; b < z.size(); ++b) {
    double s = params.bias.data[b];
    for (std::size_t w = 0; w < factors.size(); ++w) s += factors[w] * params.weight(w, b);
    z[b] = activation == Activation::kTanh ? std::tanh(s) : s;
  }
  return z;
}

double pop_score(std::span<const double> z, const PopNetParams& params) {
  if (z.size() != params.score_weight.size()) throw DataError("popularity embedding does not match W_z");
  double s = 0.0;
  for (std::size_t b = 0; b < z.size(); ++b) s += z[b] * params.score_weight.data[b];
  return s;
}

void export_counts_csv(const IntervalCounts& counts, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "domain,interval,item,count\n";
  for (const auto& [domain, dc] : counts.domains)
    for (std::size_t l = 0; l < dc.counts.size(); ++l)
      for (std::size_t j = 0; j < dc.item_ids.size(); ++j)
        if (dc.counts[l][j] > 0) out << domain << ',' << l << ',' << dc.item_ids[j] << ',' << dc.counts[l][j] << '\n';
}

}  // namespace prerec::popularity
