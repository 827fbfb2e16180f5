#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include <json.hpp>

#include "prerec/corpus.hpp"
#include "prerec/error.hpp"

namespace prerec::corpus {

using nlohmann::json;

void SynthConfig::validate() const {
  if (num_domains == 0 || items_per_domain == 0 || users_per_domain == 0 || content_dim == 0)
    throw ConfigError("synthetic sizes must be positive");
  if (min_seq_len == 0 || max_seq_len < min_seq_len) throw ConfigError("synthetic sequence lengths must satisfy 0 < min <= max");
  if (num_intervals == 0 || interval_seconds <= 0) throw ConfigError("synthetic intervals must be positive");
  if (popularity_multipliers.empty()) throw ConfigError("popularity_multipliers must not be empty");
  if (popularity_persistence < 0.0 || popularity_persistence > 1.0) throw ConfigError("popularity_persistence must lie in [0, 1]");
  for (const ItemBoost& b : item_boosts) {
    if (b.domain >= num_domains || b.item >= items_per_domain) throw ConfigError("item boost refers to a missing item");
  }
}

std::string domain_name(std::size_t index) { return "d" + std::to_string(index); }

std::string item_name(std::size_t domain, std::size_t item) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "d%zu-i%06zu", domain, item);
  return buf;
}

std::string user_name(std::size_t domain, std::size_t user) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "d%zu-u%07zu", domain, user);
  return buf;
}

std::vector<std::vector<double>> GroundTruth::popularity_logit(std::size_t domain) const {
  const auto& hot = item_hotness.at(domain);
  std::vector<std::vector<double>> out(hot.size());
  for (std::size_t l = 0; l < hot.size(); ++l) {
    const double mult = config.popularity_multipliers[l % config.popularity_multipliers.size()];
    out[l].resize(hot[l].size());
    for (std::size_t j = 0; j < hot[l].size(); ++j) out[l][j] = config.popularity_scale * mult * hot[l][j];
  }
  return out;
}

namespace {

std::vector<double> gaussian_vector(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<double> v(dim);
  for (double& x : v) x = n01(rng);
  return v;
}

std::vector<double> unit_vector(std::size_t dim, std::mt19937_64& rng) {
  std::vector<double> v = gaussian_vector(dim, rng);
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

double dot(const std::vector<double>& a, const double* b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

// Interactions follow the model's own score form: an item representation
// m_j + D_k, a user interest mixing a private taste, recent history and the
// domain vector, an additive per-interval popularity logit, and a constant
// per-domain logit shift.
SyntheticData generate_synthetic(const SynthConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  const std::size_t dim = config.content_dim;
  const std::size_t n_items = config.items_per_domain;

  SyntheticData out;
  GroundTruth& truth = out.truth;
  truth.config = config;
  truth.seed = seed;

  const std::vector<double> logit_direction = unit_vector(dim, rng);
  out.embeddings = Matrix(config.num_domains * n_items, dim);
  std::vector<ItemRecord> catalog;
  catalog.reserve(config.num_domains * n_items);
  std::vector<Interaction> rows;

  const std::int64_t window = 2 * config.interval_seconds;
  const std::int64_t horizon = static_cast<std::int64_t>(config.num_intervals) * config.interval_seconds;

  for (std::size_t k = 0; k < config.num_domains; ++k) {
    truth.domain_ids.push_back(domain_name(k));
    std::vector<double> dvec = unit_vector(dim, rng);
    for (double& x : dvec) x *= config.domain_bias_scale;
    truth.domain_vectors.push_back(dvec);
    truth.domain_logit_shift.push_back(config.domain_logit_scale * dot(dvec, logit_direction.data()));

    const std::size_t row0 = k * n_items;
    for (std::size_t j = 0; j < n_items; ++j) {
      const std::vector<double> m = unit_vector(dim, rng);
      std::copy(m.begin(), m.end(), out.embeddings.row_span(row0 + j).begin());
      const std::string id = item_name(k, j);
      out.embedding_ids.push_back(id);
      catalog.push_back(ItemRecord{id, truth.domain_ids.back(), std::nullopt, row0 + j});
    }

    // Item hotness follows a stationary AR(1) process across intervals.
    std::vector<std::vector<double>> hot(config.num_intervals, std::vector<double>(n_items));
    const double rho = config.popularity_persistence;
    const double innov = std::sqrt(1.0 - rho * rho);
    for (std::size_t j = 0; j < n_items; ++j) hot[0][j] = n01(rng);
    for (std::size_t l = 1; l < config.num_intervals; ++l)
      for (std::size_t j = 0; j < n_items; ++j) hot[l][j] = rho * hot[l - 1][j] + innov * n01(rng);
    truth.item_hotness.push_back(hot);
    const std::vector<std::vector<double>> pop = truth.popularity_logit(k);

    std::vector<double> item_extra(n_items, 0.0);
    for (const SynthConfig::ItemBoost& b : config.item_boosts)
      if (b.domain == k) item_extra[b.item] += b.boost;

    // Item representations shifted by the domain vector.
    Matrix items(n_items, dim);
    for (std::size_t j = 0; j < n_items; ++j)
      for (std::size_t c = 0; c < dim; ++c) items(j, c) = out.embeddings(row0 + j, c) + dvec[c];

    std::uniform_int_distribution<std::size_t> len_dist(config.min_seq_len, config.max_seq_len);
    std::uniform_int_distribution<std::int64_t> start_dist(0, std::max<std::int64_t>(0, horizon - window));
    std::uniform_int_distribution<std::int64_t> offset_dist(0, window - 1);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::vector<double> logits(n_items);
    std::vector<double> interest(dim);

    for (std::size_t u = 0; u < config.users_per_domain; ++u) {
      const std::string uid = user_name(k, u);
      const std::vector<double> taste = unit_vector(dim, rng);
      const std::size_t len = len_dist(rng);
      const std::int64_t start = start_dist(rng);
      std::vector<std::int64_t> times(len);
      for (auto& t : times) t = std::min(horizon - 1, start + offset_dist(rng));
      std::sort(times.begin(), times.end());

      std::vector<std::size_t> history;
      for (std::size_t step = 0; step < len; ++step) {
        const std::size_t interval = static_cast<std::size_t>(times[step] / config.interval_seconds);
        // Momentary interest: taste + weighted mean of up to three recent items + domain vector.
        for (std::size_t c = 0; c < dim; ++c) interest[c] = taste[c] + dvec[c];
        const std::size_t recent = std::min<std::size_t>(3, history.size());
        for (std::size_t h = history.size() - recent; h < history.size(); ++h) {
          const double w = config.history_weight / static_cast<double>(recent);
          for (std::size_t c = 0; c < dim; ++c) interest[c] += w * out.embeddings(row0 + history[h], c);
        }
        double mx = -1e300;
        for (std::size_t j = 0; j < n_items; ++j) {
          logits[j] = config.affinity_scale * dot(interest, items.data.data() + j * dim) + pop[interval][j] +
                      item_extra[j] + truth.domain_logit_shift[k];
          mx = std::max(mx, logits[j]);
        }
        double z = 0.0;
        for (double& l : logits) {
          l = std::exp(l - mx);
          z += l;
        }
        double draw = u01(rng) * z;
        std::size_t pick = n_items - 1;
        for (std::size_t j = 0; j < n_items; ++j) {
          draw -= logits[j];
          if (draw <= 0.0) {
            pick = j;
            break;
          }
        }
        history.push_back(pick);
        rows.push_back(Interaction{uid, item_name(k, pick), truth.domain_ids.back(), times[step]});
      }
    }
  }
  out.log = InteractionLog(std::move(rows));
  out.catalog = ItemCatalog(std::move(catalog));
  return out;
}

void save_ground_truth(const GroundTruth& truth, const std::filesystem::path& path) {
  const SynthConfig& c = truth.config;
  json boosts = json::array();
  for (const auto& b : c.item_boosts) boosts.push_back({{"domain", b.domain}, {"item", b.item}, {"boost", b.boost}});
  json j{
      {"seed", truth.seed},
      {"config",
       {{"num_domains", c.num_domains},
        {"items_per_domain", c.items_per_domain},
        {"users_per_domain", c.users_per_domain},
        {"content_dim", c.content_dim},
        {"min_seq_len", c.min_seq_len},
        {"max_seq_len", c.max_seq_len},
        {"num_intervals", c.num_intervals},
        {"interval_seconds", c.interval_seconds},
        {"affinity_scale", c.affinity_scale},
        {"history_weight", c.history_weight},
        {"domain_bias_scale", c.domain_bias_scale},
        {"popularity_scale", c.popularity_scale},
        {"popularity_persistence", c.popularity_persistence},
        {"popularity_multipliers", c.popularity_multipliers},
        {"item_boosts", boosts},
        {"domain_logit_scale", c.domain_logit_scale}}},
      {"domain_ids", truth.domain_ids},
      {"domain_vectors", truth.domain_vectors},
      {"domain_logit_shift", truth.domain_logit_shift},
      {"item_hotness", truth.item_hotness},
  };
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump() << '\n';
}

GroundTruth load_ground_truth(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open ground-truth file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ": invalid JSON (" + e.what() + ")");
  }
  GroundTruth t;
  const json& c = j.at("config");
  t.config.num_domains = c.at("num_domains");
  t.config.items_per_domain = c.at("items_per_domain");
  t.config.users_per_domain = c.at("users_per_domain");
  t.config.content_dim = c.at("content_dim");
  t.config.min_seq_len = c.at("min_seq_len");
  t.config.max_seq_len = c.at("max_seq_len");
  t.config.num_intervals = c.at("num_intervals");
  t.config.interval_seconds = c.at("interval_seconds");
  t.config.affinity_scale = c.at("affinity_scale");
  t.config.history_weight = c.at("history_weight");
  t.config.domain_bias_scale = c.at("domain_bias_scale");
  t.config.popularity_scale = c.at("popularity_scale");
  t.config.popularity_persistence = c.at("popularity_persistence");
  t.config.popularity_multipliers = c.at("popularity_multipliers").get<std::vector<double>>();
  for (const json& b : c.at("item_boosts")) t.config.item_boosts.push_back({b.at("domain"), b.at("item"), b.at("boost")});
  t.config.domain_logit_scale = c.at("domain_logit_scale");
  t.seed = j.at("seed");
  t.domain_ids = j.at("domain_ids").get<std::vector<std::string>>();
  t.domain_vectors = j.at("domain_vectors").get<std::vector<std::vector<double>>>();
  t.domain_logit_shift = j.at("domain_logit_shift").get<std::vector<double>>();
  t.item_hotness = j.at("item_hotness").get<std::vector<std::vector<std::vector<double>>>>();
  return t;
}

}  // namespace prerec::corpus
