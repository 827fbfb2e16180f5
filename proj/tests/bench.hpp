#pragma once

#include <memory>
#include <vector>

#include "prerec/corpus.hpp"
#include "prerec/embedding.hpp"
#include "prerec/evaluation.hpp"
#include "prerec/inference.hpp"
#include "prerec/training.hpp"

namespace bench {

using namespace prerec;

// A generated benchmark: the last domain is the held-out target.
struct World {
  corpus::SyntheticData syn;
  corpus::SplitAssignment split;
  embedding::EmbeddingTable table;
  std::unique_ptr<embedding::CatalogEmbeddings> lookup;
  std::vector<std::unique_ptr<inference::PreparedDomain>> domains;
  std::vector<corpus::InteractionLog> source_logs;

  std::vector<const inference::PreparedDomain*> sources() const {
    std::vector<const inference::PreparedDomain*> out;
    for (std::size_t i = 0; i + 1 < domains.size(); ++i) out.push_back(domains[i].get());
    return out;
  }
  const inference::PreparedDomain& target() const { return *domains.back(); }
  std::vector<const corpus::InteractionLog*> source_log_ptrs() const {
    std::vector<const corpus::InteractionLog*> out;
    for (const auto& l : source_logs) out.push_back(&l);
    return out;
  }
};

inline std::unique_ptr<World> make_world(const corpus::SynthConfig& config, std::uint64_t seed) {
  auto w = std::make_unique<World>();
  w->syn = corpus::generate_synthetic(config, seed);
  w->split = corpus::split_users_per_domain(w->syn.log, 0.4, 0.3, 0.3, seed);
  w->table = embedding::table_from_matrix(w->syn.embeddings, w->syn.embedding_ids);
  w->lookup = std::make_unique<embedding::CatalogEmbeddings>(w->syn.catalog, w->table);
  inference::PrepareOptions opt;
  opt.interval_seconds = config.interval_seconds;
  for (const std::string& id : w->syn.truth.domain_ids)
    w->domains.push_back(inference::prepare_domain(id, w->syn.log, w->split, w->syn.catalog, *w->lookup, opt));
  for (std::size_t i = 0; i + 1 < w->syn.truth.domain_ids.size(); ++i)
    w->source_logs.push_back(w->syn.log.domain(w->syn.truth.domain_ids[i]));
  return w;
}

}  // namespace bench
