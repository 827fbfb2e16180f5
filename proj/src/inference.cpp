#include "prerec/inference.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <numeric>

#include "prerec/error.hpp"

namespace prerec::inference {

std::int64_t PreparedDomain::interval_of(std::int64_t timestamp) const {
  const std::int64_t d = timestamp - origin;
  return d >= 0 ? d / interval_seconds : -((-d + interval_seconds - 1) / interval_seconds);
}

const corpus::DomainData& PreparedDomain::split(corpus::Split s) const {
  switch (s) {
    case corpus::Split::kTrain:
      return train;
    case corpus::Split::kValidation:
      return validation;
    case corpus::Split::kTest:
      return test;
  }
  throw DataError("unknown split");
}

model::DomainView PreparedDomain::view(std::size_t slot) const {
  model::DomainView v;
  v.slot = slot;
  v.content = &train.content;
  v.factors = &factors;
  return v;
}

std::unique_ptr<PreparedDomain> prepare_domain(const std::string& domain_id, const corpus::InteractionLog& log,
                                               const corpus::SplitAssignment& split,
                                               const corpus::ItemCatalog& catalog,
                                               const corpus::EmbeddingLookup& embeddings,
                                               const PrepareOptions& options) {
  corpus::InteractionLog full = log.domain(domain_id);
  if (full.empty()) throw DataError("domain " + domain_id + " has no interactions");
  auto d = std::make_unique<PreparedDomain>();
  d->id = domain_id;
  d->origin = options.origin.value_or(log.min_timestamp());
  d->interval_seconds = options.interval_seconds;
  std::size_t dropped = 0;
  d->train = corpus::build_domain(domain_id, corpus::select_split(full, split, corpus::Split::kTrain), catalog,
                                  embeddings, options.min_length, &dropped);
  d->dropped_users += dropped;
  d->validation = corpus::build_domain(domain_id, corpus::select_split(full, split, corpus::Split::kValidation),
                                       catalog, embeddings, options.min_length, &dropped);
  d->dropped_users += dropped;
  d->test_log = corpus::select_split(full, split, corpus::Split::kTest);
  d->test = corpus::build_domain(domain_id, d->test_log, catalog, embeddings, options.min_length, &dropped);
  d->dropped_users += dropped;
  popularity::IntervalCounts counts = popularity::count_intervals(full, options.interval_seconds, &catalog, d->origin);
  d->counts = counts.domain(domain_id);
  d->factors = model::build_factor_table(d->counts, d->train.item_ids);
  return d;
}

corpus::DomainData reindex(const PreparedDomain& domain, const corpus::InteractionLog& log, std::size_t min_length) {
  corpus::DomainData out;
  out.domain_id = domain.id;
  out.item_ids = domain.train.item_ids;
  out.item_index = domain.train.item_index;
  out.content = domain.train.content;
  for (const corpus::UserSequence& s : log.sequences()) {
    if (s.domain_id != domain.id || s.events.size() < min_length) continue;
    corpus::IndexedSequence seq;
    seq.user_id = s.user_id;
    for (std::size_t e : s.events) {
      const corpus::Interaction& r = log.rows()[e];
      auto it = out.item_index.find(r.item_id);
      if (it == out.item_index.end()) throw DataError("item " + r.item_id + " missing from domain " + domain.id);
      seq.items.push_back(it->second);
      seq.timestamps.push_back(r.timestamp);
    }
    out.users.push_back(std::move(seq));
  }
  return out;
}

std::vector<Event> make_events(const PreparedDomain& domain, const corpus::DomainData& split,
                               std::size_t min_position) {
  std::vector<Event> out;
  for (std::size_t u = 0; u < split.users.size(); ++u) {
    const corpus::IndexedSequence& s = split.users[u];
    for (std::size_t p = min_position; p < s.items.size(); ++p)
      out.push_back(Event{u, p, domain.interval_of(s.timestamps[p]), s.items[p]});
  }
  return out;
}

ModelRanker::ModelRanker(model::Model& model, model::Mode mode, std::string name)
    : model_(&model), mode_(mode), name_(std::move(name)) {}

Matrix ModelRanker::score(const PreparedDomain& domain, const corpus::DomainData& split,
                          std::span<const Event> events) {
  std::size_t slot = model::kNoSlot;
  if (mode_ == model::Mode::kLearned) {
    auto s = model_->find_domain(domain.id);
    if (!s) throw DataError("model has no learned latents for domain " + domain.id);
    slot = *s;
  }
  const model::DomainView view = domain.view(slot);
  const std::size_t max_len = model_->config().max_len;

  // One encoder pass per user when its history fits, else one per event.
  std::vector<std::vector<std::size_t>> histories;
  std::vector<std::size_t> seq_of_event(events.size());
  std::vector<std::size_t> pos_of_event(events.size());
  std::map<std::size_t, std::size_t> user_seq;
  std::map<std::size_t, std::size_t> user_max;
  for (const Event& e : events) user_max[e.user] = std::max(user_max[e.user], e.position);
  for (std::size_t i = 0; i < events.size(); ++i) {
    const Event& e = events[i];
    const auto& items = split.users.at(e.user).items;
    const std::size_t longest = user_max[e.user];
    if (longest <= max_len) {
      auto [it, fresh] = user_seq.emplace(e.user, histories.size());
      if (fresh) histories.emplace_back(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(longest));
      seq_of_event[i] = it->second;
      pos_of_event[i] = e.position;
    } else {
      const std::size_t begin = e.position > max_len ? e.position - max_len : 0;
      seq_of_event[i] = histories.size();
      histories.emplace_back(items.begin() + static_cast<std::ptrdiff_t>(begin),
                             items.begin() + static_cast<std::ptrdiff_t>(e.position));
      pos_of_event[i] = e.position - begin;
    }
  }
  std::vector<model::SequenceInput> seqs;
  for (const auto& h : histories) seqs.push_back(model::SequenceInput{&view, h, std::nullopt});
  std::vector<model::EventQuery> queries(events.size());
  for (std::size_t i = 0; i < events.size(); ++i) queries[i] = {seq_of_event[i], pos_of_event[i], events[i].interval};
  return model::score_catalog(*model_, view, seqs, queries, mode_);
}

namespace {

std::vector<double> request_scores(model::Model& model, const PreparedDomain& domain, const RankingRequest& request,
                                   model::Mode mode) {
  if (domain.item_count() == 0) throw DataError("empty catalog for domain " + domain.id);
  std::size_t slot = model::kNoSlot;
  if (mode == model::Mode::kLearned) {
    auto s = model.find_domain(domain.id);
    if (!s) throw DataError("checkpoint was not fine-tuned on domain " + domain.id);
    slot = *s;
  }
  std::vector<std::size_t> history;
  for (const std::string& id : request.history) {
    auto it = domain.train.item_index.find(id);
    if (it == domain.train.item_index.end()) {
      std::cerr << "warning: skipping unknown history item " << id << " for user " << request.user_id << '\n';
      continue;
    }
    history.push_back(it->second);
  }
  const std::size_t max_len = model.config().max_len;
  if (history.size() > max_len) history.erase(history.begin(), history.end() - static_cast<std::ptrdiff_t>(max_len));
  const model::DomainView view = domain.view(slot);
  model::SequenceInput in{&view, history, std::nullopt};
  model::EventQuery q{0, history.size(), domain.interval_of(request.timestamp)};
  Matrix logits = model::score_catalog(model, view, std::span(&in, 1), std::span(&q, 1), mode);
  return model::softmax(logits.data);
}

}  // namespace

std::vector<double> zero_shot_scores(model::Model& model, const PreparedDomain& domain, const RankingRequest& request) {
  return request_scores(model, domain, request, model::Mode::kZeroShot);
}

std::vector<double> finetuned_scores(model::Model& model, const PreparedDomain& domain, const RankingRequest& request) {
  return request_scores(model, domain, request, model::Mode::kLearned);
}

std::size_t topk_cutoff(std::size_t n, double k_pct) {
  if (!(k_pct > 0.0) || k_pct > 100.0) throw ConfigError("K% must lie in (0, 100]");
  // Guard against binary representation noise such as 10000 * 0.04 / 100 = 4.0000000000000001.
  const double raw = static_cast<double>(n) * k_pct / 100.0;
  const double rounded = std::round(raw);
  const double c = std::abs(raw - rounded) < 1e-9 * std::max(1.0, raw) ? rounded : std::ceil(raw);
  return std::max<std::size_t>(1, std::min(n, static_cast<std::size_t>(c)));
}

RankedList rank_topk(std::span<const double> scores, double k_pct, std::span<const std::string> item_ids) {
  if (scores.size() != item_ids.size()) throw DataError("rank_topk: scores and item ids differ in length");
  for (double s : scores)
    if (!std::isfinite(s)) throw NumericalError("rank_topk: non-finite score");
  const std::size_t keep = topk_cutoff(scores.size(), k_pct);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return item_ids[a] < item_ids[b];
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), better);
  RankedList out;
  for (std::size_t i = 0; i < keep; ++i) {
    out.items.push_back(item_ids[order[i]]);
    out.scores.push_back(scores[order[i]]);
  }
  return out;
}

std::size_t rank_of(std::span<const double> scores, std::size_t target) {
  if (target >= scores.size()) throw DataError("rank_of: target out of range");
  const double t = scores[target];
  std::size_t rank = 1;
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (scores[j] > t || (scores[j] == t && j < target)) ++rank;
  return rank;
}

}  // namespace prerec::inference
