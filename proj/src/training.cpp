#include "prerec/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <tuple>

#include "prerec/error.hpp"

namespace prerec::training {

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("Adam eps must be positive");
  if (!(k_pct > 0.0) || k_pct > 100.0) throw ConfigError("K% must lie in (0, 100]");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},     {"batch_size", c.batch_size}, {"max_epochs", c.max_epochs},
          {"patience", c.patience}, {"weight_decay", c.weight_decay}, {"beta1", c.beta1},
          {"beta2", c.beta2}, {"eps", c.eps},                 {"seed", c.seed},
          {"k_pct", c.k_pct}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.seed = j.value("seed", c.seed);
    c.k_pct = j.value("k_pct", c.k_pct);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

Adam::Adam(const TrainConfig& config)
    : lr_(config.lr), beta1_(config.beta1), beta2_(config.beta2), eps_(config.eps), weight_decay_(config.weight_decay) {}

void Adam::step(const std::vector<ag::Param*>& params) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (ag::Param* p : params) {
    Moments& s = state_[p->name];
    if (s.m.rows != p->value.rows || s.m.cols != p->value.cols) {
      // Latent tables grow when domains are added; keep the existing rows.
      if (s.m.cols == p->value.cols && s.m.rows < p->value.rows && !s.m.empty()) {
        s.m.data.resize(p->value.size(), 0.0);
        s.v.data.resize(p->value.size(), 0.0);
        s.m.rows = s.v.rows = p->value.rows;
      } else {
        s.m = Matrix(p->value.rows, p->value.cols);
        s.v = Matrix(p->value.rows, p->value.cols);
      }
    }
    const double wd = p->decay ? weight_decay_ : 0.0;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad.data[i] + wd * p->value.data[i];
      s.m.data[i] = beta1_ * s.m.data[i] + (1.0 - beta1_) * g;
      s.v.data[i] = beta2_ * s.v.data[i] + (1.0 - beta2_) * g * g;
      p->value.data[i] -= lr_ * (s.m.data[i] / c1) / (std::sqrt(s.v.data[i] / c2) + eps_);
    }
  }
}

std::vector<std::size_t> sample_negatives(std::size_t item_count, std::size_t positive, std::size_t n,
                                          std::mt19937_64& rng) {
  if (n == 0) return {};
  if (positive >= item_count) throw DataError("positive item outside the domain");
  if (item_count < 2) throw DataError("negative sampling needs a domain with at least 2 items");
  std::uniform_int_distribution<std::size_t> pick(0, item_count - 2);
  std::vector<std::size_t> out(n);
  for (std::size_t& x : out) {
    x = pick(rng);
    if (x >= positive) ++x;
  }
  return out;
}

std::vector<std::string> sample_negatives(const corpus::DomainData& domain, const std::string& positive, std::size_t n,
                                          std::mt19937_64& rng) {
  auto it = domain.item_index.find(positive);
  if (it == domain.item_index.end()) throw DataError("item " + positive + " is not in domain " + domain.domain_id);
  std::vector<std::string> out;
  for (std::size_t j : sample_negatives(domain.item_count(), it->second, n, rng)) out.push_back(domain.item_ids[j]);
  return out;
}

nlohmann::json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_r_ndcg", e.val_r_ndcg}, {"wallclock_s", e.wallclock_s}};
}

EpochLog epoch_log_from_json(const nlohmann::json& j) {
  EpochLog e;
  e.epoch = j.at("epoch").get<std::size_t>();
  e.train_loss = j.at("train_loss").get<double>();
  e.val_r_ndcg = j.at("val_r_ndcg").get<double>();
  e.wallclock_s = j.at("wallclock_s").get<double>();
  return e;
}

namespace {

// A run of one user's sequence fed to the encoder in one piece. History is
// items[begin, begin + len); targets are absolute positions.
struct Unit {
  std::size_t domain = 0;
  std::size_t user = 0;
  std::size_t begin = 0;
  std::size_t len = 0;
  std::vector<std::size_t> targets;
};

struct Source {
  const inference::PreparedDomain* data = nullptr;
  model::DomainView view;
};

// Windows of at most max_len history items. The first window also predicts
// position 0 from the prefix alone.
void add_user_units(std::vector<Unit>& out, std::size_t d, std::size_t u, const std::vector<std::size_t>& positions,
                    std::size_t max_len) {
  std::map<std::size_t, Unit> windows;
  for (std::size_t p : positions) {
    const std::size_t w = p == 0 ? 0 : (p - 1) / max_len;
    Unit& unit = windows[w];
    unit.domain = d;
    unit.user = u;
    unit.begin = w * max_len;
    unit.targets.push_back(p);
  }
  for (auto& [w, unit] : windows) {
    unit.len = unit.targets.back() - unit.begin;
    out.push_back(std::move(unit));
  }
}

std::vector<Unit> all_units(const std::vector<Source>& sources, std::size_t max_len) {
  std::vector<Unit> out;
  for (std::size_t d = 0; d < sources.size(); ++d) {
    const auto& users = sources[d].data->train.users;
    for (std::size_t u = 0; u < users.size(); ++u) {
      std::vector<std::size_t> pos(users[u].items.size());
      std::iota(pos.begin(), pos.end(), 0);
      add_user_units(out, d, u, pos, max_len);
    }
  }
  return out;
}

// Chronologically first `limit` events of one domain, ties by user then position.
std::vector<Unit> limited_units(const Source& source, std::size_t limit, std::size_t max_len) {
  const auto& users = source.data->train.users;
  std::vector<std::tuple<std::int64_t, std::size_t, std::size_t>> events;
  for (std::size_t u = 0; u < users.size(); ++u)
    for (std::size_t p = 0; p < users[u].items.size(); ++p) events.emplace_back(users[u].timestamps[p], u, p);
  if (limit > events.size()) {
    throw ConfigError("requested " + std::to_string(limit) + " training events but domain " + source.data->id +
                      " has " + std::to_string(events.size()));
  }
  std::sort(events.begin(), events.end());
  std::map<std::size_t, std::vector<std::size_t>> per_user;
  for (std::size_t i = 0; i < limit; ++i) per_user[std::get<1>(events[i])].push_back(std::get<2>(events[i]));
  std::vector<Unit> out;
  for (auto& [u, pos] : per_user) {
    std::sort(pos.begin(), pos.end());
    add_user_units(out, 0, u, pos, max_len);
  }
  return out;
}

// One pass over `units` in `order`. Without an optimizer the pass only
// measures the loss. Returns the loss per event.
double run_epoch(model::Model& model, Adam* opt, const std::vector<Source>& sources, const std::vector<Unit>& units,
                 const std::vector<std::size_t>& order, std::size_t batch_size, std::mt19937_64& rng) {
  const model::ModelConfig& cfg = model.config();
  double total = 0.0;
  std::size_t events = 0;
  std::size_t next = 0;
  const std::vector<ag::Param*> params = model.parameters();
  while (next < order.size()) {
    model::Batch batch;
    std::vector<std::vector<std::size_t>> histories;
    std::vector<const Unit*> picked;
    std::size_t count = 0;
    while (next < order.size() && (count == 0 || count < batch_size)) {
      const Unit& u = units[order[next++]];
      picked.push_back(&u);
      count += u.targets.size();
    }
    histories.reserve(picked.size());
    for (const Unit* u : picked) {
      const auto& seq = sources[u->domain].data->train.users[u->user];
      histories.emplace_back(seq.items.begin() + static_cast<std::ptrdiff_t>(u->begin),
                             seq.items.begin() + static_cast<std::ptrdiff_t>(u->begin + u->len));
    }
    for (std::size_t i = 0; i < picked.size(); ++i) {
      const Unit& u = *picked[i];
      const Source& src = sources[u.domain];
      const auto& seq = src.data->train.users[u.user];
      std::optional<std::size_t> user;
      if (cfg.user_offsets) user = u.user;
      batch.sequences.push_back(model::SequenceInput{&src.view, histories[i], user});
      for (std::size_t p : u.targets) {
        model::TrainingEvent e;
        e.sequence = i;
        e.position = p - u.begin;
        e.interval = src.data->interval_of(seq.timestamps[p]);
        e.candidates.push_back(seq.items[p]);
        for (std::size_t j : sample_negatives(src.data->item_count(), seq.items[p], cfg.negatives, rng))
          e.candidates.push_back(j);
        batch.events.push_back(std::move(e));
      }
    }
    ag::Tape tape(opt != nullptr);
    model::LossParts parts = model::map_loss(model, tape, batch);
    total += parts.total.scalar();
    events += batch.events.size();
    if (opt) {
      tape.backward(parts.total);
      for (const ag::Param* p : params)
        if (!p->grad.all_finite()) throw NumericalError("non-finite gradient in " + p->name);
      opt->step(params);
      model.zero_grad();
    }
  }
  return events ? total / static_cast<double>(events) : 0.0;
}

evaluation::MetricConfig metric_for(const TrainConfig& t) {
  evaluation::MetricConfig m;
  m.k_pct = t.k_pct;
  return m;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// Shared epoch loop with early stopping. `ckpt` holds the initial model and
// optimizer; on return it holds the best ones.
void fit(Checkpoint& ckpt, const std::vector<Source>& sources, const std::vector<Unit>& units,
         const std::vector<const inference::PreparedDomain*>& val_domains, const TrainConfig& train,
         bool evaluate_initial, const EpochCallback& on_epoch) {
  std::mt19937_64 rng(train.seed);
  const evaluation::MetricConfig metric = metric_for(train);
  const auto start = std::chrono::steady_clock::now();
  model::Model current = ckpt.model;
  Adam opt = ckpt.optimizer;
  bool have_best = false;
  std::size_t since_best = 0;

  auto record = [&](std::size_t epoch, double loss) {
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss;
    log.val_r_ndcg = validation_metric(current, val_domains, metric);
    log.wallclock_s = seconds_since(start);
    ckpt.history.push_back(log);
    if (on_epoch) on_epoch(log);
    if (!have_best || log.val_r_ndcg > ckpt.best_metric) {
      have_best = true;
      ckpt.best_metric = log.val_r_ndcg;
      ckpt.epoch = epoch;
      ckpt.model = current;
      ckpt.optimizer = opt;
      since_best = 0;
    } else {
      ++since_best;
    }
  };

  std::vector<std::size_t> order(units.size());
  std::iota(order.begin(), order.end(), 0);
  try {
    if (evaluate_initial) {
      std::mt19937_64 probe(train.seed ^ 0x5EEDULL);
      record(0, units.empty() ? 0.0 : run_epoch(current, nullptr, sources, units, order, train.batch_size, probe));
    }
    if (units.empty()) return;
    for (std::size_t epoch = 1; epoch <= train.max_epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      const double loss = run_epoch(current, &opt, sources, units, order, train.batch_size, rng);
      record(epoch, loss);
      if (since_best >= train.patience) break;
    }
  } catch (const NumericalError& e) {
    ckpt.aborted = e.what();
    if (!have_best) throw;
  }
}

}  // namespace

double validation_metric(model::Model& model, const std::vector<const inference::PreparedDomain*>& domains,
                         const evaluation::MetricConfig& metric) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const inference::PreparedDomain* d : domains) {
    if (d->validation.event_count(1) == 0) continue;
    inference::ModelRanker ranker(model, model::Mode::kLearned);
    sum += evaluation::evaluate_split(ranker, *d, d->validation, metric).r_ndcg;
    ++n;
  }
  if (n == 0) throw DataError("no validation events to early-stop on");
  return sum / static_cast<double>(n);
}

std::size_t training_event_count(const inference::PreparedDomain& domain) { return domain.train.event_count(0); }

Checkpoint pretrain(const std::vector<const inference::PreparedDomain*>& sources, const model::ModelConfig& config,
                    const TrainConfig& train, const EpochCallback& on_epoch) {
  train.validate();
  if (sources.empty()) throw ConfigError("pre-training needs at least one source domain");
  Checkpoint ckpt(config);
  ckpt.train = train;
  ckpt.optimizer = Adam(train);
  std::vector<Source> srcs;
  for (const inference::PreparedDomain* d : sources) {
    if (d->content().cols != config.input_dim) {
      throw DataError("domain " + d->id + " content width " + std::to_string(d->content().cols) +
                      " differs from model input_dim " + std::to_string(config.input_dim));
    }
    ckpt.model.add_domain(d->id, d->item_count(), d->factors.size(), d->train.users.size());
  }
  for (std::size_t i = 0; i < sources.size(); ++i)
    srcs.push_back(Source{sources[i], sources[i]->view(i)});
  const std::vector<Unit> units = all_units(srcs, config.max_len);
  if (units.empty()) throw DataError("source domains have no training events");
  fit(ckpt, srcs, units, sources, train, false, on_epoch);
  return ckpt;
}

Checkpoint finetune(const Checkpoint& base, const inference::PreparedDomain& target, const TrainConfig& train,
                    std::optional<std::size_t> limit, const EpochCallback& on_epoch) {
  train.validate();
  Checkpoint ckpt = base;
  ckpt.train = train;
  ckpt.history.clear();
  ckpt.aborted.reset();
  ckpt.best_metric = 0.0;
  ckpt.epoch = 0;
  ckpt.optimizer = Adam(train);
  if (target.content().cols != ckpt.model.config().input_dim)
    throw DataError("target content width differs from the checkpoint's input_dim");
  const std::size_t slot =
      ckpt.model.add_domain(target.id, target.item_count(), target.factors.size(), target.train.users.size());
  std::vector<Source> srcs{Source{&target, target.view(slot)}};
  const std::size_t max_len = ckpt.model.config().max_len;
  const std::vector<Unit> units = limit ? limited_units(srcs[0], *limit, max_len) : all_units(srcs, max_len);
  fit(ckpt, srcs, units, {&target}, train, true, on_epoch);
  return ckpt;
}

std::vector<IncrementalPoint> incremental_schedule(const Checkpoint& base, const inference::PreparedDomain& target,
                                                   const std::vector<std::size_t>& sizes, const TrainConfig& train,
                                                   const evaluation::MetricConfig& metric) {
  if (sizes.empty()) throw ConfigError("incremental schedule needs at least one size");
  for (std::size_t i = 1; i < sizes.size(); ++i) {
    if (sizes[i] == sizes[i - 1]) throw ConfigError("duplicate incremental size " + std::to_string(sizes[i]));
    if (sizes[i] < sizes[i - 1]) throw ConfigError("incremental sizes must be ascending");
  }
  const std::size_t available = training_event_count(target);
  if (sizes.back() > available) {
    throw ConfigError("incremental size " + std::to_string(sizes.back()) + " exceeds the " +
                      std::to_string(available) + " available training events");
  }
  std::vector<IncrementalPoint> out;
  for (std::size_t size : sizes) {
    Checkpoint tuned = finetune(base, target, train, size);
    inference::ModelRanker ranker(tuned.model, model::Mode::kLearned);
    out.push_back({size, evaluation::evaluate(ranker, target, evaluation::TestType::kAll, metric)});
  }
  return out;
}

}  // namespace prerec::training
