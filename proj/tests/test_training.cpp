#include <doctest.h>

#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <sstream>

#include "bench.hpp"
#include "model_fixture.hpp"
#include "prerec/error.hpp"
#include "prerec/training.hpp"
#include "temp_dir.hpp"

using namespace prerec;
using namespace prerec::training;

namespace {

corpus::SynthConfig synth(std::size_t domains, std::size_t items, std::size_t users) {
  corpus::SynthConfig c;
  c.num_domains = domains;
  c.items_per_domain = items;
  c.users_per_domain = users;
  c.content_dim = 8;
  c.num_intervals = 4;
  c.domain_bias_scale = 1.0;
  c.popularity_scale = 1.0;
  return c;
}

model::ModelConfig small_model(std::uint64_t seed) {
  model::ModelConfig c;
  c.input_dim = 8;
  c.dim = 8;
  c.heads = 2;
  c.layers = 1;
  c.max_len = 6;
  c.ffn_mult = 2;
  c.negatives = 7;
  c.init_std = 0.05;
  c.seed = seed;
  return c;
}

TrainConfig quick_train(std::size_t epochs, double lr = 3e-3) {
  TrainConfig t;
  t.lr = lr;
  t.batch_size = 64;
  t.max_epochs = epochs;
  t.patience = 100;
  t.seed = 3;
  t.k_pct = 5.0;
  return t;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i] / n, my += y[i] / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace

TEST_CASE("negative sampling") {
  std::mt19937_64 rng(1);
  CHECK(sample_negatives(2, 0, 3, rng) == std::vector<std::size_t>{1, 1, 1});
  CHECK(sample_negatives(2, 1, 2, rng) == std::vector<std::size_t>{0, 0});
  CHECK(sample_negatives(10, 3, 0, rng).empty());
  CHECK_THROWS_AS(sample_negatives(1, 0, 1, rng), DataError);

  corpus::DomainData d;
  d.domain_id = "x";
  d.item_ids = {"a", "b"};
  d.item_index = {{"a", 0}, {"b", 1}};
  CHECK(sample_negatives(d, "a", 3, rng) == std::vector<std::string>{"b", "b", "b"});
  CHECK(sample_negatives(d, "a", 0, rng).empty());
  CHECK_THROWS_AS(sample_negatives(d, "zz", 1, rng), DataError);

  SUBCASE("uniform over the rest of the domain") {
    const std::size_t n = 10000, pos = 1234, per = 255, trials = 10000;
    std::vector<double> freq(n, 0.0);
    for (std::size_t t = 0; t < trials; ++t)
      for (std::size_t j : sample_negatives(n, pos, per, rng)) freq[j] += 1.0;
    CHECK(freq[pos] == 0.0);
    const double draws = static_cast<double>(per * trials);
    const double p = 1.0 / static_cast<double>(n - 1);
    const double mean = draws * p;
    const double sd = std::sqrt(draws * p * (1.0 - p));
    double chi2 = 0.0;
    std::size_t outside = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == pos) continue;
      chi2 += (freq[j] - mean) * (freq[j] - mean) / mean;
      if (std::abs(freq[j] - mean) > 3.0 * sd) ++outside;
    }
    const double df = static_cast<double>(n - 2);
    CHECK(std::abs(chi2 - df) < 3.0 * std::sqrt(2.0 * df));
    // Binomial tails beyond 3 sigma hold about 0.27% of items.
    CHECK(outside < 60);
  }
}

TEST_CASE("Adam step") {
  TrainConfig cfg;
  cfg.lr = 0.05;
  cfg.weight_decay = 0.2;
  Adam opt(cfg);
  ag::Param a("a", Matrix(1, 2, std::vector<double>{1.0, -2.0}), true);
  ag::Param b("b", Matrix(1, 1, std::vector<double>{0.5}), false);
  const std::vector<std::vector<double>> grads{{0.3, -0.1, 0.7}, {-0.2, 0.4, 0.1}, {0.05, 0.05, -0.6}};
  double m[3] = {0, 0, 0}, v[3] = {0, 0, 0};
  double x[3] = {1.0, -2.0, 0.5};
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    a.grad.data = {grads[t - 1][0], grads[t - 1][1]};
    b.grad.data = {grads[t - 1][2]};
    opt.step({&a, &b});
    for (int i = 0; i < 3; ++i) {
      const double g = grads[t - 1][i] + (i < 2 ? 0.2 * x[i] : 0.0);
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, t));
      const double vh = v[i] / (1 - std::pow(0.999, t));
      x[i] -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  CHECK(a.value.data[0] == doctest::Approx(x[0]).epsilon(1e-14));
  CHECK(a.value.data[1] == doctest::Approx(x[1]).epsilon(1e-14));
  CHECK(b.value.data[0] == doctest::Approx(x[2]).epsilon(1e-14));
  CHECK(opt.steps() == 3);
}

TEST_CASE("train config") {
  TrainConfig c;
  CHECK(c.lr == 3e-4);
  CHECK(c.batch_size == 256);
  CHECK(c.max_epochs == 30);
  c.lr = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  TrainConfig d;
  d.seed = 77;
  d.k_pct = 0.5;
  TrainConfig back = train_config_from_json(to_json(d));
  CHECK(back.seed == 77);
  CHECK(back.k_pct == 0.5);
}

TEST_CASE("pre-training smoke run") {
  auto w = bench::make_world(synth(1, 40, 50), 2);
  model::ModelConfig mc = small_model(1);
  mc.lambda_v = mc.lambda_d = mc.lambda_u = mc.lambda_z = 0.0;
  mc.negatives = model::ModelConfig{}.negatives;
  TrainConfig tc;
  tc.max_epochs = 3;
  tc.patience = 10;
  tc.batch_size = 32;
  tc.k_pct = 5.0;
  Checkpoint c = pretrain({w->domains[0].get()}, mc, tc);
  REQUIRE(c.history.size() == 3);
  CHECK(c.history[1].train_loss < c.history[0].train_loss);
  CHECK(c.history[2].train_loss < c.history[1].train_loss);
}

TEST_CASE("early stopping and determinism") {
  auto w = bench::make_world(synth(2, 30, 60), 3);
  const auto sources = std::vector<const inference::PreparedDomain*>{w->domains[0].get(), w->domains[1].get()};

  SUBCASE("patience 0 runs one epoch") {
    TrainConfig t = quick_train(10);
    t.patience = 0;
    Checkpoint c = pretrain(sources, small_model(2), t);
    CHECK(c.history.size() == 1);
    CHECK(c.epoch == 1);
  }
  SUBCASE("best epoch is the logged maximum") {
    TrainConfig t = quick_train(6, 1e-2);
    t.patience = 2;
    Checkpoint c = pretrain(sources, small_model(2), t);
    std::size_t best = 0;
    for (std::size_t i = 0; i < c.history.size(); ++i)
      if (c.history[i].val_r_ndcg > c.history[best].val_r_ndcg) best = i;
    CHECK(c.epoch == c.history[best].epoch);
    CHECK(c.best_metric == c.history[best].val_r_ndcg);
    evaluation::MetricConfig m;
    m.k_pct = t.k_pct;
    CHECK(validation_metric(c.model, sources, m) == c.best_metric);
    if (c.history.size() < t.max_epochs) CHECK(c.history.size() - 1 - best == t.patience);
  }
  SUBCASE("same seed, same run") {
    Checkpoint a = pretrain(sources, small_model(5), quick_train(3));
    Checkpoint b = pretrain(sources, small_model(5), quick_train(3));
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
      CHECK(a.history[i].train_loss == b.history[i].train_loss);
      CHECK(a.history[i].val_r_ndcg == b.history[i].val_r_ndcg);
    }
    for (const ag::Param* p : a.model.parameters()) CHECK(p->value.data == b.model.param(p->name).value.data);
  }
  SUBCASE("domain prior strength shrinks D") {
    auto norm_d = [&](double lambda) {
      model::ModelConfig mc = small_model(6);
      mc.lambda_d = lambda;
      Checkpoint c = pretrain(sources, mc, quick_train(3));
      double s = 0.0;
      for (double x : c.model.param("domain").value.data) s += x * x;
      return std::sqrt(s);
    };
    const double weak = norm_d(0.3);
    const double strong = norm_d(300.0);
    CHECK(weak > 0.0);
    CHECK(strong < weak);
  }
}

TEST_CASE("domain logit term has no within-domain gradient") {
  auto w = bench::make_world(synth(1, 30, 40), 4);
  const inference::PreparedDomain& d = *w->domains[0];
  model::Model m(small_model(3));
  m.add_domain(d.id, d.item_count(), d.factors.size(), d.train.users.size());
  testing::randomize(m, 8);
  const model::DomainView view = d.view(0);
  model::Batch batch;
  std::mt19937_64 rng(1);
  std::vector<std::vector<std::size_t>> hist;
  for (std::size_t u = 0; u < 10; ++u) hist.emplace_back(d.train.users[u].items.begin(), d.train.users[u].items.end() - 1);
  for (std::size_t u = 0; u < 10; ++u) {
    const auto& seq = d.train.users[u];
    if (hist[u].size() > m.config().max_len) hist[u].resize(m.config().max_len);
    batch.sequences.push_back({&view, hist[u], std::nullopt});
    for (std::size_t p = 0; p <= hist[u].size() && p < seq.items.size(); ++p) {
      model::TrainingEvent e{u, p, d.interval_of(seq.timestamps[p]), {seq.items[p]}};
      for (std::size_t j : sample_negatives(d.item_count(), seq.items[p], 7, rng)) e.candidates.push_back(j);
      batch.events.push_back(e);
    }
  }
  ag::Tape tape;
  model::LossParts loss = model::map_loss(m, tape, batch);
  tape.backward(loss.total);
  double wd = 0.0, wz = 0.0;
  for (double g : m.param("score.wd").grad.data) wd = std::max(wd, std::abs(g));
  for (double g : m.param("score.wz").grad.data) wz = std::max(wz, std::abs(g));
  CHECK(wz > 1e-3);
  CHECK(wd < 1e-12 * std::max(1.0, loss.nll));
}

TEST_CASE("fine-tuning") {
  auto w = bench::make_world(synth(3, 40, 80), 5);
  const auto sources = std::vector<const inference::PreparedDomain*>{w->domains[0].get(), w->domains[1].get()};
  const inference::PreparedDomain& target = *w->domains[2];
  Checkpoint base = pretrain(sources, small_model(4), quick_train(2));
  evaluation::MetricConfig metric;
  metric.k_pct = 5.0;

  SUBCASE("zero epochs equals zero-shot") {
    Checkpoint ft = finetune(base, target, quick_train(0));
    REQUIRE(ft.model.find_domain(target.id));
    CHECK(ft.history.size() == 1);
    CHECK(ft.epoch == 0);
    const auto events = inference::make_events(target, target.test, 1);
    inference::ModelRanker zero(base.model, model::Mode::kZeroShot);
    inference::ModelRanker tuned(ft.model, model::Mode::kLearned);
    const Matrix a = zero.score(target, target.test, events);
    const Matrix b = tuned.score(target, target.test, events);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.data[i] == doctest::Approx(b.data[i]).epsilon(1e-12));
    CHECK_THROWS_AS(finetune(ft, target, quick_train(0)), ConfigError);
  }
  SUBCASE("trains every parameter and keeps the source file intact") {
    testing::TempDir dir;
    save_checkpoint(base, dir.path() / "base.ckpt");
    const std::string before = file_bytes(dir.path() / "base.ckpt");
    Checkpoint loaded = load_checkpoint(dir.path() / "base.ckpt");
    Checkpoint ft = finetune(loaded, target, quick_train(2));
    CHECK(file_bytes(dir.path() / "base.ckpt") == before);
    CHECK(ft.history.size() == 3);
    if (ft.epoch > 0) CHECK(ft.model.param("enc0.wq").value.data != base.model.param("enc0.wq").value.data);
    CHECK(ft.best_metric >= ft.history[0].val_r_ndcg);
  }
  SUBCASE("incremental schedule") {
    const std::size_t avail = training_event_count(target);
    auto curve = incremental_schedule(base, target, {0}, quick_train(2), metric);
    REQUIRE(curve.size() == 1);
    inference::ModelRanker zero(base.model, model::Mode::kZeroShot);
    const auto zs = evaluation::evaluate(zero, target, evaluation::TestType::kAll, metric);
    CHECK(curve[0].result.r_ndcg == doctest::Approx(zs.r_ndcg).epsilon(1e-12));
    CHECK(curve[0].result.recall == doctest::Approx(zs.recall).epsilon(1e-12));
    CHECK_THROWS_AS(incremental_schedule(base, target, {10, 10}, quick_train(1), metric), ConfigError);
    CHECK_THROWS_AS(incremental_schedule(base, target, {20, 10}, quick_train(1), metric), ConfigError);
    CHECK_THROWS_AS(incremental_schedule(base, target, {avail + 1}, quick_train(1), metric), ConfigError);
    CHECK_THROWS_AS(incremental_schedule(base, target, {}, quick_train(1), metric), ConfigError);
    auto two = incremental_schedule(base, target, {5, avail}, quick_train(1), metric);
    CHECK(two.size() == 2);
  }
}

TEST_CASE("checkpoint persistence") {
  auto w = bench::make_world(synth(2, 30, 50), 6);
  const auto sources = std::vector<const inference::PreparedDomain*>{w->domains[0].get(), w->domains[1].get()};
  model::ModelConfig mc = small_model(9);
  mc.z_offsets = true;
  mc.user_offsets = true;
  mc.lambda_u = 1.0;
  Checkpoint c = pretrain(sources, mc, quick_train(2));
  testing::TempDir dir;
  const auto path = dir.path() / "run" / "model.ckpt";
  save_checkpoint(c, path);
  Checkpoint back = load_checkpoint(path);

  CHECK(back.epoch == c.epoch);
  CHECK(back.best_metric == c.best_metric);
  CHECK(back.history.size() == c.history.size());
  CHECK(back.optimizer.steps() == c.optimizer.steps());
  CHECK(back.optimizer.state().size() == c.optimizer.state().size());
  for (const auto& [name, mom] : c.optimizer.state()) CHECK(back.optimizer.state().at(name).v.data == mom.v.data);
  CHECK(checkpoint_fingerprint(back) == checkpoint_fingerprint(c));
  for (const ag::Param* p : c.model.parameters()) {
    CHECK(back.model.param(p->name).value.data == p->value.data);
    CHECK(back.model.param(p->name).decay == p->decay);
  }
  for (const inference::PreparedDomain* d : sources) {
    const auto events = inference::make_events(*d, d->test, 1);
    for (model::Mode mode : {model::Mode::kLearned, model::Mode::kZeroShot}) {
      inference::ModelRanker x(c.model, mode), y(back.model, mode);
      const Matrix a = x.score(*d, d->test, events);
      const Matrix b = y.score(*d, d->test, events);
      for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a.data[i] - b.data[i]) <= 1e-7);
    }
  }

  SUBCASE("bad files") {
    std::string bytes = file_bytes(path);
    CHECK_THROWS_AS(load_checkpoint(dir.write("junk.ckpt", "hello")), DataError);
    CHECK_THROWS_AS(load_checkpoint(dir.path() / "missing.ckpt"), DataError);
    std::string v2 = bytes;
    v2[8] = 2;
    CHECK_THROWS_AS(load_checkpoint(dir.write("v2.ckpt", v2)), ConfigError);
    CHECK_THROWS_AS(load_checkpoint(dir.write("short.ckpt", bytes.substr(0, bytes.size() - 8))), DataError);
  }
}

TEST_CASE("fine-tuning recovers the planted domain direction") {
  // D.W_d cannot be identified within a domain, so the check uses the item-level
  // trace of the planted domain vector: the learned shift of each item's logit.
  corpus::SynthConfig sc = synth(2, 60, 500);
  sc.domain_bias_scale = 1.5;
  sc.popularity_scale = 0.0;
  auto w = bench::make_world(sc, 7);
  const inference::PreparedDomain& target = *w->domains[1];
  Checkpoint base = pretrain({w->domains[0].get()}, small_model(7), quick_train(4));
  TrainConfig t = quick_train(8);
  t.patience = 3;
  Checkpoint ft = finetune(base, target, t);
  REQUIRE(ft.epoch > 0);

  const auto events = inference::make_events(target, target.test, 1);
  inference::ModelRanker zero(base.model, model::Mode::kZeroShot);
  inference::ModelRanker tuned(ft.model, model::Mode::kLearned);
  const Matrix a = zero.score(target, target.test, events);
  const Matrix b = tuned.score(target, target.test, events);
  const std::size_t n = target.item_count();
  std::vector<double> shift(n, 0.0);
  for (std::size_t e = 0; e < events.size(); ++e) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += (b(e, j) - a(e, j)) / n;
    for (std::size_t j = 0; j < n; ++j) shift[j] += b(e, j) - a(e, j) - mean;
  }
  const auto& dvec = w->syn.truth.domain_vectors[1];
  std::vector<double> planted(n);
  for (std::size_t j = 0; j < n; ++j) {
    const auto m = w->lookup->vector_for(target.item_ids()[j]);
    double s = 0.0;
    for (std::size_t c = 0; c < m.size(); ++c) s += m[c] * dvec[c];
    planted[j] = s;
  }
  const double r = pearson(shift, planted);
  MESSAGE("pearson r = " << r);
  CHECK(r > 0.5);
}
