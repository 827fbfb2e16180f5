// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "bench.hpp"
#include "gradcheck.hpp"
#include "model_fixture.hpp"
#include "prerec/corpus.hpp"
#include "prerec/evaluation.hpp"
#include "prerec/inference.hpp"
#include "prerec/model.hpp"
#include "prerec/popularity.hpp"
#include "prerec/training.hpp"

using namespace prerec;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome random_anchor() {
  const auto t0 = std::chrono::steady_clock::now();
  constexpr std::size_t kItems = 10000;
  constexpr std::size_t kUsers = 10000;
  constexpr std::size_t kLen = 11;  // ten test events per user
  inference::PreparedDomain d;
  d.id = "random-domain";
  for (std::size_t j = 0; j < kItems; ++j) d.train.item_ids.push_back(corpus::item_name(0, j));
  for (std::size_t j = 0; j < kItems; ++j) d.train.item_index[d.train.item_ids[j]] = j;
  d.train.content = Matrix(kItems, 1);
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> item(0, kItems - 1);
  d.test.item_ids = d.train.item_ids;
  for (std::size_t u = 0; u < kUsers; ++u) {
    corpus::IndexedSequence s;
    s.user_id = corpus::user_name(0, u);
    for (std::size_t p = 0; p < kLen; ++p) {
      s.items.push_back(item(rng));
      s.timestamps.push_back(static_cast<std::int64_t>(p));
    }
    d.test.users.push_back(std::move(s));
  }
  evaluation::MetricConfig cfg;  // a = 2, b = 15000, K = 0.04%
  evaluation::RandomRanker ranker(7);
  const evaluation::DomainResult r = evaluation::evaluate_split(ranker, d, d.test, cfg);
  const double t = seconds_since(t0);
  const bool ok = r.events >= 100000 && std::abs(r.recall - 0.0004) <= 0.0001 && std::abs(r.r_ndcg - 0.0002) <= 0.0001 &&
                  t < 120.0;
  return {ok, fmt("N=%zu events=%zu recall=%.6f r_ndcg=%.6f time=%.1fs", kItems, r.events, r.recall, r.r_ndcg, t)};
}

// ---------------------------------------------------------------------------

Outcome backdoor_exactness() {
  const auto t0 = std::chrono::steady_clock::now();
  constexpr std::size_t kItems = 20;
  model::ModelConfig c = testing::toy_config(6, 3);
  c.lambda_d = 0.3;
  model::Model m(c);
  testing::randomize(m, 4);
  testing::ToyDomain dom(kItems, 6, 4, 5);
  const std::vector<std::size_t> hist{3, 11, 7, 0};
  const std::int64_t interval = 2;

  // Library zero-shot probabilities for the next item.
  model::SequenceInput seq{&dom.view, hist, std::nullopt};
  const model::EventQuery q{0, hist.size(), interval};
  const Matrix lib_logits = model::score_catalog(m, dom.view, std::span(&seq, 1), std::span(&q, 1),
                                                 model::Mode::kZeroShot);
  const std::vector<double> lib = model::softmax(lib_logits.row_span(0));

  // Manual logits U.V_j + Z_j.W_z + D.W_d with D drawn from its prior.
  ag::Tape tape(false);
  const model::Encoded enc = model::encode_users(m, tape, std::span(&seq, 1), model::Mode::kZeroShot);
  const auto u = enc.out.value().row_span(hist.size());
  std::vector<model::CandidateRef> refs;
  for (std::size_t j = 0; j < kItems; ++j) refs.push_back({&dom.view, j, interval});
  const model::Candidates cand = model::candidate_latents(m, tape, refs, model::Mode::kZeroShot);
  std::vector<double> base(kItems);
  for (std::size_t j = 0; j < kItems; ++j) {
    double s = cand.bias.value().data[j];
    for (std::size_t b = 0; b < u.size(); ++b) s += u[b] * cand.v.value()(j, b);
    base[j] = s;
  }
  const Matrix& wd = m.param("score.wd").value;
  std::mt19937_64 rng(99);
  std::normal_distribution<double> prior(0.0, 1.0 / std::sqrt(c.lambda_d));
  constexpr int kDraws = 100000;
  std::vector<double> avg(kItems, 0.0);
  std::vector<double> logits(kItems);
  for (int t = 0; t < kDraws; ++t) {
    double shift = 0.0;
    for (double w : wd.data) shift += prior(rng) * w;
    for (std::size_t j = 0; j < kItems; ++j) logits[j] = base[j] + shift;
    const std::vector<double> p = model::softmax(logits);
    for (std::size_t j = 0; j < kItems; ++j) avg[j] += p[j];
  }
  double worst = 0.0;
  for (std::size_t j = 0; j < kItems; ++j) worst = std::max(worst, std::abs(avg[j] / kDraws - lib[j]));
  const double t = seconds_since(t0);
  return {worst <= 1e-9 && t < 60.0, fmt("draws=%d max|diff|=%.3g time=%.1fs", kDraws, worst, t)};
}

// ---------------------------------------------------------------------------

Outcome metric_identities() {
  double worst_ndcg = 0.0;
  double worst_double = 0.0;
  bool first_exact = true;
  for (std::size_t n : {10u, 20u, 100u, 4223u, 15000u}) {
    evaluation::MetricConfig std_cfg{2.0, static_cast<double>(n), 100.0};
    for (std::size_t rank = 1; rank <= 10; ++rank) {
      const double expect = 1.0 / std::log2(1.0 + static_cast<double>(rank));
      worst_ndcg = std::max(worst_ndcg, std::abs(evaluation::r_ndcg(rank, n, std_cfg) - expect));
    }
  }
  const evaluation::MetricConfig def;
  for (std::size_t n : {1u, 7u, 400u, 10000u, 1000000u}) {
    first_exact = first_exact && evaluation::r_ndcg(1, n, def) == 1.0;
    for (std::size_t rank = 1; rank <= std::min<std::size_t>(n, 50); ++rank)
      worst_double =
          std::max(worst_double, std::abs(evaluation::r_ndcg(rank, n, def) - evaluation::r_ndcg(2 * rank - 1, 2 * n, def)));
  }
  const bool ok = first_exact && worst_ndcg <= 1e-12 && worst_double <= 1e-12;
  return {ok, fmt("r_ndcg(1)=1 exact:%s max|ndcg diff|=%.3g max|doubling diff|=%.3g", first_exact ? "yes" : "no",
                  worst_ndcg, worst_double)};
}

// ---------------------------------------------------------------------------

model::Batch toy_batch(std::vector<const model::DomainView*> domains, std::vector<std::vector<std::size_t>>& histories,
                       std::size_t users, std::size_t candidates, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  histories.assign(users, {});
  model::Batch batch;
  for (std::size_t u = 0; u < users; ++u) {
    const model::DomainView* d = domains[u % domains.size()];
    std::uniform_int_distribution<std::size_t> item(0, d->item_count() - 1);
    for (std::size_t k = 0; k < 1 + u % 4; ++k) histories[u].push_back(item(rng));
  }
  for (std::size_t u = 0; u < users; ++u) {
    const model::DomainView* d = domains[u % domains.size()];
    std::uniform_int_distribution<std::size_t> item(0, d->item_count() - 1);
    batch.sequences.push_back({d, histories[u], u / domains.size()});
    for (std::size_t pos = 0; pos <= histories[u].size(); ++pos) {
      model::TrainingEvent e;
      e.sequence = u;
      e.position = pos;
      e.interval = static_cast<std::int64_t>((pos + u) % 3);
      for (std::size_t k = 0; k < candidates; ++k) e.candidates.push_back(item(rng));
      batch.events.push_back(std::move(e));
    }
  }
  return batch;
}

Outcome gradient_check() {
  std::size_t instances = 0, checked = 0, failed = 0;
  double worst = 0.0;
  std::set<std::string> covered;
  for (std::uint64_t seed = 0; seed < 24; ++seed) {
    model::ModelConfig c = testing::toy_config(4, 100 + seed);
    c.z_offsets = seed % 2 == 0;
    c.user_offsets = (seed / 2) % 2 == 0;
    c.item_offsets = seed % 6 != 5;
    c.encoder = seed % 3 == 2 ? model::EncoderKind::kGru : model::EncoderKind::kTransformer;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> lam(0.2, 2.0);
    c.lambda_u = c.user_offsets ? lam(rng) : 0.0;
    c.lambda_v = lam(rng);
    c.lambda_z = lam(rng);
    c.lambda_d = lam(rng);
    model::Model m(c);
    testing::ToyDomain a(6, 4, 3, 300 + seed, m.add_domain("a", 6, 3, 3));
    testing::ToyDomain b(5, 4, 3, 400 + seed, m.add_domain("b", 5, 3, 3));
    testing::randomize(m, 500 + seed);
    std::vector<std::vector<std::size_t>> hist;
    const model::Batch batch = toy_batch({&a.view, &b.view}, hist, 5, 3, 600 + seed);
    {
      ag::Tape t(false);
      const model::LossParts parts = model::map_loss(m, t, batch);
      if (parts.reg_v > 0.0) covered.insert("lambda_v");
      if (parts.reg_z > 0.0) covered.insert("lambda_z");
      if (parts.reg_u > 0.0) covered.insert("lambda_u");
      if (parts.reg_d > 0.0) covered.insert("lambda_d");
    }
    covered.insert(c.z_offsets ? "z_offsets" : "no_z_offsets");
    covered.insert(c.item_offsets ? "item_offsets" : "no_item_offsets");
    const auto r = testing::grad_check(
        m.parameters(), [&](ag::Tape& t) { return model::map_loss(m, t, batch).total; }, 4, 700 + seed);
    ++instances;
    checked += r.checked;
    worst = std::max(worst, r.max_rel_error);
    if (!(r.max_rel_error < 1e-4)) ++failed;
  }
  const bool ok = failed == 0 && instances >= 20 && covered.size() == 8;
  return {ok, fmt("instances=%zu coordinates=%zu max rel err=%.3g terms/modes covered=%zu/8", instances, checked, worst,
                  covered.size())};
}

// ---------------------------------------------------------------------------

Outcome popularity_transfer() {
  // Two domains, the second with counts scaled by 7 in every interval.
  std::vector<corpus::Interaction> rows;
  const std::int64_t day = 86400;
  const std::int64_t iv = popularity::kDefaultIntervalSeconds;
  const std::vector<std::vector<int>> base{{3, 1, 4, 1, 5}, {9, 2, 6, 5, 3}, {5, 8, 9, 7, 9}, {0, 3, 2, 3, 8}};
  for (std::size_t l = 0; l < base.size(); ++l) {
    for (std::size_t j = 0; j < base[l].size(); ++j) {
      for (int k = 0; k < base[l][j]; ++k)
        rows.push_back({"ua", "a" + std::to_string(j), "A", static_cast<std::int64_t>(l) * iv + day});
      for (int k = 0; k < 7 * base[l][j]; ++k)
        rows.push_back({"ub", "b" + std::to_string(j), "B", static_cast<std::int64_t>(l) * iv + day});
    }
  }
  const corpus::InteractionLog log(std::move(rows));
  const popularity::IntervalCounts counts = popularity::count_intervals(log, iv, nullptr, 0);
  std::vector<std::string> ia, ib;
  for (std::size_t j = 0; j < 5; ++j) ia.push_back("a" + std::to_string(j)), ib.push_back("b" + std::to_string(j));
  double worst = 0.0;
  for (std::int64_t l = 1; l <= static_cast<std::int64_t>(base.size()); ++l) {
    const Matrix fa = popularity::factor_matrix(counts.domain("A"), ia, l);
    const Matrix fb = popularity::factor_matrix(counts.domain("B"), ib, l);
    for (std::size_t i = 0; i < fa.data.size(); ++i) worst = std::max(worst, std::abs(fa.data[i] - fb.data[i]));
  }

  bool all_ones = true;
  for (std::uint64_t c : {1u, 2u, 3u, 5u, 7u, 12u, 100u, 12345u}) {
    const std::vector<std::uint64_t> equal(9, c);
    const popularity::Factors s = popularity::power_mean_normalizers(equal);
    for (std::size_t w = 0; w < popularity::kFactorDim; ++w) all_ones = all_ones && static_cast<double>(c) / s[w] == 1.0;
  }
  // The same through the full pipeline.
  std::vector<corpus::Interaction> eq_rows;
  for (std::size_t j = 0; j < 6; ++j)
    for (int k = 0; k < 3; ++k) eq_rows.push_back({"u", "e" + std::to_string(j), "E", day});
  const popularity::IntervalCounts ec = popularity::count_intervals(corpus::InteractionLog(std::move(eq_rows)), iv);
  for (std::size_t j = 0; j < 6; ++j) {
    const popularity::Factors f = popularity::popularity_factors(ec, "E", "e" + std::to_string(j), iv + day);
    all_ones = all_ones && f == popularity::Factors{1.0, 1.0, 1.0, 1.0};
  }
  return {worst <= 1e-9 && all_ones, fmt("max|F_A - F_B|=%.3g equal counts give [1,1,1,1]: %s", worst, all_ones ? "yes" : "no")};
}

// ---------------------------------------------------------------------------

struct BenchSetup {
  corpus::SynthConfig synth;
  model::ModelConfig model;
  training::TrainConfig pretrain;
  training::TrainConfig finetune;
  evaluation::MetricConfig metric;
};

BenchSetup bench_setup(std::uint64_t seed, bool biased) {
  BenchSetup s;
  s.synth.num_domains = 4;
  s.synth.items_per_domain = 400;
  s.synth.users_per_domain = 2000;
  s.synth.content_dim = 32;
  s.synth.domain_bias_scale = biased ? 1.0 : 0.0;
  s.synth.popularity_scale = biased ? 1.0 : 0.0;
  s.model.input_dim = s.synth.content_dim;
  s.model.dim = 32;
  s.model.negatives = 63;
  s.model.max_len = 16;
  s.model.init_std = 0.05;
  s.model.seed = seed;
  s.metric.k_pct = 2.0;
  s.pretrain.lr = 3e-3;
  s.pretrain.batch_size = 256;
  s.pretrain.max_epochs = 10;
  s.pretrain.patience = 3;
  s.pretrain.seed = seed;
  s.pretrain.k_pct = s.metric.k_pct;
  s.finetune = s.pretrain;
  s.finetune.lr = 1e-3;
  return s;
}

evaluation::DomainResult zero_shot(training::Checkpoint& ck, const inference::PreparedDomain& target,
                                   const evaluation::MetricConfig& metric) {
  inference::ModelRanker r(ck.model, model::Mode::kZeroShot);
  return evaluation::evaluate(r, target, evaluation::TestType::kAll, metric);
}

const std::vector<std::uint64_t> kSeeds{1, 2, 3};

Outcome debiasing_efficacy() {
  const auto t0 = std::chrono::steady_clock::now();
  double gap_biased = 0.0, gap_free = 0.0;
  std::ostringstream per_seed;
  for (bool biased : {true, false}) {
    for (std::uint64_t seed : kSeeds) {
      const BenchSetup s = bench_setup(seed, biased);
      auto w = bench::make_world(s.synth, seed);
      training::Checkpoint full = training::pretrain(w->sources(), s.model, s.pretrain);
      const model::ModelConfig nc = evaluation::baseline_model_config(evaluation::BaselineKind::kPrerecN, s.model);
      training::Checkpoint ablated = training::pretrain(w->sources(), nc, s.pretrain);
      const double a = zero_shot(full, w->target(), s.metric).r_ndcg;
      const double b = zero_shot(ablated, w->target(), s.metric).r_ndcg;
      (biased ? gap_biased : gap_free) += (a - b) / kSeeds.size();
      per_seed << (biased ? " biased" : " free") << seed << ":" << fmt("%.4f/%.4f", a, b);
      std::fprintf(stderr, "  [6] %s seed %llu prerec %.4f prerec_n %.4f (%.0fs)\n", biased ? "biased" : "bias-free",
                   static_cast<unsigned long long>(seed), a, b, seconds_since(t0));
    }
  }
  const double t = seconds_since(t0);
  const bool ok = gap_biased >= 0.01 && std::abs(gap_free) <= 0.01 && t < 1800.0;
  return {ok, fmt("mean gap biased=%.4f bias-free=%.4f time=%.0fs;", gap_biased, gap_free, t) + per_seed.str()};
}

Outcome finetune_ordering() {
  const auto t0 = std::chrono::steady_clock::now();
  double zs_r = 0, zs_n = 0, ft_r = 0, ft_n = 0, rd_r = 0, rd_n = 0;
  const std::vector<std::size_t> sizes{0, 100, 1000};
  std::vector<double> curve_r(sizes.size(), 0.0), curve_n(sizes.size(), 0.0);
  const double k = static_cast<double>(kSeeds.size());
  for (std::uint64_t seed : kSeeds) {
    const BenchSetup s = bench_setup(seed, true);
    auto w = bench::make_world(s.synth, seed);
    training::Checkpoint full = training::pretrain(w->sources(), s.model, s.pretrain);
    const evaluation::DomainResult z = zero_shot(full, w->target(), s.metric);
    training::Checkpoint tuned = training::finetune(full, w->target(), s.finetune);
    inference::ModelRanker fr(tuned.model, model::Mode::kLearned);
    const evaluation::DomainResult f = evaluation::evaluate(fr, w->target(), evaluation::TestType::kAll, s.metric);
    evaluation::RandomRanker rr(seed);
    const evaluation::DomainResult r = evaluation::evaluate(rr, w->target(), evaluation::TestType::kAll, s.metric);
    zs_r += z.recall / k, zs_n += z.r_ndcg / k;
    ft_r += f.recall / k, ft_n += f.r_ndcg / k;
    rd_r += r.recall / k, rd_n += r.r_ndcg / k;
    const auto curve = training::incremental_schedule(full, w->target(), sizes, s.finetune, s.metric);
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      curve_r[i] += curve[i].result.recall / k;
      curve_n[i] += curve[i].result.r_ndcg / k;
    }
    std::fprintf(stderr,
                 "  [7] seed %llu r_ndcg ft %.4f zs %.4f rand %.4f | recall ft %.4f zs %.4f rand %.4f | curve %.4f %.4f "
                 "%.4f (%.0fs)\n",
                 static_cast<unsigned long long>(seed), f.r_ndcg, z.r_ndcg, r.r_ndcg, f.recall, z.recall, r.recall,
                 curve[0].result.r_ndcg, curve[1].result.r_ndcg, curve[2].result.r_ndcg, seconds_since(t0));
  }
  bool ok = ft_n - zs_n >= 0.005 && zs_n - rd_n >= 0.005 && ft_r - zs_r >= 0.005 && zs_r - rd_r >= 0.005;
  for (std::size_t i = 1; i < sizes.size(); ++i)
    ok = ok && curve_n[i] >= curve_n[i - 1] - 0.005 && curve_r[i] >= curve_r[i - 1] - 0.005;
  return {ok, fmt("r_ndcg ft=%.4f zs=%.4f rand=%.4f; recall ft=%.4f zs=%.4f rand=%.4f; curve r_ndcg %.4f,%.4f,%.4f "
                  "recall %.4f,%.4f,%.4f; time=%.0fs",
                  ft_n, zs_n, rd_n, ft_r, zs_r, rd_r, curve_n[0], curve_n[1], curve_n[2], curve_r[0], curve_r[1],
                  curve_r[2], seconds_since(t0))};
}

// ---------------------------------------------------------------------------

Outcome shift_invariance() {
  double worst = 0.0;
  std::size_t rank_changes = 0, checked = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    model::ModelConfig c = testing::toy_config(5, seed);
    model::Model m(c);
    testing::ToyDomain dom(40, 5, 3, 50 + seed, m.add_domain("k", 40, 3, 2));
    testing::randomize(m, 60 + seed);
    const std::vector<std::size_t> hist{1, 5, 9};
    model::SequenceInput seq{&dom.view, hist, std::size_t{0}};
    const model::EventQuery q{0, hist.size(), 1};
    const Matrix base = model::score_catalog(m, dom.view, std::span(&seq, 1), std::span(&q, 1), model::Mode::kLearned);
    // D_k . W_d for the domain's learned D_k.
    const Matrix& dk = m.param("domain").value;
    const Matrix& wd = m.param("score.wd").value;
    double shift = 0.0;
    for (std::size_t b = 0; b < wd.cols; ++b) shift += dk(dom.view.slot, b) * wd.data[b];
    shift += 25.0 * static_cast<double>(seed);  // larger shifts as well
    std::vector<double> l(base.row_span(0).begin(), base.row_span(0).end());
    std::vector<double> s(l);
    for (double& x : s) x += shift;
    const std::vector<double> p = model::softmax(l);
    const std::vector<double> ps = model::softmax(s);
    for (std::size_t j = 0; j < p.size(); ++j) {
      worst = std::max(worst, std::abs(p[j] - ps[j]));
      rank_changes += inference::rank_of(p, j) != inference::rank_of(ps, j);
      ++checked;
    }
  }
  return {worst <= 1e-12 && rank_changes == 0,
          fmt("items=%zu max|dp|=%.3g rank changes=%zu", checked, worst, rank_changes)};
}

// ---------------------------------------------------------------------------

Outcome determinism_and_persistence() {
  corpus::SynthConfig sc;
  sc.num_domains = 3;
  sc.items_per_domain = 60;
  sc.users_per_domain = 150;
  sc.content_dim = 8;
  sc.domain_bias_scale = 1.0;
  sc.popularity_scale = 1.0;
  model::ModelConfig mc;
  mc.input_dim = 8;
  mc.dim = 8;
  mc.negatives = 15;
  mc.max_len = 8;
  mc.seed = 17;
  training::TrainConfig tc;
  tc.lr = 3e-3;
  tc.max_epochs = 3;
  tc.batch_size = 64;
  tc.seed = 17;
  tc.k_pct = 5.0;

  auto run = [&] {
    auto w = bench::make_world(sc, 17);
    training::Checkpoint ck = training::pretrain(w->sources(), mc, tc);
    return std::make_pair(std::move(w), std::move(ck));
  };
  auto [w1, a] = run();
  auto [w2, b] = run();
  bool same_log = a.history.size() == b.history.size() && !a.history.empty();
  for (std::size_t i = 0; same_log && i < a.history.size(); ++i)
    same_log = a.history[i].epoch == b.history[i].epoch && a.history[i].train_loss == b.history[i].train_loss &&
               a.history[i].val_r_ndcg == b.history[i].val_r_ndcg;

  const fs::path path = fs::temp_directory_path() / "prerec_acceptance.ckpt";
  training::save_checkpoint(a, path);
  training::Checkpoint loaded = training::load_checkpoint(path);
  fs::remove(path);

  double worst = 0.0;
  for (const auto& d : w1->sources()) {
    const auto slot = a.model.find_domain(d->id);
    for (model::Mode mode : {model::Mode::kLearned, model::Mode::kZeroShot}) {
      const model::DomainView view = d->view(mode == model::Mode::kLearned ? *slot : model::kNoSlot);
      std::vector<model::SequenceInput> seqs;
      std::vector<model::EventQuery> qs;
      for (std::size_t u = 0; u < std::min<std::size_t>(d->validation.users.size(), 20); ++u) {
        const auto& items = d->validation.users[u].items;
        seqs.push_back({&view, std::span(items.data(), std::min(items.size(), mc.max_len)), std::nullopt});
        qs.push_back({seqs.size() - 1, seqs.back().history.size(), 1});
      }
      const Matrix x = model::score_catalog(a.model, view, seqs, qs, mode);
      const Matrix y = model::score_catalog(loaded.model, view, seqs, qs, mode);
      for (std::size_t i = 0; i < x.data.size(); ++i) worst = std::max(worst, std::abs(x.data[i] - y.data[i]));
    }
  }
  return {same_log && worst <= 1e-7,
          fmt("identical logs: %s (%zu epochs) round-trip max|diff|=%.3g", same_log ? "yes" : "no", a.history.size(), worst)};
}

// ---------------------------------------------------------------------------

Outcome split_protocol() {
  bool counts_ok = true;
  std::ostringstream det;
  for (std::size_t n : {10u, 100u, 1000u}) {
    std::vector<corpus::Interaction> rows;
    for (std::size_t u = 0; u < n; ++u) rows.push_back({"u" + std::to_string(u), "i", "d", 0});
    const corpus::SplitAssignment s = corpus::split_users(corpus::InteractionLog(std::move(rows)), 4, 3, 3, n);
    const std::size_t tr = s.count(corpus::Split::kTrain), va = s.count(corpus::Split::kValidation),
                      te = s.count(corpus::Split::kTest);
    const auto close = [&](std::size_t got, double frac) { return std::abs(static_cast<double>(got) - frac * n) < 1.0; };
    counts_ok = counts_ok && tr + va + te == n && close(tr, 0.4) && close(va, 0.3) && close(te, 0.3);
    det << ' ' << n << "->" << tr << '/' << va << '/' << te;
  }

  std::size_t mismatches = 0, trials = 0;
  std::mt19937_64 rng(8);
  for (int t = 0; t < 200; ++t) {
    std::uniform_int_distribution<int> id(0, 30);
    auto random_log = [&](const char* dom, std::size_t rows) {
      std::vector<corpus::Interaction> r;
      for (std::size_t k = 0; k < rows; ++k)
        r.push_back({"u" + std::to_string(id(rng)), "i" + std::to_string(id(rng)), dom, static_cast<std::int64_t>(k)});
      return corpus::InteractionLog(std::move(r));
    };
    const corpus::InteractionLog target = random_log("T", 60);
    const corpus::InteractionLog s1 = random_log("S1", 8);
    const corpus::InteractionLog s2 = random_log("S2", 8);
    const corpus::InteractionLog out = corpus::filter_unseen(target, {&s1, &s2});
    std::vector<std::string> expect;
    for (const auto& r : target.rows()) {
      bool seen = false;
      for (const corpus::InteractionLog* s : {&s1, &s2})
        for (const auto& q : s->rows()) seen = seen || q.user_id == r.user_id || q.item_id == r.item_id;
      if (!seen) expect.push_back(r.user_id + "|" + r.item_id + "|" + std::to_string(r.timestamp));
    }
    std::vector<std::string> got;
    for (const auto& r : out.rows()) got.push_back(r.user_id + "|" + r.item_id + "|" + std::to_string(r.timestamp));
    std::sort(expect.begin(), expect.end());
    std::sort(got.begin(), got.end());
    mismatches += expect != got;
    ++trials;
  }
  return {counts_ok && mismatches == 0,
          fmt("counts%s; unseen filter mismatches=%zu/%zu", det.str().c_str(), mismatches, trials)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"random-baseline anchor", random_anchor},
      {"back-door exactness", backdoor_exactness},
      {"metric identities", metric_identities},
      {"gradient correctness", gradient_check},
      {"popularity transferability", popularity_transfer},
      {"debiasing efficacy", debiasing_efficacy},
      {"fine-tuning ordering", finetune_ordering},
      {"softmax shift invariance", shift_invariance},
      {"determinism and persistence", determinism_and_persistence},
      {"split protocol", split_protocol},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.contains(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("[%s] %2d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
