#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "prerec/corpus.hpp"
#include "prerec/inference.hpp"
#include "prerec/model.hpp"

namespace prerec::evaluation {

struct MetricConfig {
  double a = 2.0;
  double b = 15000.0;
  double k_pct = 0.04;

  void validate() const;
  bool operator==(const MetricConfig&) const = default;
};

nlohmann::json to_json(const MetricConfig& c);
MetricConfig metric_config_from_json(const nlohmann::json& j);

// log(a) / log(a + b (rank - 1) / n), without truncation.
double r_ndcg(std::size_t rank, std::size_t n, const MetricConfig& config);
// Zero beyond the top-K% cutoff.
double r_ndcg_at(std::size_t rank, std::size_t n, const MetricConfig& config);
// 1 when rank <= ceil(n K% / 100); a miss (nullopt) scores 0.
int recall_at(std::optional<std::size_t> rank, std::size_t n, const MetricConfig& config);

enum class TestType { kAll, kUnseen };
const char* test_type_name(TestType t);
TestType parse_test_type(const std::string& name);

struct DomainResult {
  std::string domain;
  TestType test_type = TestType::kAll;
  std::size_t events = 0;
  double recall = 0.0;
  double r_ndcg = 0.0;
};

// Scores every event at positions >= 1 of `data` in chunks and averages the
// two metrics. Throws DataError when there is nothing to evaluate.
DomainResult evaluate_split(inference::Ranker& ranker, const inference::PreparedDomain& domain,
                            const corpus::DomainData& data, const MetricConfig& config, std::size_t chunk = 512);

// Test split of the domain. Unseen mode drops test rows whose user or item
// occurs in any of `sources` and needs at least one source log.
DomainResult evaluate(inference::Ranker& ranker, const inference::PreparedDomain& domain, TestType mode,
                      const MetricConfig& config, const std::vector<const corpus::InteractionLog*>& sources = {},
                      std::size_t chunk = 512);

// ---------------------------------------------------------------------------
// Baselines.

enum class BaselineKind { kRandom, kPop, kContentKnn, kGru, kSasrecLike, kPrerecN };
BaselineKind parse_baseline(const std::string& name);
const char* baseline_name(BaselineKind kind);
bool baseline_is_trained(BaselineKind kind);

// Architecture of the trained baselines, derived from the PreRec config.
model::ModelConfig baseline_model_config(BaselineKind kind, const model::ModelConfig& base);

// Uniform scores keyed by (seed, user id, position), so results do not depend
// on chunking or user order.
class RandomRanker : public inference::Ranker {
 public:
  explicit RandomRanker(std::uint64_t seed) : seed_(seed) {}
  std::string name() const override { return "random"; }
  Matrix score(const inference::PreparedDomain& domain, const corpus::DomainData& split,
               std::span<const inference::Event> events) override;

 private:
  std::uint64_t seed_;
};

// Interaction counts of the interval before the event.
class PopRanker : public inference::Ranker {
 public:
  std::string name() const override { return "pop"; }
  Matrix score(const inference::PreparedDomain& domain, const corpus::DomainData& split,
               std::span<const inference::Event> events) override;
};

// Inner product between the last history item's content vector and each
// candidate's.
class ContentKnnRanker : public inference::Ranker {
 public:
  std::string name() const override { return "content_knn"; }
  Matrix score(const inference::PreparedDomain& domain, const corpus::DomainData& split,
               std::span<const inference::Event> events) override;
};

// Puts the target first; an upper bound for harness checks.
class OracleRanker : public inference::Ranker {
 public:
  std::string name() const override { return "oracle"; }
  Matrix score(const inference::PreparedDomain& domain, const corpus::DomainData& split,
               std::span<const inference::Event> events) override;
};

// ---------------------------------------------------------------------------
// Reports.

struct ReportRow {
  std::string scenario;
  std::string dataset;
  std::string metric;  // "recall" or "r_ndcg"
  std::string test_type;
  std::string model;
  double value = 0.0;
  std::size_t events = 0;
};

struct EvalReport {
  std::string fingerprint;
  MetricConfig metric;
  std::vector<ReportRow> rows;

  void add(const std::string& scenario, const std::string& model, const DomainResult& result);
  // Value of one row; throws DataError when absent.
  double value(const std::string& dataset, const std::string& metric, const std::string& test_type,
               const std::string& model) const;
};

nlohmann::json to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);

// CSV `scenario,dataset,metric,test_type,model,value` preceded by comment
// lines carrying the fingerprint and metric config.
void write_report_csv(const EvalReport& report, const std::filesystem::path& path);
void write_report_json(const EvalReport& report, const std::filesystem::path& path);
// Reads either format, chosen by extension.
EvalReport read_report(const std::filesystem::path& path);

// Concatenates rows sorted by (dataset, model, scenario, test_type, metric).
// Reports with different metric configs are refused with ConfigError.
EvalReport merge_reports(const std::vector<EvalReport>& reports);

}  // namespace prerec::evaluation
