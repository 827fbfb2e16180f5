#include "prerec/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <tuple>

#include "prerec/error.hpp"
#include "prerec/kernels.hpp"

namespace prerec::evaluation {

void MetricConfig::validate() const {
  if (!(a > 1.0)) throw ConfigError("metric a must exceed 1");
  if (!(b > 0.0)) throw ConfigError("metric b must be positive");
  if (!(k_pct > 0.0) || k_pct > 100.0) throw ConfigError("K% must lie in (0, 100]");
}

nlohmann::json to_json(const MetricConfig& c) { return {{"a", c.a}, {"b", c.b}, {"k_pct", c.k_pct}}; }

MetricConfig metric_config_from_json(const nlohmann::json& j) {
  MetricConfig c;
  try {
    c.a = j.value("a", c.a);
    c.b = j.value("b", c.b);
    c.k_pct = j.value("k_pct", c.k_pct);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("metric config: ") + e.what());
  }
  c.validate();
  return c;
}

double r_ndcg(std::size_t rank, std::size_t n, const MetricConfig& config) {
  if (rank == 0 || n == 0) throw DataError("r_ndcg needs rank >= 1 and a non-empty catalog");
  if (rank == 1) return 1.0;
  const double x = config.a + config.b * static_cast<double>(rank - 1) / static_cast<double>(n);
  return std::log(config.a) / std::log(x);
}

double r_ndcg_at(std::size_t rank, std::size_t n, const MetricConfig& config) {
  return rank <= inference::topk_cutoff(n, config.k_pct) ? r_ndcg(rank, n, config) : 0.0;
}

int recall_at(std::optional<std::size_t> rank, std::size_t n, const MetricConfig& config) {
  return rank && *rank >= 1 && *rank <= inference::topk_cutoff(n, config.k_pct) ? 1 : 0;
}

const char* test_type_name(TestType t) { return t == TestType::kAll ? "all" : "unseen"; }

TestType parse_test_type(const std::string& name) {
  if (name == "all") return TestType::kAll;
  if (name == "unseen") return TestType::kUnseen;
  throw ConfigError("unknown test type '" + name + "'");
}

DomainResult evaluate_split(inference::Ranker& ranker, const inference::PreparedDomain& domain,
                            const corpus::DomainData& data, const MetricConfig& config, std::size_t chunk) {
  config.validate();
  const std::vector<inference::Event> events = inference::make_events(domain, data, 1);
  if (events.empty()) throw DataError("no evaluable events in domain " + domain.id);
  const std::size_t n = domain.item_count();
  const std::size_t cutoff = inference::topk_cutoff(n, config.k_pct);
  chunk = std::max<std::size_t>(chunk, 1);

  std::size_t hits = 0;
  std::vector<double> gains;
  for (std::size_t begin = 0; begin < events.size(); begin += chunk) {
    const std::size_t end = std::min(events.size(), begin + chunk);
    std::span<const inference::Event> part(events.data() + begin, end - begin);
    const Matrix scores = ranker.score(domain, data, part);
    if (scores.rows != part.size() || scores.cols != n) throw DataError(ranker.name() + " returned a misshaped score matrix");
    for (std::size_t i = 0; i < part.size(); ++i) {
      std::span<const double> row = scores.row_span(i);
      for (double s : row)
        if (!std::isfinite(s)) throw NumericalError(ranker.name() + " produced a non-finite score");
      const std::size_t rank = inference::rank_of(row, part[i].target);
      if (rank <= cutoff) {
        ++hits;
        gains.push_back(r_ndcg(rank, n, config));
      }
    }
  }
  // Sorted summation keeps the average independent of event order.
  std::sort(gains.begin(), gains.end());
  double total = 0.0;
  for (double g : gains) total += g;

  DomainResult r;
  r.domain = domain.id;
  r.events = events.size();
  r.recall = static_cast<double>(hits) / static_cast<double>(events.size());
  r.r_ndcg = total / static_cast<double>(events.size());
  return r;
}

DomainResult evaluate(inference::Ranker& ranker, const inference::PreparedDomain& domain, TestType mode,
                      const MetricConfig& config, const std::vector<const corpus::InteractionLog*>& sources,
                      std::size_t chunk) {
  if (mode == TestType::kAll) {
    DomainResult r = evaluate_split(ranker, domain, domain.test, config, chunk);
    r.test_type = mode;
    return r;
  }
  if (sources.empty()) throw ConfigError("unseen test mode needs the source domain logs");
  const corpus::InteractionLog kept = corpus::filter_unseen(domain.test_log, sources);
  const corpus::DomainData data = inference::reindex(domain, kept);
  DomainResult r = evaluate_split(ranker, domain, data, config, chunk);
  r.test_type = mode;
  return r;
}

// ---------------------------------------------------------------------------

BaselineKind parse_baseline(const std::string& name) {
  if (name == "random") return BaselineKind::kRandom;
  if (name == "pop") return BaselineKind::kPop;
  if (name == "content_knn") return BaselineKind::kContentKnn;
  if (name == "gru") return BaselineKind::kGru;
  if (name == "sasrec_like") return BaselineKind::kSasrecLike;
  if (name == "prerec_n") return BaselineKind::kPrerecN;
  throw ConfigError("unknown baseline '" + name + "'");
}

const char* baseline_name(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::kRandom:
      return "random";
    case BaselineKind::kPop:
      return "pop";
    case BaselineKind::kContentKnn:
      return "content_knn";
    case BaselineKind::kGru:
      return "gru";
    case BaselineKind::kSasrecLike:
      return "sasrec_like";
    case BaselineKind::kPrerecN:
      return "prerec_n";
  }
  return "?";
}

bool baseline_is_trained(BaselineKind kind) {
  return kind == BaselineKind::kGru || kind == BaselineKind::kSasrecLike || kind == BaselineKind::kPrerecN;
}

model::ModelConfig baseline_model_config(BaselineKind kind, const model::ModelConfig& base) {
  if (!baseline_is_trained(kind)) throw ConfigError(std::string(baseline_name(kind)) + " has no model");
  model::ModelConfig c = base;
  c.use_domain = false;
  c.use_popularity = false;
  c.z_offsets = false;
  c.user_offsets = false;
  if (kind == BaselineKind::kGru) {
    c.encoder = model::EncoderKind::kGru;
    c.item_offsets = false;
  } else if (kind == BaselineKind::kSasrecLike) {
    c.encoder = model::EncoderKind::kTransformer;
    c.layers = 1;
    c.item_offsets = false;
  }
  return c;
}

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

Matrix RandomRanker::score(const inference::PreparedDomain& domain, const corpus::DomainData& split,
                           std::span<const inference::Event> events) {
  const std::size_t n = domain.item_count();
  Matrix out(events.size(), n);
  const std::uint64_t dom = std::hash<std::string>{}(domain.id);
  for (std::size_t i = 0; i < events.size(); ++i) {
    const std::uint64_t user = std::hash<std::string>{}(split.users.at(events[i].user).user_id);
    std::mt19937_64 rng(splitmix(seed_ ^ splitmix(dom ^ splitmix(user ^ splitmix(events[i].position)))));
    for (double& s : out.row_span(i)) s = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  }
  return out;
}

Matrix PopRanker::score(const inference::PreparedDomain& domain, const corpus::DomainData&,
                        std::span<const inference::Event> events) {
  Matrix out(events.size(), domain.item_count());
  for (std::size_t i = 0; i < events.size(); ++i) {
    const std::vector<double> c = popularity::previous_counts(domain.counts, domain.item_ids(), events[i].interval);
    std::copy(c.begin(), c.end(), out.row_span(i).begin());
  }
  return out;
}

Matrix ContentKnnRanker::score(const inference::PreparedDomain& domain, const corpus::DomainData& split,
                               std::span<const inference::Event> events) {
  const Matrix& content = domain.content();
  Matrix out(events.size(), domain.item_count());
  for (std::size_t i = 0; i < events.size(); ++i) {
    const inference::Event& e = events[i];
    if (e.position == 0) continue;
    const std::size_t last = split.users.at(e.user).items.at(e.position - 1);
    kernels::gemv(content.data.data(), content.rows, content.cols, content.row_span(last).data(),
                  out.row_span(i).data());
  }
  return out;
}

Matrix OracleRanker::score(const inference::PreparedDomain& domain, const corpus::DomainData&,
                           std::span<const inference::Event> events) {
  Matrix out(events.size(), domain.item_count());
  for (std::size_t i = 0; i < events.size(); ++i) out(i, events[i].target) = 1.0;
  return out;
}

// ---------------------------------------------------------------------------

void EvalReport::add(const std::string& scenario, const std::string& model, const DomainResult& result) {
  const std::string tt = test_type_name(result.test_type);
  rows.push_back({scenario, result.domain, "recall", tt, model, result.recall, result.events});
  rows.push_back({scenario, result.domain, "r_ndcg", tt, model, result.r_ndcg, result.events});
}

double EvalReport::value(const std::string& dataset, const std::string& metric, const std::string& test_type,
                         const std::string& model) const {
  for (const ReportRow& r : rows)
    if (r.dataset == dataset && r.metric == metric && r.test_type == test_type && r.model == model) return r.value;
  throw DataError("report has no row for " + dataset + "/" + metric + "/" + test_type + "/" + model);
}

nlohmann::json to_json(const EvalReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const ReportRow& r : report.rows) {
    rows.push_back({{"scenario", r.scenario},
                    {"dataset", r.dataset},
                    {"metric", r.metric},
                    {"test_type", r.test_type},
                    {"model", r.model},
                    {"value", r.value},
                    {"events", r.events}});
  }
  return {{"fingerprint", report.fingerprint}, {"metric_config", to_json(report.metric)}, {"rows", rows}};
}

EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport out;
  try {
    out.fingerprint = j.value("fingerprint", std::string());
    out.metric = metric_config_from_json(j.at("metric_config"));
    for (const auto& r : j.at("rows")) {
      out.rows.push_back({r.at("scenario").get<std::string>(), r.at("dataset").get<std::string>(),
                          r.at("metric").get<std::string>(), r.at("test_type").get<std::string>(),
                          r.at("model").get<std::string>(), r.at("value").get<double>(),
                          r.value("events", std::size_t{0})});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed report: ") + e.what());
  }
  return out;
}

namespace {

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(std::numeric_limits<double>::max_digits10);
  os << v;
  return os.str();
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  return f;
}

}  // namespace

void write_report_csv(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream f = open_out(path);
  f << "# fingerprint=" << report.fingerprint << '\n';
  f << "# metric_config=" << to_json(report.metric).dump() << '\n';
  f << "scenario,dataset,metric,test_type,model,value\n";
  for (const ReportRow& r : report.rows) {
    for (const std::string* s : {&r.scenario, &r.dataset, &r.metric, &r.test_type, &r.model})
      if (s->find(',') != std::string::npos) throw DataError("report field contains a comma: " + *s);
    f << r.scenario << ',' << r.dataset << ',' << r.metric << ',' << r.test_type << ',' << r.model << ','
      << format_double(r.value) << '\n';
  }
}

void write_report_json(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream f = open_out(path);
  f << to_json(report).dump(2) << '\n';
}

EvalReport read_report(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read report " + path.string());
  if (path.extension() == ".json") {
    try {
      return report_from_json(nlohmann::json::parse(f));
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(path.string() + ": " + e.what());
    }
  }
  EvalReport out;
  bool have_metric = false;
  bool header = false;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line.rfind("# fingerprint=", 0) == 0) {
      out.fingerprint = line.substr(14);
    } else if (line.rfind("# metric_config=", 0) == 0) {
      try {
        out.metric = metric_config_from_json(nlohmann::json::parse(line.substr(16)));
      } catch (const nlohmann::json::parse_error& e) {
        throw DataError(path.string() + ": bad metric config line");
      }
      have_metric = true;
    } else if (line[0] == '#') {
      continue;
    } else if (!header) {
      if (line != "scenario,dataset,metric,test_type,model,value") throw DataError(path.string() + ": unexpected header");
      header = true;
    } else {
      const std::vector<std::string> c = split_csv(line);
      if (c.size() != 6) throw DataError(path.string() + ": line " + std::to_string(lineno) + " needs 6 fields");
      double v = 0.0;
      try {
        v = std::stod(c[5]);
      } catch (const std::exception&) {
        throw DataError(path.string() + ": line " + std::to_string(lineno) + " has a bad value");
      }
      out.rows.push_back({c[0], c[1], c[2], c[3], c[4], v, 0});
    }
  }
  if (!have_metric) throw DataError(path.string() + ": missing metric config line");
  return out;
}

EvalReport merge_reports(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw ConfigError("nothing to merge");
  EvalReport out;
  out.metric = reports.front().metric;
  std::vector<std::string> prints;
  for (const EvalReport& r : reports) {
    if (!(r.metric == out.metric)) {
      throw ConfigError("refusing to merge reports with different metric configs (" + to_json(out.metric).dump() +
                        " vs " + to_json(r.metric).dump() + ")");
    }
    if (std::find(prints.begin(), prints.end(), r.fingerprint) == prints.end()) prints.push_back(r.fingerprint);
    out.rows.insert(out.rows.end(), r.rows.begin(), r.rows.end());
  }
  for (std::size_t i = 0; i < prints.size(); ++i) out.fingerprint += (i ? "+" : "") + prints[i];
  std::stable_sort(out.rows.begin(), out.rows.end(), [](const ReportRow& x, const ReportRow& y) {
    return std::tie(x.dataset, x.model, x.scenario, x.test_type, x.metric) <
           std::tie(y.dataset, y.model, y.scenario, y.test_type, y.metric);
  });
  return out;
}

}  // namespace prerec::evaluation
