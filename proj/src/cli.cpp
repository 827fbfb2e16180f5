#include "prerec/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "prerec/error.hpp"
#include "prerec/inference.hpp"
#include "prerec/popularity.hpp"

namespace prerec::cli {

using nlohmann::json;
namespace fs = std::filesystem;

std::int64_t ExperimentConfig::interval_seconds() const {
  return static_cast<std::int64_t>(std::llround(interval_days * 86400.0));
}

void ExperimentConfig::propagate() {
  model.seed = seed;
  train.seed = seed;
  train.k_pct = metric.k_pct;
}

void ExperimentConfig::validate() const {
  if (!(interval_days > 0.0) || interval_seconds() <= 0) throw ConfigError("interval length must be positive");
  for (double f : {split_train, split_validation, split_test})
    if (!(f >= 0.0)) throw ConfigError("split fractions must be non-negative");
  if (!(split_train + split_validation + split_test > 0.0)) throw ConfigError("split fractions must not all be zero");
  if (min_length < 1) throw ConfigError("min_length must be at least 1");
  if (variant != "prerec") evaluation::parse_baseline(variant);
  for (const std::string& s : sources)
    if (s == target) throw ConfigError("domain " + s + " is both a source and the target");
  train.validate();
  metric.validate();
}

namespace {

json synth_to_json(const corpus::SynthConfig& c) {
  json boosts = json::array();
  for (const auto& b : c.item_boosts) boosts.push_back({{"domain", b.domain}, {"item", b.item}, {"boost", b.boost}});
  return {{"num_domains", c.num_domains},
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
          {"domain_logit_scale", c.domain_logit_scale}};
}

corpus::SynthConfig synth_from_json(const json& j) {
  corpus::SynthConfig c;
  c.num_domains = j.value("num_domains", c.num_domains);
  c.items_per_domain = j.value("items_per_domain", c.items_per_domain);
  c.users_per_domain = j.value("users_per_domain", c.users_per_domain);
  c.content_dim = j.value("content_dim", c.content_dim);
  c.min_seq_len = j.value("min_seq_len", c.min_seq_len);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.num_intervals = j.value("num_intervals", c.num_intervals);
  c.interval_seconds = j.value("interval_seconds", c.interval_seconds);
  c.affinity_scale = j.value("affinity_scale", c.affinity_scale);
  c.history_weight = j.value("history_weight", c.history_weight);
  c.domain_bias_scale = j.value("domain_bias_scale", c.domain_bias_scale);
  c.popularity_scale = j.value("popularity_scale", c.popularity_scale);
  c.popularity_persistence = j.value("popularity_persistence", c.popularity_persistence);
  c.popularity_multipliers = j.value("popularity_multipliers", c.popularity_multipliers);
  c.domain_logit_scale = j.value("domain_logit_scale", c.domain_logit_scale);
  if (j.contains("item_boosts")) {
    for (const auto& b : j.at("item_boosts"))
      c.item_boosts.push_back({b.at("domain").get<std::size_t>(), b.at("item").get<std::size_t>(), b.at("boost").get<double>()});
  }
  return c;
}

json encoder_to_json(const embedding::RemoteEncoderConfig& e) {
  return {{"host", e.host},
          {"port", e.port},
          {"path", e.path},
          {"max_batch", e.max_batch},
          {"max_retries", e.max_retries},
          {"initial_backoff_ms", e.initial_backoff.count()},
          {"timeout_s", e.timeout.count()},
          {"cache_dir", e.cache_dir.string()}};
}

fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

}  // namespace

json to_json(const ExperimentConfig& c) {
  return {{"data",
           {{"interactions", c.interactions.string()},
            {"format", c.format},
            {"catalog", c.catalog.string()},
            {"embeddings", c.embeddings.string()}}},
          {"sources", c.sources},
          {"target", c.target},
          {"split", {{"train", c.split_train}, {"validation", c.split_validation}, {"test", c.split_test}}},
          {"min_length", c.min_length},
          {"interval_days", c.interval_days},
          {"seed", c.seed},
          {"variant", c.variant},
          {"model", model::to_json(c.model)},
          {"train", training::to_json(c.train)},
          {"metric", evaluation::to_json(c.metric)},
          {"synth", synth_to_json(c.synth)},
          {"encoder", encoder_to_json(c.encoder)},
          {"output_dir", c.output_dir.string()}};
}

ExperimentConfig experiment_from_json(const json& j, const fs::path& base) {
  ExperimentConfig c;
  try {
    if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
    if (j.contains("data")) {
      const json& d = j["data"];
      c.interactions = resolve(base, d.value("interactions", std::string()));
      c.format = d.value("format", std::string());
      c.catalog = resolve(base, d.value("catalog", std::string()));
      c.embeddings = resolve(base, d.value("embeddings", std::string()));
    }
    c.sources = j.value("sources", c.sources);
    c.target = j.value("target", c.target);
    if (j.contains("split")) {
      c.split_train = j["split"].value("train", c.split_train);
      c.split_validation = j["split"].value("validation", c.split_validation);
      c.split_test = j["split"].value("test", c.split_test);
    }
    c.min_length = j.value("min_length", c.min_length);
    c.interval_days = j.value("interval_days", c.interval_days);
    c.seed = j.value("seed", c.seed);
    c.variant = j.value("variant", c.variant);
    if (j.contains("model")) c.model = model::model_config_from_json(j["model"]);
    if (j.contains("train")) c.train = training::train_config_from_json(j["train"]);
    if (j.contains("metric")) c.metric = evaluation::metric_config_from_json(j["metric"]);
    if (j.contains("synth")) c.synth = synth_from_json(j["synth"]);
    if (j.contains("encoder")) {
      const json& e = j["encoder"];
      c.encoder.host = e.value("host", c.encoder.host);
      c.encoder.port = e.value("port", c.encoder.port);
      c.encoder.path = e.value("path", c.encoder.path);
      c.encoder.max_batch = e.value("max_batch", c.encoder.max_batch);
      c.encoder.max_retries = e.value("max_retries", c.encoder.max_retries);
      c.encoder.initial_backoff = std::chrono::milliseconds(e.value("initial_backoff_ms", c.encoder.initial_backoff.count()));
      c.encoder.timeout = std::chrono::seconds(e.value("timeout_s", c.encoder.timeout.count()));
      c.encoder.cache_dir = resolve(base, e.value("cache_dir", std::string()));
    }
    if (j.contains("output_dir")) c.output_dir = resolve(base, j["output_dir"].get<std::string>());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  return c;
}

ExperimentConfig load_experiment(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON (" + e.what() + ")");
  }
  return experiment_from_json(j, path.parent_path());
}

std::string fingerprint(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("output_dir");
  return training::fingerprint(j);
}

// ---------------------------------------------------------------------------

namespace {

struct Loaded {
  corpus::InteractionLog log;
  corpus::ItemCatalog catalog;
  embedding::EmbeddingTable table;
  std::unique_ptr<embedding::CatalogEmbeddings> lookup;
  corpus::SplitAssignment split;
};

void require_path(const fs::path& p, const char* what) {
  if (p.empty()) throw ConfigError(std::string("no ") + what + " path configured");
}

std::unique_ptr<Loaded> load_data(const ExperimentConfig& c) {
  require_path(c.interactions, "interactions");
  require_path(c.catalog, "catalog");
  require_path(c.embeddings, "embedding manifest");
  auto l = std::make_unique<Loaded>();
  const corpus::Format fmt = c.format.empty() ? corpus::format_from_path(c.interactions) : corpus::parse_format(c.format);
  l->log = corpus::load_interactions(c.interactions, fmt);
  l->catalog = corpus::load_catalog(c.catalog);
  l->table = embedding::load_embedding_table(c.embeddings);
  embedding::check_catalog_refs(l->catalog, l->table);
  l->lookup = std::make_unique<embedding::CatalogEmbeddings>(l->catalog, l->table);
  l->split = corpus::split_users_per_domain(l->log, c.split_train, c.split_validation, c.split_test, c.seed);
  return l;
}

std::unique_ptr<inference::PreparedDomain> prepare(const ExperimentConfig& c, const Loaded& l, const std::string& id) {
  inference::PrepareOptions opt;
  opt.interval_seconds = c.interval_seconds();
  opt.min_length = c.min_length;
  return inference::prepare_domain(id, l.log, l.split, l.catalog, *l.lookup, opt);
}

std::vector<std::string> source_ids(const ExperimentConfig& c, const Loaded& l) {
  if (!c.sources.empty()) return c.sources;
  std::vector<std::string> out;
  for (const std::string& d : l.log.domains())
    if (d != c.target) out.push_back(d);
  return out;
}

std::string timestamp_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%d-%H%M%S");
  return os.str();
}

// runs/<timestamp>-<fingerprint>/ with the resolved config inside.
fs::path make_run_dir(const ExperimentConfig& c, const std::string& command, const fs::path& explicit_dir = {}) {
  const std::string fp = fingerprint(c);
  fs::path dir = explicit_dir;
  if (dir.empty()) {
    const fs::path stem = c.output_dir / (timestamp_now() + "-" + fp);
    dir = stem;
    for (int k = 2; fs::exists(dir); ++k) dir = stem.string() + "-" + std::to_string(k);
  }
  fs::create_directories(dir);
  json j = to_json(c);
  j["command"] = command;
  j["fingerprint"] = fp;
  std::ofstream(dir / "config.json") << j.dump(2) << '\n';
  return dir;
}

class JsonlLog {
 public:
  JsonlLog(const fs::path& path, std::string fp) : out_(path), fp_(std::move(fp)) {
    if (!out_) throw DataError("cannot write " + path.string());
  }
  void write(json j) {
    j["fingerprint"] = fp_;
    out_ << j.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
  std::string fp_;
};

model::ModelConfig variant_config(const ExperimentConfig& c, std::size_t input_dim) {
  model::ModelConfig m = c.model;
  if (c.variant != "prerec") m = evaluation::baseline_model_config(evaluation::parse_baseline(c.variant), m);
  if (m.input_dim == 0) m.input_dim = input_dim;
  if (m.input_dim != input_dim) {
    throw ConfigError("model input_dim " + std::to_string(m.input_dim) + " differs from embedding width " +
                      std::to_string(input_dim));
  }
  return m;
}

void write_reports(const evaluation::EvalReport& r, const fs::path& dir, std::ostream& out) {
  evaluation::write_report_csv(r, dir / "report.csv");
  evaluation::write_report_json(r, dir / "report.json");
  for (const auto& row : r.rows)
    out << row.scenario << ',' << row.dataset << ',' << row.metric << ',' << row.test_type << ',' << row.model << ','
        << std::setprecision(6) << row.value << '\n';
}

void add_both_modes(evaluation::EvalReport& report, const std::string& scenario, const std::string& name,
                    inference::Ranker& ranker, const inference::PreparedDomain& target, const ExperimentConfig& c,
                    const std::vector<const corpus::InteractionLog*>& sources) {
  report.add(scenario, name, evaluation::evaluate(ranker, target, evaluation::TestType::kAll, c.metric));
  report.add(scenario, name, evaluation::evaluate(ranker, target, evaluation::TestType::kUnseen, c.metric, sources));
}

std::pair<std::string, fs::path> named_path(const std::string& arg) {
  const auto eq = arg.find('=');
  if (eq == std::string::npos) return {"prerec", arg};
  return {arg.substr(0, eq), arg.substr(eq + 1)};
}

// JSONL requests {user_id, history, timestamp} to JSONL {user_id, ranked, scores}.
void score_requests(model::Model& m, model::Mode mode, const inference::PreparedDomain& target,
                    const fs::path& requests, const fs::path& out_path, double k_pct, const std::string& fp) {
  std::ifstream in(requests);
  if (!in) throw DataError("cannot open request file " + requests.string());
  JsonlLog out(out_path, fp);
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    inference::RankingRequest req;
    try {
      const json j = json::parse(line);
      req.user_id = j.at("user_id").get<std::string>();
      req.history = j.at("history").get<std::vector<std::string>>();
      req.timestamp = j.at("timestamp").get<std::int64_t>();
    } catch (const json::exception& e) {
      throw DataError(requests.string() + ": row " + std::to_string(row) + ": " + e.what());
    }
    const std::vector<double> p = mode == model::Mode::kZeroShot ? inference::zero_shot_scores(m, target, req)
                                                                 : inference::finetuned_scores(m, target, req);
    const inference::RankedList r = inference::rank_topk(p, k_pct, target.item_ids());
    out.write({{"user_id", req.user_id}, {"ranked", r.items}, {"scores", r.scores}});
  }
}

// Shared option set; every flag overrides the config file.
struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<double> k_pct;
  std::optional<double> interval_days;
  std::optional<double> lr;
  std::optional<double> lambda_d;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<std::size_t> patience;
  std::optional<std::size_t> dim;
  std::optional<std::size_t> negatives;
  std::optional<std::string> variant;
  std::optional<std::string> target;
  std::vector<std::string> sources;
  std::optional<std::string> output_dir;
  std::optional<std::string> interactions;
  std::optional<std::string> catalog;
  std::optional<std::string> embeddings;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", config_path, "Experiment config (JSON)");
    app->add_option("--seed", seed, "Seed for splits, initialization, sampling and the random baseline");
    app->add_option("--k-pct", k_pct, "K% for the top-K% metrics and early stopping");
    app->add_option("--interval-days", interval_days, "Popularity interval length in days");
    app->add_option("--lr", lr, "Learning rate");
    app->add_option("--lambda-d", lambda_d, "Precision of the domain prior");
    app->add_option("--epochs", epochs, "Maximum training epochs");
    app->add_option("--batch-size", batch_size, "Training events per step");
    app->add_option("--patience", patience, "Early-stopping patience in epochs");
    app->add_option("--dim", dim, "Latent dimension");
    app->add_option("--negatives", negatives, "Sampled negatives per training event");
    app->add_option("--variant", variant, "Model variant: prerec, prerec_n, gru or sasrec_like");
    app->add_option("--target", target, "Target domain id");
    app->add_option("--source", sources, "Source domain id (repeatable)");
    app->add_option("--output-dir", output_dir, "Parent directory of run folders");
    app->add_option("--interactions", interactions, "Interaction log (CSV or JSONL)");
    app->add_option("--catalog", catalog, "Item catalog (JSONL)");
    app->add_option("--embeddings", embeddings, "Embedding manifest (JSON)");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig c = config_path.empty() ? ExperimentConfig{} : load_experiment(config_path);
    if (seed) c.seed = *seed;
    if (k_pct) c.metric.k_pct = *k_pct;
    if (interval_days) c.interval_days = *interval_days;
    if (lr) c.train.lr = *lr;
    if (lambda_d) c.model.lambda_d = *lambda_d;
    if (epochs) c.train.max_epochs = *epochs;
    if (batch_size) c.train.batch_size = *batch_size;
    if (patience) c.train.patience = *patience;
    if (dim) c.model.dim = *dim;
    if (negatives) c.model.negatives = *negatives;
    if (variant) c.variant = *variant;
    if (target) c.target = *target;
    if (!sources.empty()) c.sources = sources;
    if (output_dir) c.output_dir = *output_dir;
    if (interactions) c.interactions = *interactions;
    if (catalog) c.catalog = *catalog;
    if (embeddings) c.embeddings = *embeddings;
    c.propagate();
    c.validate();
    return c;
  }
};

void require_target(const ExperimentConfig& c, const Loaded& l) {
  if (c.target.empty()) throw ConfigError("no target domain configured (--target)");
  const auto ds = l.log.domains();
  if (std::find(ds.begin(), ds.end(), c.target) == ds.end()) throw DataError("target domain " + c.target + " has no interactions");
}

std::vector<const corpus::InteractionLog*> pointers(const std::vector<corpus::InteractionLog>& logs) {
  std::vector<const corpus::InteractionLog*> out;
  for (const auto& l : logs) out.push_back(&l);
  return out;
}

std::vector<corpus::InteractionLog> source_logs(const ExperimentConfig& c, const Loaded& l) {
  std::vector<corpus::InteractionLog> out;
  for (const std::string& id : source_ids(c, l)) {
    out.push_back(l.log.domain(id));
    if (out.back().empty()) throw DataError("source domain " + id + " has no interactions");
  }
  return out;
}

training::EpochCallback epoch_logger(JsonlLog& log, std::ostream& out) {
  return [&log, &out](const training::EpochLog& e) {
    log.write(training::to_json(e));
    out << "epoch " << e.epoch << " train_loss " << e.train_loss << " val_r_ndcg " << e.val_r_ndcg << '\n';
  };
}

int finish_training(const training::Checkpoint& ckpt, const fs::path& path, std::ostream& out, std::ostream& err) {
  training::save_checkpoint(ckpt, path);
  out << path.string() << '\n';
  if (ckpt.aborted) {
    err << "error: training stopped on a numerical failure (" << *ckpt.aborted << "); kept the last good checkpoint\n";
    return static_cast<int>(ExitCode::kNumerical);
  }
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_pretrain(const ExperimentConfig& c, std::ostream& out, std::ostream& err) {
  auto l = load_data(c);
  std::vector<std::unique_ptr<inference::PreparedDomain>> domains;
  std::vector<const inference::PreparedDomain*> ptrs;
  const auto ids = source_ids(c, *l);
  if (ids.empty()) throw ConfigError("no source domains to pre-train on");
  for (const std::string& id : ids) {
    domains.push_back(prepare(c, *l, id));
    ptrs.push_back(domains.back().get());
  }
  const model::ModelConfig mc = variant_config(c, l->table.dim());
  const fs::path dir = make_run_dir(c, "pretrain");
  JsonlLog log(dir / "train_log.jsonl", fingerprint(c));
  training::Checkpoint ckpt = training::pretrain(ptrs, mc, c.train, epoch_logger(log, err));
  return finish_training(ckpt, dir / "checkpoint.ckpt", out, err);
}

int cmd_zeroshot(const ExperimentConfig& c, const std::vector<std::string>& checkpoints,
                 const std::vector<std::string>& baselines, const std::string& requests, std::ostream& out) {
  if (checkpoints.empty() && baselines.empty()) throw ConfigError("nothing to evaluate: pass --checkpoint or --baseline");
  auto l = load_data(c);
  require_target(c, *l);
  auto target = prepare(c, *l, c.target);
  const auto logs = source_logs(c, *l);
  const auto srcs = pointers(logs);
  const fs::path dir = make_run_dir(c, "zeroshot");
  evaluation::EvalReport report;
  report.fingerprint = fingerprint(c);
  report.metric = c.metric;
  bool scored = false;
  for (const std::string& arg : checkpoints) {
    auto [name, path] = named_path(arg);
    training::Checkpoint ckpt = training::load_checkpoint(path);
    inference::ModelRanker ranker(ckpt.model, model::Mode::kZeroShot, name);
    add_both_modes(report, "zero-shot", name, ranker, *target, c, srcs);
    if (!requests.empty() && !scored) {
      score_requests(ckpt.model, model::Mode::kZeroShot, *target, requests, dir / "rankings.jsonl", c.metric.k_pct,
                     report.fingerprint);
      scored = true;
    }
  }
  for (const std::string& b : baselines) {
    std::unique_ptr<inference::Ranker> r;
    if (b == "oracle") {
      r = std::make_unique<evaluation::OracleRanker>();
    } else {
      switch (evaluation::parse_baseline(b)) {
        case evaluation::BaselineKind::kRandom:
          r = std::make_unique<evaluation::RandomRanker>(c.seed);
          break;
        case evaluation::BaselineKind::kPop:
          r = std::make_unique<evaluation::PopRanker>();
          break;
        case evaluation::BaselineKind::kContentKnn:
          r = std::make_unique<evaluation::ContentKnnRanker>();
          break;
        default:
          throw ConfigError("baseline " + b + " is trained; pre-train it with --variant and pass --checkpoint " + b + "=PATH");
      }
    }
    add_both_modes(report, "zero-shot", b, *r, *target, c, srcs);
  }
  if (!requests.empty() && !scored) throw ConfigError("--requests needs a --checkpoint to score with");
  write_reports(report, dir, out);
  out << (dir / "report.csv").string() << '\n';
  return 0;
}

int cmd_finetune(const ExperimentConfig& c, const std::string& checkpoint, const std::string& requests,
                 std::ostream& out, std::ostream& err) {
  if (checkpoint.empty()) throw ConfigError("--checkpoint is required");
  auto [name, path] = named_path(checkpoint);
  auto l = load_data(c);
  require_target(c, *l);
  auto target = prepare(c, *l, c.target);
  const auto logs = source_logs(c, *l);
  const training::Checkpoint base = training::load_checkpoint(path);
  const fs::path dir = make_run_dir(c, "finetune");
  JsonlLog log(dir / "train_log.jsonl", fingerprint(c));
  training::Checkpoint tuned = training::finetune(base, *target, c.train, std::nullopt, epoch_logger(log, err));
  const int code = finish_training(tuned, dir / "checkpoint.ckpt", out, err);
  evaluation::EvalReport report;
  report.fingerprint = fingerprint(c);
  report.metric = c.metric;
  inference::ModelRanker ranker(tuned.model, model::Mode::kLearned, name);
  add_both_modes(report, "fine-tune", name, ranker, *target, c, pointers(logs));
  if (!requests.empty())
    score_requests(tuned.model, model::Mode::kLearned, *target, requests, dir / "rankings.jsonl", c.metric.k_pct,
                   report.fingerprint);
  write_reports(report, dir, out);
  return code;
}

int cmd_incremental(const ExperimentConfig& c, const std::string& checkpoint, const std::vector<std::size_t>& sizes,
                    std::ostream& out) {
  if (checkpoint.empty()) throw ConfigError("--checkpoint is required");
  if (sizes.empty()) throw ConfigError("--sizes is required");
  auto [name, path] = named_path(checkpoint);
  auto l = load_data(c);
  require_target(c, *l);
  auto target = prepare(c, *l, c.target);
  const training::Checkpoint base = training::load_checkpoint(path);
  const fs::path dir = make_run_dir(c, "incremental");
  const auto curve = training::incremental_schedule(base, *target, sizes, c.train, c.metric);
  evaluation::EvalReport report;
  report.fingerprint = fingerprint(c);
  report.metric = c.metric;
  for (const auto& p : curve) report.add("incremental:" + std::to_string(p.size), name, p.result);
  write_reports(report, dir, out);
  return 0;
}

int cmd_synthgen(const ExperimentConfig& c, const std::string& out_dir, std::ostream& out) {
  const fs::path dir = out_dir.empty() ? make_run_dir(c, "synthgen") : fs::path(out_dir);
  fs::create_directories(dir);
  corpus::SyntheticData d = corpus::generate_synthetic(c.synth, c.seed);
  corpus::save_interactions_csv(d.log, dir / "interactions.csv");
  corpus::save_catalog(d.catalog, dir / "catalog.jsonl");
  embedding::save_embedding_table(embedding::table_from_matrix(d.embeddings, d.embedding_ids), dir / "embeddings.json");
  corpus::save_ground_truth(d.truth, dir / "ground_truth.json");

  ExperimentConfig next = c;
  next.interactions = "interactions.csv";
  next.format = "csv";
  next.catalog = "catalog.jsonl";
  next.embeddings = "embeddings.json";
  next.target = d.truth.domain_ids.back();
  next.sources.assign(d.truth.domain_ids.begin(), d.truth.domain_ids.end() - 1);
  next.interval_days = static_cast<double>(c.synth.interval_seconds) / 86400.0;
  next.model.input_dim = c.synth.content_dim;
  json j = to_json(next);
  j["fingerprint"] = fingerprint(c);
  j["output_dir"] = "runs";
  std::ofstream(dir / "experiment.json") << j.dump(2) << '\n';
  out << (dir / "experiment.json").string() << '\n';
  return 0;
}

int cmd_embed(const ExperimentConfig& c, const std::string& out_path, std::ostream& out) {
  require_path(c.catalog, "catalog");
  const corpus::ItemCatalog catalog = corpus::load_catalog(c.catalog);
  std::vector<std::string> texts;
  std::vector<std::string> ids;
  for (const corpus::ItemRecord& r : catalog.items()) {
    if (!r.text) throw DataError("catalog item " + r.item_id + " has no text to embed");
    texts.push_back(*r.text);
    ids.push_back(r.item_id);
  }
  embedding::RemoteEncoder enc(c.encoder);
  const auto vecs = enc.encode(texts);
  Matrix m(vecs.size(), vecs.empty() ? 0 : vecs.front().size());
  for (std::size_t i = 0; i < vecs.size(); ++i) std::copy(vecs[i].begin(), vecs[i].end(), m.row_span(i).begin());
  const fs::path dest = out_path.empty() ? make_run_dir(c, "embed") / "embeddings.json" : fs::path(out_path);
  if (dest.has_parent_path()) fs::create_directories(dest.parent_path());
  embedding::save_embedding_table(embedding::table_from_matrix(m, ids), dest);
  out << dest.string() << '\n';
  return 0;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& out_path, std::ostream& out) {
  if (inputs.empty()) throw ConfigError("report needs at least one input report");
  std::vector<evaluation::EvalReport> reports;
  for (const std::string& p : inputs) reports.push_back(evaluation::read_report(p));
  const evaluation::EvalReport merged = evaluation::merge_reports(reports);
  if (!out_path.empty()) {
    const fs::path p(out_path);
    if (p.extension() == ".json") {
      evaluation::write_report_json(merged, p);
    } else {
      evaluation::write_report_csv(merged, p);
    }
  }
  out << "# fingerprint=" << merged.fingerprint << '\n';
  out << "scenario,dataset,metric,test_type,model,value\n";
  for (const auto& r : merged.rows)
    out << r.scenario << ',' << r.dataset << ',' << r.metric << ',' << r.test_type << ',' << r.model << ','
        << std::setprecision(6) << r.value << '\n';
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-domain pre-trained sequential recommender with popularity and domain debiasing"};
  app.require_subcommand(1);
  Overrides ov;
  std::vector<std::string> checkpoints;
  std::vector<std::string> baselines;
  std::string requests;
  std::string out_dir;
  std::string out_path;
  std::vector<std::size_t> sizes;
  std::vector<std::string> inputs;

  CLI::App* pre = app.add_subcommand("pretrain", "Pre-train on the source domains");
  ov.attach(pre);

  CLI::App* zs = app.add_subcommand("zeroshot", "Zero-shot evaluation on the target domain (all and unseen tests)");
  ov.attach(zs);
  zs->add_option("--checkpoint", checkpoints, "Checkpoint to evaluate, optionally NAME=PATH (repeatable)");
  zs->add_option("--baseline", baselines, "Untrained ranker: random, pop, content_knn or oracle (repeatable)");
  zs->add_option("--requests", requests, "JSONL ranking requests to score with the first checkpoint");

  CLI::App* ft = app.add_subcommand("finetune", "Fine-tune a checkpoint on the target domain");
  ov.attach(ft);
  ft->add_option("--checkpoint", out_path, "Pre-trained checkpoint, optionally NAME=PATH")->required();
  ft->add_option("--requests", requests, "JSONL ranking requests to score with the fine-tuned model");

  CLI::App* inc = app.add_subcommand("incremental", "Fine-tune on growing chronological prefixes of the target data");
  ov.attach(inc);
  inc->add_option("--checkpoint", out_path, "Pre-trained checkpoint, optionally NAME=PATH")->required();
  inc->add_option("--sizes", sizes, "Training-event counts, ascending")->required()->delimiter(',');

  CLI::App* syn = app.add_subcommand("synthgen", "Generate the planted-bias synthetic benchmark");
  ov.attach(syn);
  syn->add_option("--out", out_dir, "Directory for the generated files");
  std::optional<double> domain_bias, pop_scale;
  std::optional<std::size_t> n_domains, n_items, n_users;
  syn->add_option("--domains", n_domains, "Number of domains (the last is the target)");
  syn->add_option("--items", n_items, "Items per domain");
  syn->add_option("--users", n_users, "Users per domain");
  syn->add_option("--domain-bias", domain_bias, "Norm of the planted domain vectors");
  syn->add_option("--popularity", pop_scale, "Scale of the planted popularity logit");

  CLI::App* emb = app.add_subcommand("embed", "Embed catalog texts with the remote encoder");
  ov.attach(emb);
  std::optional<std::string> enc_host;
  std::optional<int> enc_port;
  emb->add_option("--host", enc_host, "Encoder host");
  emb->add_option("--port", enc_port, "Encoder port");
  emb->add_option("--out", out_dir, "Manifest path to write");

  CLI::App* rep = app.add_subcommand("report", "Merge report files into one table sorted by dataset and model");
  rep->add_option("inputs", inputs, "Report files (CSV or JSON)")->required();
  rep->add_option("--out", out_dir, "Merged report path (.csv or .json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, errs;
    const int code = app.exit(e, o, errs);
    out << o.str();
    err << errs.str();
    return code == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
  }

  try {
    if (rep->parsed()) return cmd_report(inputs, out_dir, out);
    ExperimentConfig c = ov.resolve();
    if (pre->parsed()) return cmd_pretrain(c, out, err);
    if (zs->parsed()) return cmd_zeroshot(c, checkpoints, baselines, requests, out);
    if (ft->parsed()) return cmd_finetune(c, out_path, requests, out, err);
    if (inc->parsed()) return cmd_incremental(c, out_path, sizes, out);
    if (syn->parsed()) {
      if (n_domains) c.synth.num_domains = *n_domains;
      if (n_items) c.synth.items_per_domain = *n_items;
      if (n_users) c.synth.users_per_domain = *n_users;
      if (domain_bias) c.synth.domain_bias_scale = *domain_bias;
      if (pop_scale) c.synth.popularity_scale = *pop_scale;
      if (ov.interval_days) c.synth.interval_seconds = c.interval_seconds();
      c.synth.validate();
      return cmd_synthgen(c, out_dir, out);
    }
    if (emb->parsed()) {
      if (enc_host) c.encoder.host = *enc_host;
      if (enc_port) c.encoder.port = *enc_port;
      return cmd_embed(c, out_dir, out);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kData);
  } catch (const json::exception& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kData);
  }
  return static_cast<int>(ExitCode::kConfig);
}

}  // namespace prerec::cli
