#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "prerec/corpus.hpp"
#include "prerec/embedding.hpp"
#include "prerec/evaluation.hpp"
#include "prerec/model.hpp"
#include "prerec/training.hpp"

namespace prerec::cli {

// Everything one command needs. Paths are resolved against the directory of
// the config file they came from.
struct ExperimentConfig {
  std::filesystem::path interactions;
  std::string format;  // "csv", "jsonl" or empty for the file extension
  std::filesystem::path catalog;
  std::filesystem::path embeddings;  // manifest
  std::vector<std::string> sources;  // empty: every domain except the target
  std::string target;
  double split_train = 0.4;
  double split_validation = 0.3;
  double split_test = 0.3;
  std::size_t min_length = 2;
  double interval_days = 15.0;
  std::uint64_t seed = 0;
  std::string variant = "prerec";  // prerec, prerec_n, gru, sasrec_like
  model::ModelConfig model;
  training::TrainConfig train;
  evaluation::MetricConfig metric;
  corpus::SynthConfig synth;
  embedding::RemoteEncoderConfig encoder;
  std::filesystem::path output_dir = "runs";

  std::int64_t interval_seconds() const;
  // Copies the experiment seed and K% into the model and train sections.
  void propagate();
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment(const std::filesystem::path& path);
// Hash of the resolved config minus the output location.
std::string fingerprint(const ExperimentConfig& c);

// Entry point of the `prerec` tool; returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace prerec::cli
