#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <mutex>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "prerec/corpus.hpp"
#include "prerec/tensor.hpp"

namespace prerec::embedding {

// Frozen universal content vectors, one float32 row per item.
class EmbeddingTable : public corpus::EmbeddingLookup {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(std::size_t dim, std::vector<float> rows, std::unordered_map<std::string, std::size_t> index);

  std::size_t dim() const override { return dim_; }
  std::size_t row_count() const { return dim_ == 0 ? 0 : rows_.size() / dim_; }
  const std::vector<float>& rows() const { return rows_; }
  const std::unordered_map<std::string, std::size_t>& index() const { return index_; }
  std::vector<double> vector_for(const std::string& item_id) const override;
  std::vector<double> row(std::size_t r) const;
  bool contains(const std::string& item_id) const { return index_.contains(item_id); }

 private:
  std::size_t dim_ = 0;
  std::vector<float> rows_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Manifest JSON {count, dim, blob, ids:{item_id: row}} next to a row-major
// little-endian float32 blob. The blob path is resolved relative to the
// manifest.
EmbeddingTable load_embedding_table(const std::filesystem::path& manifest_path);
void save_embedding_table(const EmbeddingTable& table, const std::filesystem::path& manifest_path);
EmbeddingTable table_from_matrix(const Matrix& rows, const std::vector<std::string>& ids);

// Every catalog embedding_ref must name an existing row.
void check_catalog_refs(const corpus::ItemCatalog& catalog, const EmbeddingTable& table);

// Catalog items resolve through embedding_ref when present, else by id.
class CatalogEmbeddings : public corpus::EmbeddingLookup {
 public:
  CatalogEmbeddings(const corpus::ItemCatalog& catalog, const EmbeddingTable& table);
  std::size_t dim() const override { return table_->dim(); }
  std::vector<double> vector_for(const std::string& item_id) const override;

 private:
  const corpus::ItemCatalog* catalog_;
  const EmbeddingTable* table_;
};

// Single affine layer m_j = weight * x + bias, weight stored out x in.
struct ProjectionParams {
  Matrix weight;  // B x input_dim
  Matrix bias;    // 1 x B

  std::size_t input_dim() const { return weight.cols; }
  std::size_t output_dim() const { return weight.rows; }
};

ProjectionParams init_projection(std::size_t input_dim, std::size_t output_dim, std::mt19937_64& rng);
std::vector<double> project(std::span<const double> input, const ProjectionParams& params);

// Client for an external text encoder: POST {"texts": [...]} returning
// {"vectors": [[...], ...]}.
struct RemoteEncoderConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string path = "/encode";
  std::size_t max_batch = 64;
  int max_retries = 3;
  std::chrono::milliseconds initial_backoff{100};
  std::chrono::seconds timeout{30};
  std::filesystem::path cache_dir;
};

class RemoteEncoder {
 public:
  explicit RemoteEncoder(RemoteEncoderConfig config);

  // One vector per text. Texts already in the cache are not sent.
  std::vector<std::vector<double>> encode(const std::vector<std::string>& texts);

  std::size_t request_count() const { return requests_.load(); }
  std::size_t dimension() const { return dim_; }

 private:
  std::vector<std::vector<double>> post_batch(const std::vector<std::string>& texts);
  bool cache_read(const std::string& key, std::vector<double>& out) const;
  void cache_write(const std::string& key, const std::vector<double>& v);
  void check_dim(std::size_t d);

  RemoteEncoderConfig config_;
  std::size_t dim_ = 0;
  std::atomic<std::size_t> requests_{0};
  std::mutex cache_mutex_;
  std::unordered_map<std::string, std::vector<double>> memory_cache_;
};

// Hex SHA-256 of the text, the cache key.
std::string text_hash(const std::string& text);

}  // namespace prerec::embedding
