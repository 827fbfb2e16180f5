#include "prerec/embedding.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "prerec/error.hpp"

namespace prerec::embedding {

using nlohmann::json;

EmbeddingTable::EmbeddingTable(std::size_t dim, std::vector<float> rows, std::unordered_map<std::string, std::size_t> index)
    : dim_(dim), rows_(std::move(rows)), index_(std::move(index)) {
  if (dim_ == 0) throw DataError("embedding dimension must be positive");
  if (rows_.size() % dim_ != 0) throw DataError("embedding rows are not a multiple of the dimension");
  const std::size_t n = rows_.size() / dim_;
  for (const auto& [id, row] : index_) {
    if (row >= n) throw DataError("embedding id " + id + " points past the last row");
  }
}

std::vector<double> EmbeddingTable::vector_for(const std::string& item_id) const {
  auto it = index_.find(item_id);
  if (it == index_.end()) throw DataError("no embedding for item " + item_id);
  const float* r = rows_.data() + it->second * dim_;
  return std::vector<double>(r, r + dim_);
}

std::vector<double> EmbeddingTable::row(std::size_t r) const {
  if (r >= row_count()) throw DataError("embedding row " + std::to_string(r) + " out of range");
  const float* p = rows_.data() + r * dim_;
  return std::vector<double>(p, p + dim_);
}

CatalogEmbeddings::CatalogEmbeddings(const corpus::ItemCatalog& catalog, const EmbeddingTable& table)
    : catalog_(&catalog), table_(&table) {
  check_catalog_refs(catalog, table);
}

std::vector<double> CatalogEmbeddings::vector_for(const std::string& item_id) const {
  const corpus::ItemRecord* rec = catalog_->find(item_id);
  if (rec && rec->embedding_ref) return table_->row(*rec->embedding_ref);
  return table_->vector_for(item_id);
}

namespace {

std::uint32_t byteswap32(std::uint32_t v) {
  return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
}

float from_le(std::uint32_t raw) {
  if constexpr (std::endian::native == std::endian::big) raw = byteswap32(raw);
  return std::bit_cast<float>(raw);
}

std::uint32_t to_le(float v) {
  std::uint32_t raw = std::bit_cast<std::uint32_t>(v);
  if constexpr (std::endian::native == std::endian::big) raw = byteswap32(raw);
  return raw;
}

}  // namespace

EmbeddingTable load_embedding_table(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw DataError("cannot open embedding manifest " + manifest_path.string());
  json m;
  try {
    m = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(manifest_path.string() + ": invalid JSON (" + e.what() + ")");
  }
  std::size_t count = 0;
  std::size_t dim = 0;
  std::string blob_name;
  std::unordered_map<std::string, std::size_t> ids;
  try {
    count = m.at("count").get<std::size_t>();
    dim = m.at("dim").get<std::size_t>();
    blob_name = m.at("blob").get<std::string>();
    for (auto& [id, row] : m.at("ids").items()) ids.emplace(id, row.get<std::size_t>());
  } catch (const json::exception& e) {
    throw DataError(manifest_path.string() + ": malformed manifest (" + e.what() + ")");
  }
  std::filesystem::path blob = blob_name;
  if (blob.is_relative()) blob = manifest_path.parent_path() / blob;
  std::ifstream bin(blob, std::ios::binary);
  if (!bin) throw DataError("cannot open embedding blob " + blob.string());
  bin.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(bin.tellg());
  bin.seekg(0);
  const std::size_t expected = count * dim * sizeof(float);
  if (bytes != expected) {
    throw DataError("embedding blob " + blob.string() + " holds " + std::to_string(bytes) + " bytes, manifest implies " +
                    std::to_string(expected));
  }
  std::vector<std::uint32_t> raw(count * dim);
  bin.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes));
  std::vector<float> rows(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) rows[i] = from_le(raw[i]);

  std::vector<std::string> row_owner(count);
  for (const auto& [id, row] : ids) {
    if (row >= count) throw DataError("embedding id " + id + " points past the last row");
    row_owner[row] = id;
  }
  for (std::size_t r = 0; r < count; ++r) {
    for (std::size_t c = 0; c < dim; ++c) {
      if (!std::isfinite(rows[r * dim + c])) {
        const std::string who = row_owner[r].empty() ? "row " + std::to_string(r) : "item " + row_owner[r];
        throw DataError("non-finite embedding value for " + who);
      }
    }
  }
  return EmbeddingTable(dim, std::move(rows), std::move(ids));
}

void save_embedding_table(const EmbeddingTable& table, const std::filesystem::path& manifest_path) {
  std::filesystem::path blob = manifest_path;
  blob.replace_extension(".f32");
  json ids = json::object();
  for (const auto& [id, row] : table.index()) ids[id] = row;
  json m{{"count", table.row_count()}, {"dim", table.dim()}, {"blob", blob.filename().string()}, {"ids", ids}};
  {
    std::ofstream out(manifest_path);
    if (!out) throw DataError("cannot write " + manifest_path.string());
    out << m.dump() << '\n';
  }
  std::ofstream bout(blob, std::ios::binary);
  if (!bout) throw DataError("cannot write " + blob.string());
  for (float v : table.rows()) {
    const std::uint32_t raw = to_le(v);
    bout.write(reinterpret_cast<const char*>(&raw), sizeof raw);
  }
}

EmbeddingTable table_from_matrix(const Matrix& rows, const std::vector<std::string>& ids) {
  if (ids.size() != rows.rows) throw DataError("one id per embedding row required");
  std::vector<float> data(rows.data.begin(), rows.data.end());
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < ids.size(); ++i) index.emplace(ids[i], i);
  return EmbeddingTable(rows.cols, std::move(data), std::move(index));
}

void check_catalog_refs(const corpus::ItemCatalog& catalog, const EmbeddingTable& table) {
  for (const corpus::ItemRecord& r : catalog.items()) {
    if (r.embedding_ref && *r.embedding_ref >= table.row_count())
      throw DataError("catalog item " + r.item_id + " embedding_ref " + std::to_string(*r.embedding_ref) + " does not resolve");
  }
}

ProjectionParams init_projection(std::size_t input_dim, std::size_t output_dim, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(input_dim + output_dim));
  std::uniform_real_distribution<double> u(-limit, limit);
  ProjectionParams p{Matrix(output_dim, input_dim), Matrix(1, output_dim)};
  for (double& w : p.weight.data) w = u(rng);
  return p;
}

std::vector<double> project(std::span<const double> input, const ProjectionParams& params) {
  if (input.size() != params.input_dim()) {
    throw DataError("projection expects input dimension " + std::to_string(params.input_dim()) + ", got " +
                    std::to_string(input.size()));
  }
  if (params.bias.cols != params.output_dim()) throw DataError("projection bias does not match weight rows");
  std::vector<double> out(params.output_dim());
  for (std::size_t r = 0; r < out.size(); ++r) {
    double s = params.bias.data[r];
    for (std::size_t c = 0; c < input.size(); ++c) s += params.weight(r, c) * input[c];
    out[r] = s;
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string text_hash(const std::string& text) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw DataError("sha256 failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

RemoteEncoder::RemoteEncoder(RemoteEncoderConfig config) : config_(std::move(config)) {
  if (config_.max_batch == 0) throw ConfigError("encoder max_batch must be positive");
  if (!config_.cache_dir.empty()) std::filesystem::create_directories(config_.cache_dir);
}

void RemoteEncoder::check_dim(std::size_t d) {
  if (d == 0) throw DataError("encoder returned an empty vector");
  if (dim_ == 0) dim_ = d;
  if (d != dim_) {
    throw DataError("encoder dimension drift: expected " + std::to_string(dim_) + ", got " + std::to_string(d));
  }
}

bool RemoteEncoder::cache_read(const std::string& key, std::vector<double>& out) const {
  if (auto it = memory_cache_.find(key); it != memory_cache_.end()) {
    out = it->second;
    return true;
  }
  if (config_.cache_dir.empty()) return false;
  std::ifstream in(config_.cache_dir / (key + ".json"));
  if (!in) return false;
  try {
    out = json::parse(in).get<std::vector<double>>();
  } catch (const json::exception&) {
    return false;
  }
  return true;
}

void RemoteEncoder::cache_write(const std::string& key, const std::vector<double>& v) {
  std::lock_guard lock(cache_mutex_);
  memory_cache_[key] = v;
  if (config_.cache_dir.empty()) return;
  const std::filesystem::path final_path = config_.cache_dir / (key + ".json");
  const std::filesystem::path tmp = config_.cache_dir / (key + ".json.tmp");
  {
    std::ofstream out(tmp);
    out << json(v).dump();
  }
  std::filesystem::rename(tmp, final_path);
}

std::vector<std::vector<double>> RemoteEncoder::post_batch(const std::vector<std::string>& texts) {
  httplib::Client client(config_.host, config_.port);
  client.set_connection_timeout(config_.timeout);
  client.set_read_timeout(config_.timeout);
  const std::string body = json{{"texts", texts}}.dump();
  auto backoff = config_.initial_backoff;
  std::string last_error;
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
    ++requests_;
    auto res = client.Post(config_.path, body, "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) throw DataError("encoder rejected request with HTTP " + std::to_string(res->status));
    std::vector<std::vector<double>> vectors;
    try {
      vectors = json::parse(res->body).at("vectors").get<std::vector<std::vector<double>>>();
    } catch (const json::exception& e) {
      throw DataError(std::string("malformed encoder response: ") + e.what());
    }
    if (vectors.size() != texts.size()) {
      throw DataError("encoder returned " + std::to_string(vectors.size()) + " vectors for " + std::to_string(texts.size()) +
                      " texts");
    }
    return vectors;
  }
  throw DataError("encoder unreachable after " + std::to_string(config_.max_retries + 1) + " attempts: " + last_error);
}

std::vector<std::vector<double>> RemoteEncoder::encode(const std::vector<std::string>& texts) {
  std::vector<std::vector<double>> out(texts.size());
  std::vector<std::string> keys(texts.size());
  std::vector<std::size_t> missing;
  std::unordered_map<std::string, std::size_t> first_missing;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    keys[i] = text_hash(texts[i]);
    if (cache_read(keys[i], out[i])) {
      check_dim(out[i].size());
    } else if (!first_missing.contains(keys[i])) {
      first_missing.emplace(keys[i], i);
      missing.push_back(i);
    }
  }
  for (std::size_t b = 0; b < missing.size(); b += config_.max_batch) {
    const std::size_t e = std::min(missing.size(), b + config_.max_batch);
    std::vector<std::string> batch;
    for (std::size_t k = b; k < e; ++k) batch.push_back(texts[missing[k]]);
    std::vector<std::vector<double>> vecs = post_batch(batch);
    for (std::size_t k = b; k < e; ++k) {
      std::vector<double>& v = vecs[k - b];
      check_dim(v.size());
      for (double x : v)
        if (!std::isfinite(x)) throw DataError("encoder returned a non-finite value");
      cache_write(keys[missing[k]], v);
      out[missing[k]] = std::move(v);
    }
  }
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (out[i].empty()) out[i] = out[first_missing.at(keys[i])];
  }
  return out;
}

}  // namespace prerec::embedding
