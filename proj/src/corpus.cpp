#include "prerec/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "prerec/error.hpp"

namespace prerec::corpus {

using nlohmann::json;

InteractionLog::InteractionLog(std::vector<Interaction> rows) : rows_(std::move(rows)) {
  std::map<std::pair<std::string, std::string>, std::size_t> slot;
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    const Interaction& r = rows_[i];
    if (r.timestamp < 0) throw DataError("row " + std::to_string(i + 1) + ": negative timestamp");
    auto key = std::make_pair(r.domain_id, r.user_id);
    auto [it, inserted] = slot.emplace(key, sequences_.size());
    if (inserted) sequences_.push_back(UserSequence{r.user_id, r.domain_id, {}});
    sequences_[it->second].events.push_back(i);
  }
  for (UserSequence& s : sequences_) {
    std::stable_sort(s.events.begin(), s.events.end(),
                     [this](std::size_t a, std::size_t b) { return rows_[a].timestamp < rows_[b].timestamp; });
  }
}

std::vector<std::string> InteractionLog::domains() const {
  std::set<std::string> ds;
  for (const Interaction& r : rows_) ds.insert(r.domain_id);
  return {ds.begin(), ds.end()};
}

InteractionLog InteractionLog::domain(const std::string& domain_id) const {
  std::vector<Interaction> out;
  for (const Interaction& r : rows_)
    if (r.domain_id == domain_id) out.push_back(r);
  return InteractionLog(std::move(out));
}

std::int64_t InteractionLog::min_timestamp() const {
  if (rows_.empty()) throw DataError("empty interaction log has no time range");
  return std::min_element(rows_.begin(), rows_.end(), [](auto& a, auto& b) { return a.timestamp < b.timestamp; })
      ->timestamp;
}

std::int64_t InteractionLog::max_timestamp() const {
  if (rows_.empty()) throw DataError("empty interaction log has no time range");
  return std::max_element(rows_.begin(), rows_.end(), [](auto& a, auto& b) { return a.timestamp < b.timestamp; })
      ->timestamp;
}

Format parse_format(const std::string& name) {
  if (name == "csv") return Format::kCsv;
  if (name == "jsonl") return Format::kJsonl;
  throw DataError("unknown interaction format '" + name + "' (expected csv or jsonl)");
}

Format format_from_path(const std::filesystem::path& path) {
  const std::string ext = path.extension().string();
  if (ext == ".csv") return Format::kCsv;
  if (ext == ".jsonl" || ext == ".json") return Format::kJsonl;
  throw DataError("cannot infer interaction format from " + path.string());
}

namespace {

// Splits one CSV record; double-quoted fields may contain commas and "" escapes.
std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

std::int64_t parse_timestamp(const std::string& text, const std::string& where) {
  std::int64_t v = 0;
  const char* b = text.data();
  const char* e = b + text.size();
  auto [ptr, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || ptr != e || text.empty()) throw DataError(where + ": unparsable timestamp '" + text + "'");
  if (v < 0) throw DataError(where + ": negative timestamp");
  return v;
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

constexpr const char* kColumns[] = {"user_id", "item_id", "domain_id", "timestamp"};

InteractionLog load_csv(std::istream& in, const std::string& name) {
  std::string line;
  std::vector<Interaction> rows;
  if (!std::getline(in, line)) return InteractionLog{};
  strip_cr(line);
  const std::vector<std::string> header = split_csv(line);
  std::size_t col[4];
  for (std::size_t k = 0; k < 4; ++k) {
    auto it = std::find(header.begin(), header.end(), kColumns[k]);
    if (it == header.end()) throw DataError(name + ": header is missing column " + kColumns[k]);
    col[k] = static_cast<std::size_t>(it - header.begin());
  }
  std::size_t row = 0;
  while (std::getline(in, line)) {
    strip_cr(line);
    if (line.empty()) continue;
    ++row;
    const std::string where = name + ": row " + std::to_string(row);
    const std::vector<std::string> f = split_csv(line);
    for (std::size_t k = 0; k < 4; ++k) {
      if (col[k] >= f.size() || f[col[k]].empty()) throw DataError(where + ": missing column " + kColumns[k]);
    }
    rows.push_back(Interaction{f[col[0]], f[col[1]], f[col[2]], parse_timestamp(f[col[3]], where)});
  }
  return InteractionLog(std::move(rows));
}

std::string json_id(const json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) throw DataError(where + ": missing column " + key);
  if (it->is_string()) {
    if (it->get<std::string>().empty()) throw DataError(where + ": missing column " + key);
    return it->get<std::string>();
  }
  if (it->is_number_integer()) return std::to_string(it->get<std::int64_t>());
  throw DataError(where + ": column " + key + " must be a string");
}

InteractionLog load_jsonl(std::istream& in, const std::string& name) {
  std::string line;
  std::vector<Interaction> rows;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    strip_cr(line);
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    ++row;
    const std::string where = name + ": row " + std::to_string(row);
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(where + ": invalid JSON (" + e.what() + ")");
    }
    if (!obj.is_object()) throw DataError(where + ": expected a JSON object");
    Interaction r;
    r.user_id = json_id(obj, "user_id", where);
    r.item_id = json_id(obj, "item_id", where);
    r.domain_id = json_id(obj, "domain_id", where);
    auto ts = obj.find("timestamp");
    if (ts == obj.end()) throw DataError(where + ": missing column timestamp");
    if (ts->is_number_integer()) {
      r.timestamp = ts->get<std::int64_t>();
      if (r.timestamp < 0) throw DataError(where + ": negative timestamp");
    } else if (ts->is_string()) {
      r.timestamp = parse_timestamp(ts->get<std::string>(), where);
    } else {
      throw DataError(where + ": unparsable timestamp");
    }
    rows.push_back(std::move(r));
  }
  return InteractionLog(std::move(rows));
}

}  // namespace

InteractionLog load_interactions(const std::filesystem::path& path, Format format) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open interactions file " + path.string());
  return format == Format::kCsv ? load_csv(in, path.string()) : load_jsonl(in, path.string());
}

void save_interactions_csv(const InteractionLog& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "user_id,item_id,domain_id,timestamp\n";
  for (const Interaction& r : log.rows()) {
    out << csv_escape(r.user_id) << ',' << csv_escape(r.item_id) << ',' << csv_escape(r.domain_id) << ','
        << r.timestamp << '\n';
  }
}

// ---------------------------------------------------------------------------

ItemCatalog::ItemCatalog(std::vector<ItemRecord> items) : items_(std::move(items)) {
  for (std::size_t i = 0; i < items_.size(); ++i) {
    const ItemRecord& r = items_[i];
    if (!r.text && !r.embedding_ref) throw DataError("catalog item " + r.item_id + " has neither text nor embedding_ref");
    if (!index_.emplace(r.item_id, i).second) throw DataError("duplicate catalog item " + r.item_id);
  }
}

const ItemRecord* ItemCatalog::find(const std::string& item_id) const {
  auto it = index_.find(item_id);
  return it == index_.end() ? nullptr : &items_[it->second];
}

std::vector<std::string> ItemCatalog::domain_items(const std::string& domain_id) const {
  std::vector<std::string> ids;
  for (const ItemRecord& r : items_)
    if (r.domain_id == domain_id) ids.push_back(r.item_id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<std::string> ItemCatalog::domains() const {
  std::set<std::string> ds;
  for (const ItemRecord& r : items_) ds.insert(r.domain_id);
  return {ds.begin(), ds.end()};
}

ItemCatalog load_catalog(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open catalog file " + path.string());
  std::vector<ItemRecord> items;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    strip_cr(line);
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    ++row;
    const std::string where = path.string() + ": row " + std::to_string(row);
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(where + ": invalid JSON (" + e.what() + ")");
    }
    ItemRecord r;
    r.item_id = json_id(obj, "item_id", where);
    r.domain_id = json_id(obj, "domain_id", where);
    if (auto t = obj.find("text"); t != obj.end() && t->is_string()) r.text = t->get<std::string>();
    if (auto e = obj.find("embedding_ref"); e != obj.end() && !e->is_null()) {
      if (!e->is_number_unsigned() && !e->is_number_integer()) throw DataError(where + ": embedding_ref must be an integer");
      if (e->get<std::int64_t>() < 0) throw DataError(where + ": negative embedding_ref");
      r.embedding_ref = e->get<std::size_t>();
    }
    items.push_back(std::move(r));
  }
  try {
    return ItemCatalog(std::move(items));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void save_catalog(const ItemCatalog& catalog, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const ItemRecord& r : catalog.items()) {
    json obj{{"item_id", r.item_id}, {"domain_id", r.domain_id}};
    if (r.text) obj["text"] = *r.text;
    if (r.embedding_ref) obj["embedding_ref"] = *r.embedding_ref;
    out << obj.dump() << '\n';
  }
}

std::vector<DomainMeta> domain_meta(const InteractionLog& log, const ItemCatalog& catalog) {
  std::map<std::string, DomainMeta> metas;
  for (const std::string& d : catalog.domains()) metas[d] = DomainMeta{d, catalog.domain_items(d).size(), 0};
  for (const UserSequence& s : log.sequences()) {
    DomainMeta& m = metas[s.domain_id];
    m.domain_id = s.domain_id;
    ++m.user_count;
  }
  std::vector<DomainMeta> out;
  for (auto& [_, m] : metas) out.push_back(m);
  return out;
}

// ---------------------------------------------------------------------------

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain:
      return "train";
    case Split::kValidation:
      return "validation";
    case Split::kTest:
      return "test";
  }
  return "?";
}

std::string split_key(const std::string& domain_id, const std::string& user_id) {
  return domain_id + '\x1f' + user_id;
}

std::size_t SplitAssignment::count(Split s) const {
  return static_cast<std::size_t>(std::count_if(users.begin(), users.end(), [s](auto& kv) { return kv.second == s; }));
}

std::optional<Split> SplitAssignment::lookup(const std::string& domain_id, const std::string& user_id) const {
  auto it = users.find(per_domain ? split_key(domain_id, user_id) : user_id);
  if (it == users.end()) return std::nullopt;
  return it->second;
}

namespace {

void check_ratios(double a, double b, double c) {
  if (a < 0 || b < 0 || c < 0 || !(a + b + c > 0)) throw ConfigError("split ratios must be non-negative with a positive sum");
}

void assign_proportionally(std::vector<std::string> keys, double a, double b, double c, std::mt19937_64& rng,
                           std::map<std::string, Split>& out) {
  std::shuffle(keys.begin(), keys.end(), rng);
  const double total = a + b + c;
  const auto n = static_cast<double>(keys.size());
  const auto n_train = static_cast<std::size_t>(std::llround(n * a / total));
  const auto n_train_val = std::max(n_train, static_cast<std::size_t>(std::llround(n * (a + b) / total)));
  for (std::size_t i = 0; i < keys.size(); ++i) {
    out[keys[i]] = i < n_train ? Split::kTrain : (i < n_train_val ? Split::kValidation : Split::kTest);
  }
}

}  // namespace

SplitAssignment split_users(const InteractionLog& log, double train, double validation, double test,
                            std::uint64_t seed) {
  check_ratios(train, validation, test);
  std::set<std::string> ids;
  for (const Interaction& r : log.rows()) ids.insert(r.user_id);
  if (ids.empty()) throw DataError("split_users: no users to split");
  SplitAssignment s;
  s.seed = seed;
  std::mt19937_64 rng(seed);
  assign_proportionally({ids.begin(), ids.end()}, train, validation, test, rng, s.users);
  return s;
}

SplitAssignment split_users_per_domain(const InteractionLog& log, double train, double validation, double test,
                                       std::uint64_t seed) {
  check_ratios(train, validation, test);
  std::map<std::string, std::set<std::string>> by_domain;
  for (const Interaction& r : log.rows()) by_domain[r.domain_id].insert(r.user_id);
  if (by_domain.empty()) throw DataError("split_users: no users to split");
  SplitAssignment s;
  s.seed = seed;
  s.per_domain = true;
  std::mt19937_64 rng(seed);
  for (auto& [domain, users] : by_domain) {
    std::vector<std::string> keys;
    keys.reserve(users.size());
    for (const std::string& u : users) keys.push_back(split_key(domain, u));
    assign_proportionally(std::move(keys), train, validation, test, rng, s.users);
  }
  return s;
}

InteractionLog select_split(const InteractionLog& log, const SplitAssignment& split, Split which) {
  std::vector<Interaction> out;
  for (const Interaction& r : log.rows()) {
    auto s = split.lookup(r.domain_id, r.user_id);
    if (s && *s == which) out.push_back(r);
  }
  return InteractionLog(std::move(out));
}

InteractionLog filter_unseen(const InteractionLog& test_log, const std::vector<const InteractionLog*>& source_logs) {
  std::unordered_set<std::string> users;
  std::unordered_set<std::string> items;
  for (const InteractionLog* src : source_logs) {
    for (const Interaction& r : src->rows()) {
      users.insert(r.user_id);
      items.insert(r.item_id);
    }
  }
  std::vector<Interaction> out;
  for (const Interaction& r : test_log.rows()) {
    if (!users.contains(r.user_id) && !items.contains(r.item_id)) out.push_back(r);
  }
  return InteractionLog(std::move(out));
}

// ---------------------------------------------------------------------------

std::size_t DomainData::event_count(std::size_t min_history) const {
  std::size_t n = 0;
  for (const IndexedSequence& u : users)
    if (u.items.size() > min_history) n += u.items.size() - min_history;
  return n;
}

DomainData build_domain(const std::string& domain_id, const InteractionLog& log, const ItemCatalog& catalog,
                        const EmbeddingLookup& embeddings, std::size_t min_length, std::size_t* dropped) {
  DomainData d;
  d.domain_id = domain_id;
  d.item_ids = catalog.domain_items(domain_id);
  if (d.item_ids.empty()) throw DataError("domain " + domain_id + " has no catalog items");
  d.content = Matrix(d.item_ids.size(), embeddings.dim());
  for (std::size_t i = 0; i < d.item_ids.size(); ++i) {
    d.item_index.emplace(d.item_ids[i], i);
    const std::vector<double> v = embeddings.vector_for(d.item_ids[i]);
    if (v.size() != embeddings.dim()) throw DataError("embedding dimension mismatch for item " + d.item_ids[i]);
    std::copy(v.begin(), v.end(), d.content.row_span(i).begin());
  }
  std::size_t short_users = 0;
  for (const UserSequence& s : log.sequences()) {
    if (s.domain_id != domain_id) continue;
    if (s.events.size() < min_length) {
      ++short_users;
      continue;
    }
    IndexedSequence seq;
    seq.user_id = s.user_id;
    for (std::size_t e : s.events) {
      const Interaction& r = log.rows()[e];
      auto it = d.item_index.find(r.item_id);
      if (it == d.item_index.end()) {
        throw DataError("interaction references item " + r.item_id + " missing from domain " + domain_id + " catalog");
      }
      seq.items.push_back(it->second);
      seq.timestamps.push_back(r.timestamp);
    }
    d.users.push_back(std::move(seq));
  }
  if (dropped) *dropped = short_users;
  return d;
}

}  // namespace prerec::corpus
