#include <bit>
#include <cstring>
#include <fstream>

#include "prerec/embedding.hpp"
#include "prerec/error.hpp"
#include "prerec/training.hpp"

namespace prerec::training {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'P', 'R', 'E', 'R', 'E', 'C', 'C', 'K'};

nlohmann::json slot_json(const model::DomainSlot& s) {
  return {{"id", s.id},
          {"item_count", s.item_count},
          {"interval_count", s.interval_count},
          {"user_count", s.user_count},
          {"item_base", s.item_base},
          {"z_base", s.z_base},
          {"user_base", s.user_base}};
}

nlohmann::json config_json(const Checkpoint& c) {
  return {{"model", model::to_json(c.model.config())}, {"train", to_json(c.train)}};
}

void write_matrix(std::ofstream& f, const Matrix& m) {
  f.write(reinterpret_cast<const char*>(m.data.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}

void read_matrix(std::ifstream& f, Matrix& m, const std::string& name, const std::filesystem::path& path) {
  f.read(reinterpret_cast<char*>(m.data.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (!f) throw DataError(path.string() + ": truncated tensor data for " + name);
}

}  // namespace

std::string fingerprint(const nlohmann::json& j) { return embedding::text_hash(j.dump()).substr(0, 16); }

std::string checkpoint_fingerprint(const Checkpoint& c) { return fingerprint(config_json(c)); }

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  nlohmann::json h;
  h["config"] = config_json(c);
  h["fingerprint"] = checkpoint_fingerprint(c);
  h["domains"] = nlohmann::json::array();
  for (const model::DomainSlot& s : c.model.domains()) h["domains"].push_back(slot_json(s));
  std::vector<std::pair<std::string, const Matrix*>> tensors;
  h["tensors"] = nlohmann::json::array();
  for (const ag::Param* p : c.model.parameters()) {
    h["tensors"].push_back({{"name", p->name}, {"rows", p->value.rows}, {"cols", p->value.cols}, {"decay", p->decay}});
    tensors.emplace_back(p->name, &p->value);
  }
  h["optimizer"] = {{"steps", c.optimizer.steps()}, {"tensors", nlohmann::json::array()}};
  for (const auto& [name, mom] : c.optimizer.state()) {
    for (const auto& [prefix, mat] : {std::pair{"adam.m/", &mom.m}, std::pair{"adam.v/", &mom.v}}) {
      h["optimizer"]["tensors"].push_back({{"name", prefix + name}, {"rows", mat->rows}, {"cols", mat->cols}});
      tensors.emplace_back(prefix + name, mat);
    }
  }
  h["epoch"] = c.epoch;
  h["best_metric"] = c.best_metric;
  h["history"] = nlohmann::json::array();
  for (const EpochLog& e : c.history) h["history"].push_back(to_json(e));
  if (c.aborted) h["aborted"] = *c.aborted;

  const std::string header = h.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw DataError("cannot write checkpoint " + path.string());
    f.write(kMagic, sizeof kMagic);
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = header.size();
    f.write(reinterpret_cast<const char*>(&version), sizeof version);
    f.write(reinterpret_cast<const char*>(&len), sizeof len);
    f.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& [name, m] : tensors) write_matrix(f, *m);
    if (!f) throw DataError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  f.read(magic, sizeof magic);
  if (!f || std::memcmp(magic, kMagic, sizeof magic) != 0) throw DataError(path.string() + " is not a checkpoint");
  f.read(reinterpret_cast<char*>(&version), sizeof version);
  f.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!f) throw DataError(path.string() + ": truncated checkpoint header");
  if (version != kCheckpointVersion) {
    throw ConfigError(path.string() + ": checkpoint version " + std::to_string(version) + ", expected " +
                      std::to_string(kCheckpointVersion));
  }
  if (len > (1ULL << 32)) throw DataError(path.string() + ": implausible header length");
  std::string header(len, '\0');
  f.read(header.data(), static_cast<std::streamsize>(len));
  if (!f) throw DataError(path.string() + ": truncated checkpoint header");

  nlohmann::json h;
  try {
    h = nlohmann::json::parse(header);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path.string() + ": corrupt header: " + e.what());
  }
  try {
    Checkpoint c(model::model_config_from_json(h.at("config").at("model")));
    c.train = train_config_from_json(h.at("config").at("train"));
    if (h.at("fingerprint").get<std::string>() != checkpoint_fingerprint(c))
      throw ConfigError(path.string() + ": config fingerprint mismatch");
    std::vector<model::DomainSlot> slots;
    for (const auto& s : h.at("domains")) {
      c.model.add_domain(s.at("id").get<std::string>(), s.at("item_count").get<std::size_t>(),
                         s.at("interval_count").get<std::size_t>(), s.at("user_count").get<std::size_t>());
    }
    for (std::size_t i = 0; i < c.model.domains().size(); ++i) {
      const auto& s = h["domains"][i];
      const model::DomainSlot& got = c.model.domains()[i];
      if (got.item_base != s.at("item_base").get<std::size_t>() || got.z_base != s.at("z_base").get<std::size_t>() ||
          got.user_base != s.at("user_base").get<std::size_t>())
        throw DataError(path.string() + ": domain layout of " + got.id + " does not match");
    }
    for (const auto& t : h.at("tensors")) {
      const std::string name = t.at("name").get<std::string>();
      ag::Param& p = c.model.param(name);
      if (p.value.rows != t.at("rows").get<std::size_t>() || p.value.cols != t.at("cols").get<std::size_t>())
        throw DataError(path.string() + ": tensor " + name + " has an unexpected shape");
      read_matrix(f, p.value, name, path);
      p.decay = t.value("decay", p.decay);
    }
    c.optimizer = Adam(c.train);
    c.optimizer.set_steps(h.at("optimizer").at("steps").get<std::uint64_t>());
    for (const auto& t : h.at("optimizer").at("tensors")) {
      const std::string name = t.at("name").get<std::string>();
      Matrix m(t.at("rows").get<std::size_t>(), t.at("cols").get<std::size_t>());
      read_matrix(f, m, name, path);
      if (name.rfind("adam.m/", 0) == 0) {
        c.optimizer.state()[name.substr(7)].m = std::move(m);
      } else if (name.rfind("adam.v/", 0) == 0) {
        c.optimizer.state()[name.substr(7)].v = std::move(m);
      } else {
        throw DataError(path.string() + ": unknown optimizer tensor " + name);
      }
    }
    c.epoch = h.at("epoch").get<std::size_t>();
    c.best_metric = h.at("best_metric").get<double>();
    for (const auto& e : h.at("history")) c.history.push_back(epoch_log_from_json(e));
    if (h.contains("aborted")) c.aborted = h["aborted"].get<std::string>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": malformed checkpoint header: " + e.what());
  }
}

}  // namespace prerec::training
