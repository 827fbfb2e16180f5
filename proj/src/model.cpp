#include "prerec/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <tuple>

#include "prerec/embedding.hpp"
#include "prerec/error.hpp"
#include "prerec/kernels.hpp"

namespace prerec::model {

using nlohmann::json;

EncoderKind parse_encoder(const std::string& name) {
  if (name == "transformer") return EncoderKind::kTransformer;
  if (name == "gru") return EncoderKind::kGru;
  throw ConfigError("unknown encoder '" + name + "' (expected transformer or gru)");
}

const char* encoder_name(EncoderKind kind) { return kind == EncoderKind::kTransformer ? "transformer" : "gru"; }

void ModelConfig::validate() const {
  if (input_dim == 0) throw ConfigError("model input_dim must be positive");
  if (dim == 0) throw ConfigError("model dim must be positive");
  if (layers == 0) throw ConfigError("model layers must be positive");
  if (heads == 0 || dim % heads != 0) throw ConfigError("attention heads must divide the model dim");
  if (max_len == 0) throw ConfigError("max_len must be positive");
  if (ffn_mult == 0) throw ConfigError("ffn_mult must be positive");
  for (double l : {lambda_u, lambda_v, lambda_d, lambda_z})
    if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("regularization weights must be finite and non-negative");
  if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
}

json to_json(const ModelConfig& c) {
  return json{{"input_dim", c.input_dim},
              {"dim", c.dim},
              {"layers", c.layers},
              {"heads", c.heads},
              {"max_len", c.max_len},
              {"ffn_mult", c.ffn_mult},
              {"encoder", encoder_name(c.encoder)},
              {"use_domain", c.use_domain},
              {"use_popularity", c.use_popularity},
              {"item_offsets", c.item_offsets},
              {"z_offsets", c.z_offsets},
              {"user_offsets", c.user_offsets},
              {"lambda_u", c.lambda_u},
              {"lambda_v", c.lambda_v},
              {"lambda_d", c.lambda_d},
              {"lambda_z", c.lambda_z},
              {"pop_activation", popularity::activation_name(c.pop_activation)},
              {"negatives", c.negatives},
              {"init_std", c.init_std},
              {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.input_dim = j.value("input_dim", c.input_dim);
    c.dim = j.value("dim", c.dim);
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.max_len = j.value("max_len", c.max_len);
    c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
    c.encoder = parse_encoder(j.value("encoder", std::string(encoder_name(c.encoder))));
    c.use_domain = j.value("use_domain", c.use_domain);
    c.use_popularity = j.value("use_popularity", c.use_popularity);
    c.item_offsets = j.value("item_offsets", c.item_offsets);
    c.z_offsets = j.value("z_offsets", c.z_offsets);
    c.user_offsets = j.value("user_offsets", c.user_offsets);
    c.lambda_u = j.value("lambda_u", c.lambda_u);
    c.lambda_v = j.value("lambda_v", c.lambda_v);
    c.lambda_d = j.value("lambda_d", c.lambda_d);
    c.lambda_z = j.value("lambda_z", c.lambda_z);
    c.pop_activation =
        popularity::parse_activation(j.value("pop_activation", std::string(popularity::activation_name(c.pop_activation))));
    c.negatives = j.value("negatives", c.negatives);
    c.init_std = j.value("init_std", c.init_std);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad model config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  init_network();
}

Model::Model(const Model& other) : config_(other.config_), domains_(other.domains_), by_name_(other.by_name_) {
  params_.reserve(other.params_.size());
  for (const auto& p : other.params_) params_.push_back(std::make_unique<ag::Param>(*p));
}

Model& Model::operator=(const Model& other) {
  if (this != &other) {
    Model copy(other);
    config_ = std::move(copy.config_);
    domains_ = std::move(copy.domains_);
    params_ = std::move(copy.params_);
    by_name_ = std::move(copy.by_name_);
  }
  return *this;
}

ag::Param& Model::add_param(std::string name, Matrix value, bool decay) {
  by_name_.emplace(name, params_.size());
  params_.push_back(std::make_unique<ag::Param>(std::move(name), std::move(value), decay));
  return *params_.back();
}

void Model::init_network() {
  std::mt19937_64 rng(config_.seed);
  std::normal_distribution<double> normal(0.0, config_.init_std);
  auto gaussian = [&](std::size_t r, std::size_t c) {
    Matrix m(r, c);
    for (double& x : m.data) x = normal(rng);
    return m;
  };
  const std::size_t b = config_.dim;

  embedding::ProjectionParams proj = embedding::init_projection(config_.input_dim, b, rng);
  add_param("proj.w", std::move(proj.weight), true);
  add_param("proj.b", std::move(proj.bias), false);

  embedding::ProjectionParams pop = embedding::init_projection(popularity::kFactorDim, b, rng);
  // Stored 4 x B so that Z = F * W + b.
  Matrix pop_w(popularity::kFactorDim, b);
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t c = 0; c < popularity::kFactorDim; ++c) pop_w(c, r) = pop.weight(r, c);
  add_param("pop.w", std::move(pop_w), true);
  add_param("pop.b", Matrix(1, b), false);
  add_param("score.wz", gaussian(1, b), true);
  add_param("score.wd", gaussian(1, b), true);
  add_param("prefix", gaussian(1, b), true);

  if (config_.encoder == EncoderKind::kTransformer) {
    add_param("pos", gaussian(config_.max_len + 1, b), true);
    const std::size_t hidden = config_.ffn_mult * b;
    for (std::size_t l = 0; l < config_.layers; ++l) {
      const std::string p = "enc" + std::to_string(l) + ".";
      add_param(p + "ln1.g", Matrix(1, b, 1.0), false);
      add_param(p + "ln1.b", Matrix(1, b), false);
      add_param(p + "wq", gaussian(b, b), true);
      add_param(p + "wk", gaussian(b, b), true);
      add_param(p + "wv", gaussian(b, b), true);
      add_param(p + "wo", gaussian(b, b), true);
      add_param(p + "ln2.g", Matrix(1, b, 1.0), false);
      add_param(p + "ln2.b", Matrix(1, b), false);
      add_param(p + "w1", gaussian(b, hidden), true);
      add_param(p + "b1", Matrix(1, hidden), false);
      add_param(p + "w2", gaussian(hidden, b), true);
      add_param(p + "b2", Matrix(1, b), false);
    }
    add_param("enc.lnf.g", Matrix(1, b, 1.0), false);
    add_param("enc.lnf.b", Matrix(1, b), false);
  } else {
    for (std::size_t l = 0; l < config_.layers; ++l) {
      const std::string p = "gru" + std::to_string(l) + ".";
      add_param(p + "wx", gaussian(b, 3 * b), true);
      add_param(p + "wh", gaussian(b, 3 * b), true);
      add_param(p + "bx", Matrix(1, 3 * b), false);
      add_param(p + "bh", Matrix(1, 3 * b), false);
    }
  }

  add_param("domain", Matrix(0, b), false);
  add_param("item_offset", Matrix(0, b), false);
  add_param("z_offset", Matrix(0, b), false);
  add_param("user_offset", Matrix(0, b), false);
}

namespace {

void append_rows(ag::Param& p, std::size_t n) {
  p.value.data.resize(p.value.data.size() + n * p.value.cols, 0.0);
  p.value.rows += n;
  p.grad = Matrix(p.value.rows, p.value.cols);
}

}  // namespace

std::size_t Model::add_domain(const std::string& id, std::size_t items, std::size_t intervals, std::size_t users) {
  if (find_domain(id)) throw ConfigError("domain " + id + " is already registered in the model");
  if (items == 0) throw DataError("domain " + id + " has no items");
  DomainSlot s;
  s.id = id;
  s.item_count = items;
  s.interval_count = std::max<std::size_t>(intervals, 1);
  s.user_count = users;
  s.item_base = param("item_offset").value.rows;
  s.z_base = param("z_offset").value.rows;
  s.user_base = param("user_offset").value.rows;
  append_rows(param("domain"), 1);
  append_rows(param("item_offset"), items);
  if (config_.z_offsets) append_rows(param("z_offset"), items * s.interval_count);
  if (config_.user_offsets) append_rows(param("user_offset"), users);
  domains_.push_back(std::move(s));
  return domains_.size() - 1;
}

std::optional<std::size_t> Model::find_domain(const std::string& id) const {
  for (std::size_t i = 0; i < domains_.size(); ++i)
    if (domains_[i].id == id) return i;
  return std::nullopt;
}

std::vector<ag::Param*> Model::parameters() {
  std::vector<ag::Param*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const ag::Param*> Model::parameters() const {
  std::vector<const ag::Param*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

ag::Param& Model::param(const std::string& name) {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw DataError("model has no parameter " + name);
  return *params_[it->second];
}

const ag::Param& Model::param(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw DataError("model has no parameter " + name);
  return *params_[it->second];
}

void Model::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

// ---------------------------------------------------------------------------

const Matrix& DomainView::factors_at(std::int64_t interval) const {
  if (!factors || factors->empty()) throw DataError("domain view has no popularity factors");
  const auto last = static_cast<std::int64_t>(factors->size()) - 1;
  return (*factors)[static_cast<std::size_t>(std::clamp<std::int64_t>(interval, 0, last))];
}

std::vector<Matrix> build_factor_table(const popularity::DomainCounts& counts, std::span<const std::string> item_ids) {
  std::vector<Matrix> out;
  for (std::size_t l = 0; l <= counts.counts.size(); ++l)
    out.push_back(popularity::factor_matrix(counts, item_ids, static_cast<std::int64_t>(l)));
  out.emplace_back(item_ids.size(), popularity::kFactorDim);
  return out;
}

namespace {

std::size_t clamp_interval(const DomainView& d, std::int64_t interval) {
  const auto last = static_cast<std::int64_t>(d.factors->size()) - 1;
  return static_cast<std::size_t>(std::clamp<std::int64_t>(interval, 0, last));
}

ag::Var project_rows(Model& model, ag::Tape& tape, Matrix content) {
  ag::Var c = tape.constant(std::move(content));
  return ag::add_row(ag::matmul_bt(c, tape.param(model.param("proj.w"))), tape.param(model.param("proj.b")));
}

ag::Var transformer(Model& model, ag::Tape& tape, ag::Var x, std::span<const std::size_t> starts) {
  const ModelConfig& cfg = model.config();
  auto p = [&](const std::string& name) { return tape.param(model.param(name)); };
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string n = "enc" + std::to_string(l) + ".";
    ag::Var h = ag::layer_norm(x, p(n + "ln1.g"), p(n + "ln1.b"));
    ag::Var q = ag::matmul(h, p(n + "wq"));
    ag::Var k = ag::matmul(h, p(n + "wk"));
    ag::Var v = ag::matmul(h, p(n + "wv"));
    ag::Var att = ag::segmented_causal_attention(q, k, v, starts, cfg.heads);
    x = ag::add(x, ag::matmul(att, p(n + "wo")));
    ag::Var f = ag::layer_norm(x, p(n + "ln2.g"), p(n + "ln2.b"));
    f = ag::gelu(ag::add_row(ag::matmul(f, p(n + "w1")), p(n + "b1")));
    f = ag::add_row(ag::matmul(f, p(n + "w2")), p(n + "b2"));
    x = ag::add(x, f);
  }
  return ag::layer_norm(x, p("enc.lnf.g"), p("enc.lnf.b"));
}

// Sequences are left-aligned and stepped together; rows past a sequence's end
// repeat its last input and are never read back.
ag::Var gru(Model& model, ag::Tape& tape, ag::Var x, std::span<const std::size_t> starts) {
  const ModelConfig& cfg = model.config();
  const std::size_t b = cfg.dim;
  const std::size_t s_count = starts.size() - 1;
  std::size_t t_max = 0;
  for (std::size_t s = 0; s < s_count; ++s) t_max = std::max(t_max, starts[s + 1] - starts[s]);

  std::vector<ag::Var> inputs;
  for (std::size_t t = 0; t < t_max; ++t) {
    std::vector<std::size_t> idx(s_count);
    for (std::size_t s = 0; s < s_count; ++s) idx[s] = starts[s] + std::min(t, starts[s + 1] - starts[s] - 1);
    inputs.push_back(ag::gather_rows(x, idx));
  }
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string n = "gru" + std::to_string(l) + ".";
    ag::Var wx = tape.param(model.param(n + "wx"));
    ag::Var wh = tape.param(model.param(n + "wh"));
    ag::Var bx = tape.param(model.param(n + "bx"));
    ag::Var bh = tape.param(model.param(n + "bh"));
    ag::Var h = tape.constant(Matrix(s_count, b));
    for (std::size_t t = 0; t < t_max; ++t) {
      ag::Var gx = ag::add_row(ag::matmul(inputs[t], wx), bx);
      ag::Var gh = ag::add_row(ag::matmul(h, wh), bh);
      ag::Var z = ag::sigmoid(ag::add(ag::col_slice(gx, 0, b), ag::col_slice(gh, 0, b)));
      ag::Var r = ag::sigmoid(ag::add(ag::col_slice(gx, b, 2 * b), ag::col_slice(gh, b, 2 * b)));
      ag::Var cand = ag::tanh(ag::add(ag::col_slice(gx, 2 * b, 3 * b), ag::mul(r, ag::col_slice(gh, 2 * b, 3 * b))));
      // h = (1 - z) * cand + z * h
      h = ag::add(ag::mul(ag::affine(z, -1.0, 1.0), cand), ag::mul(z, h));
      inputs[t] = h;
    }
  }
  ag::Var stacked = ag::concat_rows(inputs);
  std::vector<std::size_t> idx(starts.back());
  for (std::size_t s = 0; s < s_count; ++s)
    for (std::size_t t = 0; t < starts[s + 1] - starts[s]; ++t) idx[starts[s] + t] = t * s_count + s;
  return ag::gather_rows(stacked, idx);
}

}  // namespace

Encoded encode_users(Model& model, ag::Tape& tape, std::span<const SequenceInput> seqs, Mode mode) {
  const ModelConfig& cfg = model.config();
  if (seqs.empty()) throw DataError("encode_users: no sequences");
  const std::size_t s_count = seqs.size();
  Encoded enc;
  std::size_t hist_total = 0;
  for (const SequenceInput& s : seqs) {
    if (s.history.size() > cfg.max_len) throw DataError("history longer than max_len; truncate before encoding");
    if (mode == Mode::kLearned && s.domain->slot == kNoSlot) throw DataError("learned mode needs a registered domain");
    enc.offsets.push_back(hist_total + enc.offsets.size());
    hist_total += s.history.size();
  }
  const std::size_t rows = hist_total + s_count;
  std::vector<std::size_t> starts(enc.offsets);
  starts.push_back(rows);

  ag::Var prefix;
  if (!cfg.use_domain) {
    std::vector<std::size_t> zero(s_count, 0);
    prefix = tape.gather_param_rows(model.param("prefix"), zero);
  } else if (mode == Mode::kZeroShot) {
    prefix = tape.constant(Matrix(s_count, cfg.dim));
  } else {
    std::vector<std::size_t> slots;
    for (const SequenceInput& s : seqs) slots.push_back(s.domain->slot);
    prefix = tape.gather_param_rows(model.param("domain"), slots);
  }

  ag::Var x = prefix;
  if (hist_total > 0) {
    Matrix hc(hist_total, cfg.input_dim);
    std::size_t r = 0;
    for (const SequenceInput& s : seqs) {
      for (std::size_t item : s.history) {
        if (item >= s.domain->item_count()) throw DataError("history item index out of range");
        auto src = s.domain->content->row_span(item);
        std::copy(src.begin(), src.end(), hc.row_span(r++).begin());
      }
    }
    ag::Var mh = project_rows(model, tape, std::move(hc));
    std::vector<std::size_t> idx(rows);
    std::size_t h = 0;
    for (std::size_t s = 0; s < s_count; ++s) {
      idx[starts[s]] = s;
      for (std::size_t t = 1; t < starts[s + 1] - starts[s]; ++t) idx[starts[s] + t] = s_count + h++;
    }
    std::vector<ag::Var> parts{prefix, mh};
    x = ag::gather_rows(ag::concat_rows(parts), idx);
  }

  if (cfg.encoder == EncoderKind::kTransformer) {
    std::vector<std::size_t> pos(rows);
    for (std::size_t s = 0; s < s_count; ++s)
      for (std::size_t t = 0; t < starts[s + 1] - starts[s]; ++t) pos[starts[s] + t] = t;
    x = ag::add(x, tape.gather_param_rows(model.param("pos"), pos));
    x = transformer(model, tape, x, starts);
  } else {
    x = gru(model, tape, x, starts);
  }

  if (cfg.user_offsets && mode == Mode::kLearned) {
    std::vector<std::size_t> users;
    std::vector<std::size_t> idx(rows);
    for (std::size_t s = 0; s < s_count; ++s) {
      const SequenceInput& in = seqs[s];
      std::size_t which = kNoSlot;
      if (in.user) {
        const DomainSlot& slot = model.domains()[in.domain->slot];
        if (*in.user >= slot.user_count) throw DataError("user offset row out of range");
        which = users.size();
        users.push_back(slot.user_base + *in.user);
      }
      for (std::size_t r = starts[s]; r < starts[s + 1]; ++r) idx[r] = which;
    }
    if (!users.empty()) {
      for (std::size_t& i : idx)
        if (i == kNoSlot) i = users.size();
      std::vector<ag::Var> parts{tape.gather_param_rows(model.param("user_offset"), users),
                                 tape.constant(Matrix(1, cfg.dim))};
      x = ag::add(x, ag::gather_rows(ag::concat_rows(parts), idx));
    }
  }
  enc.out = x;
  return enc;
}

Candidates candidate_latents(Model& model, ag::Tape& tape, std::span<const CandidateRef> refs, Mode mode) {
  const ModelConfig& cfg = model.config();
  const std::size_t n = refs.size();
  if (n == 0) throw DataError("empty candidate set");
  // Candidates repeat heavily within a batch; project each distinct item once.
  std::map<std::pair<const DomainView*, std::size_t>, std::size_t> unique_items;
  std::vector<std::size_t> item_row(n);
  for (std::size_t i = 0; i < n; ++i) {
    const CandidateRef& c = refs[i];
    if (c.item >= c.domain->item_count()) throw DataError("candidate item index out of range");
    if (mode == Mode::kLearned && c.domain->slot == kNoSlot) throw DataError("learned mode needs a registered domain");
    item_row[i] = unique_items.emplace(std::make_pair(c.domain, c.item), unique_items.size()).first->second;
  }
  Matrix content(unique_items.size(), cfg.input_dim);
  for (const auto& [key, row] : unique_items) {
    auto src = key.first->content->row_span(key.second);
    std::copy(src.begin(), src.end(), content.row_span(row).begin());
  }
  ag::Var v = project_rows(model, tape, std::move(content));
  if (unique_items.size() != n || n == 0) v = ag::gather_rows(v, item_row);
  std::optional<ag::Var> bias;

  if (cfg.use_popularity) {
    std::map<std::tuple<const DomainView*, std::size_t, std::size_t>, std::size_t> unique_f;
    std::vector<std::size_t> f_row(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto key = std::make_tuple(refs[i].domain, refs[i].item, clamp_interval(*refs[i].domain, refs[i].interval));
      f_row[i] = unique_f.emplace(key, unique_f.size()).first->second;
    }
    Matrix f(unique_f.size(), popularity::kFactorDim);
    for (const auto& [key, row] : unique_f) {
      auto src = (*std::get<0>(key)->factors)[std::get<2>(key)].row_span(std::get<1>(key));
      std::copy(src.begin(), src.end(), f.row_span(row).begin());
    }
    ag::Var z = ag::add_row(ag::matmul(tape.constant(std::move(f)), tape.param(model.param("pop.w"))),
                            tape.param(model.param("pop.b")));
    if (cfg.pop_activation == popularity::Activation::kTanh) z = ag::tanh(z);
    if (unique_f.size() != n) z = ag::gather_rows(z, f_row);
    if (cfg.z_offsets && mode == Mode::kLearned) {
      std::vector<std::size_t> rows(n);
      for (std::size_t i = 0; i < n; ++i) {
        const DomainSlot& s = model.domains()[refs[i].domain->slot];
        const std::size_t l = std::min(clamp_interval(*refs[i].domain, refs[i].interval), s.interval_count - 1);
        rows[i] = s.z_base + l * s.item_count + refs[i].item;
      }
      z = ag::add(z, tape.gather_param_rows(model.param("z_offset"), rows));
    }
    v = ag::add(v, z);
    bias = ag::matmul_bt(z, tape.param(model.param("score.wz")));
  }
  if (mode == Mode::kLearned) {
    if (cfg.use_domain) {
      std::vector<std::size_t> slots(n);
      for (std::size_t i = 0; i < n; ++i) slots[i] = refs[i].domain->slot;
      ag::Var d = tape.gather_param_rows(model.param("domain"), slots);
      v = ag::add(v, d);
      ag::Var dw = ag::matmul_bt(d, tape.param(model.param("score.wd")));
      bias = bias ? ag::add(*bias, dw) : dw;
    }
    if (cfg.item_offsets) {
      std::vector<std::size_t> rows(n);
      for (std::size_t i = 0; i < n; ++i) rows[i] = model.domains()[refs[i].domain->slot].item_base + refs[i].item;
      v = ag::add(v, tape.gather_param_rows(model.param("item_offset"), rows));
    }
  }
  if (!bias) bias = tape.constant(Matrix(n, 1));
  return Candidates{v, *bias};
}

std::vector<double> item_latent(std::span<const double> d, std::span<const double> z, std::span<const double> m,
                                std::span<const double> offset) {
  if (d.size() != m.size() || z.size() != m.size() || offset.size() != m.size())
    throw DataError("item_latent: dimension mismatch");
  std::vector<double> v(m.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = d[i] + z[i] + m[i] + offset[i];
  return v;
}

std::vector<double> score_logits(std::span<const double> u, const Matrix& v, std::span<const double> d,
                                 const Matrix& z, std::span<const double> w_d, std::span<const double> w_z) {
  if (v.rows == 0) throw DataError("score_logits: empty candidate set");
  if (v.cols != u.size() || z.rows != v.rows || z.cols != u.size() || d.size() != u.size() || w_d.size() != u.size() ||
      w_z.size() != u.size())
    throw DataError("score_logits: dimension mismatch");
  const double shift = kernels::dot(d.data(), w_d.data(), d.size());
  std::vector<double> out(v.rows);
  for (std::size_t j = 0; j < v.rows; ++j)
    out[j] = kernels::dot(u.data(), v.row_span(j).data(), u.size()) + shift +
             kernels::dot(z.row_span(j).data(), w_z.data(), u.size());
  return out;
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw DataError("softmax of an empty vector");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (double& x : p) x /= z;
  return p;
}

LossParts map_loss(Model& model, ag::Tape& tape, const Batch& batch) {
  const ModelConfig& cfg = model.config();
  if (batch.events.empty()) throw DataError("map_loss: empty batch");
  const std::size_t c = batch.events.front().candidates.size();
  if (c == 0) throw DataError("map_loss: event without candidates");

  Encoded enc = encode_users(model, tape, batch.sequences, Mode::kLearned);
  std::vector<std::size_t> urows;
  std::vector<CandidateRef> refs;
  for (const TrainingEvent& e : batch.events) {
    if (e.candidates.size() != c) throw DataError("map_loss: events need equal candidate counts");
    if (e.sequence >= batch.sequences.size()) throw DataError("map_loss: bad sequence index");
    const SequenceInput& s = batch.sequences[e.sequence];
    if (e.position > s.history.size()) throw DataError("map_loss: position past the sequence");
    urows.push_back(enc.offsets[e.sequence] + e.position);
    for (std::size_t item : e.candidates) refs.push_back(CandidateRef{s.domain, item, e.interval});
  }
  const std::size_t p = batch.events.size();
  ag::Var u = ag::gather_rows(enc.out, urows);
  Candidates cand = candidate_latents(model, tape, refs, Mode::kLearned);
  ag::Var logits = ag::add(ag::grouped_rowdot(u, cand.v), ag::reshape(cand.bias, p, c));
  std::vector<std::size_t> targets(p, 0);
  ag::Var nll = ag::cross_entropy(logits, targets);

  LossParts parts;
  parts.nll = nll.scalar();
  ag::Var total = nll;
  auto add_reg = [&](const char* table, const std::set<std::size_t>& rows, double lambda, double& out) {
    if (rows.empty()) return;
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    ag::Var r = ag::affine(ag::sum_squares(tape.gather_param_rows(model.param(table), idx)), 0.5 * lambda, 0.0);
    out = r.scalar();
    total = ag::add(total, r);
  };

  std::set<std::size_t> item_rows;
  std::set<std::size_t> z_rows;
  std::set<std::size_t> domain_rows;
  std::set<std::size_t> user_rows;
  for (const CandidateRef& r : refs) {
    const DomainSlot& s = model.domains()[r.domain->slot];
    item_rows.insert(s.item_base + r.item);
    domain_rows.insert(r.domain->slot);
    if (cfg.z_offsets && cfg.use_popularity) {
      const std::size_t l = std::min(clamp_interval(*r.domain, r.interval), s.interval_count - 1);
      z_rows.insert(s.z_base + l * s.item_count + r.item);
    }
  }
  if (cfg.user_offsets)
    for (const SequenceInput& s : batch.sequences)
      if (s.user) user_rows.insert(model.domains()[s.domain->slot].user_base + *s.user);

  if (cfg.item_offsets) add_reg("item_offset", item_rows, cfg.lambda_v, parts.reg_v);
  if (cfg.z_offsets && cfg.use_popularity) add_reg("z_offset", z_rows, cfg.lambda_z, parts.reg_z);
  if (cfg.user_offsets) add_reg("user_offset", user_rows, cfg.lambda_u, parts.reg_u);
  if (cfg.use_domain) add_reg("domain", domain_rows, cfg.lambda_d, parts.reg_d);
  parts.total = total;
  if (!std::isfinite(total.scalar())) {
    throw NumericalError("non-finite loss (nll " + std::to_string(parts.nll) + ", reg_v " + std::to_string(parts.reg_v) +
                         ", reg_z " + std::to_string(parts.reg_z) + ", reg_u " + std::to_string(parts.reg_u) +
                         ", reg_d " + std::to_string(parts.reg_d) + ")");
  }
  return parts;
}

Matrix score_catalog(Model& model, const DomainView& domain, std::span<const SequenceInput> seqs,
                     std::span<const EventQuery> events, Mode mode) {
  const std::size_t n = domain.item_count();
  Matrix out(events.size(), n);
  if (events.empty()) return out;
  ag::Tape tape(false);
  Encoded enc = encode_users(model, tape, seqs, mode);
  const Matrix& u = enc.out.value();
  const std::size_t b = model.config().dim;

  std::map<std::size_t, std::vector<std::size_t>> by_interval;
  for (std::size_t e = 0; e < events.size(); ++e) {
    if (events[e].sequence >= seqs.size() || seqs[events[e].sequence].domain != &domain)
      throw DataError("score_catalog: event does not belong to the scored domain");
    by_interval[clamp_interval(domain, events[e].interval)].push_back(e);
  }
  std::vector<CandidateRef> refs(n);
  for (const auto& [interval, list] : by_interval) {
    for (std::size_t j = 0; j < n; ++j) refs[j] = CandidateRef{&domain, j, static_cast<std::int64_t>(interval)};
    Candidates cand = candidate_latents(model, tape, refs, mode);
    const Matrix& v = cand.v.value();
    const Matrix& bias = cand.bias.value();
    for (std::size_t e : list) {
      const EventQuery& q = events[e];
      const double* urow = u.data.data() + (enc.offsets[q.sequence] + q.position) * b;
      double* row = out.data.data() + e * n;
      kernels::gemv(v.data.data(), n, b, urow, row);
      for (std::size_t j = 0; j < n; ++j) row[j] += bias.data[j];
    }
  }
  if (!out.all_finite()) throw NumericalError("non-finite scores");
  return out;
}

}  // namespace prerec::model
