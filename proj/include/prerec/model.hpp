#pragma once

#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "prerec/autograd.hpp"
#include "prerec/popularity.hpp"
#include "prerec/tensor.hpp"

namespace prerec::model {

enum class EncoderKind { kTransformer, kGru };
EncoderKind parse_encoder(const std::string& name);
const char* encoder_name(EncoderKind kind);

struct ModelConfig {
  std::size_t input_dim = 0;  // universal content vector width
  std::size_t dim = 256;      // B
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t max_len = 50;
  std::size_t ffn_mult = 4;
  EncoderKind encoder = EncoderKind::kTransformer;
  // D_k as prefix token, item shift and D.W_d logit term.
  bool use_domain = true;
  // Z_j in the item latent and Z.W_z logit term.
  bool use_popularity = true;
  bool item_offsets = true;
  bool z_offsets = false;
  bool user_offsets = false;
  double lambda_u = 0.0;
  double lambda_v = 100.0;
  double lambda_d = 0.3;
  double lambda_z = 100.0;
  popularity::Activation pop_activation = popularity::Activation::kTanh;
  std::size_t negatives = 255;
  double init_std = 0.02;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Row ranges one domain owns in the latent tables.
struct DomainSlot {
  std::string id;
  std::size_t item_count = 0;
  std::size_t interval_count = 0;
  std::size_t user_count = 0;
  std::size_t item_base = 0;
  std::size_t z_base = 0;  // row = z_base + interval * item_count + item
  std::size_t user_base = 0;
};

class Model {
 public:
  explicit Model(ModelConfig config);
  Model(const Model& other);
  Model& operator=(const Model& other);

  const ModelConfig& config() const { return config_; }

  // Appends zero-initialized latent rows (D_k at the prior mean, offsets at 0).
  std::size_t add_domain(const std::string& id, std::size_t items, std::size_t intervals, std::size_t users);
  std::optional<std::size_t> find_domain(const std::string& id) const;
  const std::vector<DomainSlot>& domains() const { return domains_; }

  std::vector<ag::Param*> parameters();
  std::vector<const ag::Param*> parameters() const;
  ag::Param& param(const std::string& name);
  const ag::Param& param(const std::string& name) const;
  bool has_param(const std::string& name) const { return by_name_.contains(name); }
  void zero_grad();

  // Restores domain slots (used when loading checkpoints).
  void set_domains(std::vector<DomainSlot> slots) { domains_ = std::move(slots); }

 private:
  ag::Param& add_param(std::string name, Matrix value, bool decay);
  void init_network();

  ModelConfig config_;
  std::vector<DomainSlot> domains_;
  std::vector<std::unique_ptr<ag::Param>> params_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

inline constexpr std::size_t kNoSlot = std::numeric_limits<std::size_t>::max();

// Learned: trained latents (D_k, offsets, D.W_d). ZeroShot: D = 0, offsets
// removed, D.W_d dropped.
enum class Mode { kLearned, kZeroShot };

// What the forward pass needs about one domain.
struct DomainView {
  std::size_t slot = kNoSlot;            // kNoSlot only in zero-shot mode
  const Matrix* content = nullptr;       // item_count x input_dim
  const std::vector<Matrix>* factors = nullptr;  // F per interval (item_count x 4)

  std::size_t item_count() const { return content->rows; }
  // Clamps to the stored intervals; times outside them see F = 0.
  const Matrix& factors_at(std::int64_t interval) const;
};

// Zero factors are appended so out-of-range intervals have somewhere to point.
std::vector<Matrix> build_factor_table(const popularity::DomainCounts& counts, std::span<const std::string> item_ids);

struct SequenceInput {
  const DomainView* domain = nullptr;
  std::span<const std::size_t> history;  // local item ids, oldest first, at most max_len
  std::optional<std::size_t> user;       // domain-local user row for user offsets
};

// Encoder outputs stacked over sequences: row offsets[s] + t is the user
// representation of sequence s after the prefix and its first t items.
struct Encoded {
  ag::Var out;
  std::vector<std::size_t> offsets;
};
Encoded encode_users(Model& model, ag::Tape& tape, std::span<const SequenceInput> seqs, Mode mode);

struct CandidateRef {
  const DomainView* domain = nullptr;
  std::size_t item = 0;
  std::int64_t interval = 0;
};
// V rows (n x B) and the per-candidate additive logit term (n x 1).
struct Candidates {
  ag::Var v;
  ag::Var bias;
};
Candidates candidate_latents(Model& model, ag::Tape& tape, std::span<const CandidateRef> refs, Mode mode);

// logit_j = U . V_j + D . W_d + Z_j . W_z for plain vectors.
std::vector<double> score_logits(std::span<const double> u, const Matrix& v, std::span<const double> d,
                                 const Matrix& z, std::span<const double> w_d, std::span<const double> w_z);
// V_j = D_k + Z_j + m_j + eps_j.
std::vector<double> item_latent(std::span<const double> d, std::span<const double> z, std::span<const double> m,
                                std::span<const double> offset);
std::vector<double> softmax(std::span<const double> logits);

struct TrainingEvent {
  std::size_t sequence = 0;  // index into Batch::sequences
  std::size_t position = 0;  // encoder output row within the sequence
  std::int64_t interval = 0;
  std::vector<std::size_t> candidates;  // positive first, then negatives
};

struct Batch {
  std::vector<SequenceInput> sequences;
  std::vector<TrainingEvent> events;
};

struct LossParts {
  ag::Var total;
  double nll = 0.0;
  double reg_v = 0.0;
  double reg_z = 0.0;
  double reg_u = 0.0;
  double reg_d = 0.0;
};

// Sampled-softmax negative log likelihood plus the Gaussian prior terms.
// Throws NumericalError when any term is not finite.
LossParts map_loss(Model& model, ag::Tape& tape, const Batch& batch);

struct EventQuery {
  std::size_t sequence = 0;
  std::size_t position = 0;
  std::int64_t interval = 0;
};

// Full-catalog logits (events x item_count) for events of one domain.
Matrix score_catalog(Model& model, const DomainView& domain, std::span<const SequenceInput> seqs,
                     std::span<const EventQuery> events, Mode mode);

}  // namespace prerec::model
