#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gsid/autodiff.hpp"
#include "gsid/errors.hpp"
#include "gsid/numeric.hpp"
#include "gsid/tensor.hpp"

namespace gsid {

using json = nlohmann::json;

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t hidden_size = 64;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t attention_heads = 2;
  std::size_t feed_forward_size = 128;
  std::size_t max_text_len = 32;
  std::size_t num_steps = 4;
  std::size_t codebook_size = 16;
  double dropout = 0.0;
  std::uint64_t seed = 1234;

  void validate() const {
    if (vocab_size < 1) throw ConfigError("model: vocab_size must be >= 1");
    if (hidden_size < 1 || attention_heads < 1 || hidden_size % attention_heads != 0) {
      throw ConfigError("model: hidden_size must be divisible by attention_heads");
    }
    if (num_steps < 1) throw ConfigError("model: num_steps must be >= 1");
    if (codebook_size < 2) throw ConfigError("model: codebook_size must be >= 2");
    if (max_text_len < 1) throw ConfigError("model: max_text_len must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must be in [0,1)");
  }

  [[nodiscard]] std::size_t decoder_positions() const { return std::max(max_text_len + 2, num_steps + 1); }
};

inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"vocab_size", c.vocab_size},           {"hidden_size", c.hidden_size},
           {"encoder_layers", c.encoder_layers},   {"decoder_layers", c.decoder_layers},
           {"attention_heads", c.attention_heads}, {"feed_forward_size", c.feed_forward_size},
           {"max_text_len", c.max_text_len},       {"num_steps", c.num_steps},
           {"codebook_size", c.codebook_size},     {"dropout", c.dropout},
           {"seed", c.seed}};
}

inline void from_json(const json& j, ModelConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("hidden_size").get_to(c.hidden_size);
  j.at("encoder_layers").get_to(c.encoder_layers);
  j.at("decoder_layers").get_to(c.decoder_layers);
  j.at("attention_heads").get_to(c.attention_heads);
  j.at("feed_forward_size").get_to(c.feed_forward_size);
  j.at("max_text_len").get_to(c.max_text_len);
  j.at("num_steps").get_to(c.num_steps);
  j.at("codebook_size").get_to(c.codebook_size);
  j.at("dropout").get_to(c.dropout);
  j.at("seed").get_to(c.seed);
}

// ---------------------------------------------------------------------------
// Semantic IDs

struct SemanticId {
  std::vector<int> codes;

  [[nodiscard]] std::size_t size() const { return codes.size(); }
  [[nodiscard]] SemanticId prefix(std::size_t len) const {
    if (len > codes.size()) throw InvalidInput("SemanticId::prefix longer than id");
    return SemanticId{{codes.begin(), codes.begin() + static_cast<std::ptrdiff_t>(len)}};
  }
  [[nodiscard]] bool starts_with(const SemanticId& p) const {
    return p.size() <= size() && std::equal(p.codes.begin(), p.codes.end(), codes.begin());
  }
  [[nodiscard]] std::string to_string() const {
    std::string s;
    for (std::size_t i = 0; i < codes.size(); ++i) s += (i ? "-" : "") + std::to_string(codes[i]);
    return s;
  }

  auto operator<=>(const SemanticId&) const = default;
  bool operator==(const SemanticId&) const = default;
};

// ---------------------------------------------------------------------------
// Codebooks

// One quantization table per decoding step. Rows are maintained as the
// Laplace-smoothed EMA mean of the decoder states assigned to them:
//   row_j = ema_sums_j / (ema_counts_j + laplace_eps)
class Codebook {
 public:
  Codebook() = default;

  Codebook(std::size_t step, std::size_t codes, std::size_t dim, double decay = 0.99, double laplace_eps = 1e-5)
      : step_(step),
        embeddings_(Tensor::matrix(codes, dim)),
        ema_counts_(codes, 0.0),
        ema_sums_(Tensor::matrix(codes, dim)),
        decay_(decay),
        laplace_eps_(laplace_eps) {
    if (codes < 1) throw InvalidInput("codebook: at least one code required");
    if (!(decay > 0.0 && decay <= 1.0)) throw InvalidInput("codebook: decay must be in (0,1]");
    if (!(laplace_eps > 0.0)) throw InvalidInput("codebook: laplace_eps must be positive");
  }

  // N(0, 1/sqrt(D)) rows, zero counts, sums consistent with the row identity.
  template <typename Rng>
  void randomize(Rng& rng) {
    embeddings_ = random_normal({size(), dim()}, 1.0 / std::sqrt(static_cast<double>(dim())), rng);
    std::fill(ema_counts_.begin(), ema_counts_.end(), 0.0);
    for (std::size_t i = 0; i < embeddings_.size(); ++i) ema_sums_.values[i] = embeddings_.values[i] * laplace_eps_;
    refresh_rows();
  }

  [[nodiscard]] std::size_t step() const { return step_; }
  [[nodiscard]] std::size_t size() const { return embeddings_.rows(); }
  [[nodiscard]] std::size_t dim() const { return embeddings_.cols(); }
  [[nodiscard]] double decay() const { return decay_; }
  [[nodiscard]] double laplace_eps() const { return laplace_eps_; }
  [[nodiscard]] const Tensor& embeddings() const { return embeddings_; }
  [[nodiscard]] const std::vector<double>& ema_counts() const { return ema_counts_; }
  [[nodiscard]] const Tensor& ema_sums() const { return ema_sums_; }
  [[nodiscard]] std::span<const double> row(std::size_t j) const { return embeddings_.row(j); }

  void set_decay(double decay) {
    if (!(decay > 0.0 && decay <= 1.0)) throw InvalidInput("codebook: decay must be in (0,1]");
    decay_ = decay;
  }

  // Sets statistics directly (checkpoint loading, tests); rows are derived.
  void set_statistics(std::vector<double> counts, Tensor sums) {
    if (counts.size() != size() || sums.rows() != size() || sums.cols() != dim()) {
      throw ShapeError("codebook: statistics shape mismatch");
    }
    ema_counts_ = std::move(counts);
    ema_sums_ = std::move(sums);
    refresh_rows();
  }

  // Restores all fields exactly as stored, without recomputing rows.
  void restore(Tensor embeddings, std::vector<double> counts, Tensor sums) {
    if (embeddings.rows() != size() || embeddings.cols() != dim() || counts.size() != size() ||
        sums.rows() != size() || sums.cols() != dim()) {
      throw ShapeError("codebook: restore shape mismatch");
    }
    embeddings_ = std::move(embeddings);
    ema_counts_ = std::move(counts);
    ema_sums_ = std::move(sums);
  }

  // counts_j <- g*counts_j + (1-g)*n_j ; sums_j <- g*sums_j + (1-g)*sum(d) ;
  // then every row is recomputed from its statistics.
  void ema_update(std::span<const std::vector<double>> vectors, std::span<const int> codes, double decay) {
    if (vectors.size() != codes.size()) throw ShapeError("ema_update: one code per vector required");
    if (!(decay > 0.0 && decay <= 1.0)) throw InvalidInput("ema_update: decay must be in (0,1]");
    const std::size_t k = size(), d = dim();
    std::vector<double> n(k, 0.0);
    Tensor s = Tensor::matrix(k, d);
    for (std::size_t i = 0; i < vectors.size(); ++i) {
      const int c = codes[i];
      if (c < 0 || static_cast<std::size_t>(c) >= k) throw IndexError("ema_update: code out of range");
      if (vectors[i].size() != d) throw ShapeError("ema_update: vector dimension mismatch");
      n[static_cast<std::size_t>(c)] += 1.0;
      auto row = s.row(static_cast<std::size_t>(c));
      for (std::size_t j = 0; j < d; ++j) row[j] += vectors[i][j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      ema_counts_[c] = decay * ema_counts_[c] + (1.0 - decay) * n[c];
      for (std::size_t j = 0; j < d; ++j) {
        ema_sums_.at(c, j) = decay * ema_sums_.at(c, j) + (1.0 - decay) * s.at(c, j);
      }
    }
    refresh_rows();
  }

  void ema_update(std::span<const std::vector<double>> vectors, std::span<const int> codes) {
    ema_update(vectors, codes, decay_);
  }

  // Rows whose EMA count is below `threshold` are moved onto randomly chosen
  // donor vectors. The reset row takes count 1 with sum = donor, so the row
  // identity keeps holding. Returns the number of rows reset.
  template <typename Rng>
  std::size_t reinit_dead_codes(double threshold, std::span<const std::vector<double>> donors, Rng& rng) {
    if (donors.empty()) return 0;
    std::uniform_int_distribution<std::size_t> pick(0, donors.size() - 1);
    std::size_t reset = 0;
    for (std::size_t c = 0; c < size(); ++c) {
      if (ema_counts_[c] >= threshold) continue;
      const auto& v = donors[pick(rng)];
      if (v.size() != dim()) throw ShapeError("reinit_dead_codes: donor dimension mismatch");
      ema_counts_[c] = 1.0;
      for (std::size_t j = 0; j < dim(); ++j) ema_sums_.at(c, j) = v[j] * (1.0 + laplace_eps_);
      ++reset;
    }
    refresh_rows();
    return reset;
  }

  // max_j |row_j - sums_j / (counts_j + eps)|
  [[nodiscard]] double row_identity_error() const {
    double worst = 0.0;
    for (std::size_t c = 0; c < size(); ++c) {
      const double denom = ema_counts_[c] + laplace_eps_;
      for (std::size_t j = 0; j < dim(); ++j) {
        worst = std::max(worst, std::abs(embeddings_.at(c, j) - ema_sums_.at(c, j) / denom));
      }
    }
    return worst;
  }

 private:
  void refresh_rows() {
    for (std::size_t c = 0; c < size(); ++c) {
      const double denom = ema_counts_[c] + laplace_eps_;
      for (std::size_t j = 0; j < dim(); ++j) embeddings_.at(c, j) = ema_sums_.at(c, j) / denom;
    }
  }

  std::size_t step_ = 1;
  Tensor embeddings_;
  std::vector<double> ema_counts_;
  Tensor ema_sums_;
  double decay_ = 0.99;
  double laplace_eps_ = 1e-5;
};

// softmax_j(d . E_j / temperature)
inline std::vector<double> code_distribution(std::span<const double> d, const Codebook& codebook,
                                             double temperature = 1.0) {
  if (d.size() != codebook.dim()) throw ShapeError("code_distribution: dimension mismatch");
  std::vector<double> logits(codebook.size());
  for (std::size_t j = 0; j < codebook.size(); ++j) logits[j] = dot(d, codebook.row(j));
  return softmax(logits, temperature);
}

// Index of the largest dot product; ties go to the lowest index.
inline int assign_code(std::span<const double> d, const Codebook& codebook) {
  if (d.size() != codebook.dim()) throw ShapeError("assign_code: dimension mismatch");
  int best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < codebook.size(); ++j) {
    const double s = dot(d, codebook.row(j));
    if (s > best_score) {
      best_score = s;
      best = static_cast<int>(j);
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Transformer weights

struct AttentionWeights {
  Parameter wq, wk, wv, wo;
};

struct FeedForwardWeights {
  Parameter w1, b1, w2, b2;
};

struct NormWeights {
  Parameter gain, bias;
};

struct EncoderLayerWeights {
  NormWeights ln_attn;
  AttentionWeights self_attn;
  NormWeights ln_ff;
  FeedForwardWeights ff;
};

struct DecoderLayerWeights {
  NormWeights ln_self;
  AttentionWeights self_attn;
  NormWeights ln_cross;
  AttentionWeights cross_attn;
  NormWeights ln_ff;
  FeedForwardWeights ff;
};

struct TransformerWeights {
  Parameter token_embedding;
  Parameter encoder_positions;
  Parameter decoder_positions;
  // Decoder input at code step 1.
  Parameter code_start;
  std::vector<EncoderLayerWeights> encoder;
  NormWeights encoder_final;
  std::vector<DecoderLayerWeights> decoder;
  NormWeights decoder_final;
  Parameter lm_head;
  Parameter lm_bias;

  // Stable enumeration order; optimizer state and checkpoints rely on it.
  std::vector<Parameter*> all() {
    std::vector<Parameter*> out{&token_embedding, &encoder_positions, &decoder_positions, &code_start};
    auto attn = [&](AttentionWeights& a) {
      for (Parameter* p : {&a.wq, &a.wk, &a.wv, &a.wo}) out.push_back(p);
    };
    auto norm = [&](NormWeights& n) {
      out.push_back(&n.gain);
      out.push_back(&n.bias);
    };
    auto ff = [&](FeedForwardWeights& f) {
      for (Parameter* p : {&f.w1, &f.b1, &f.w2, &f.b2}) out.push_back(p);
    };
    for (auto& l : encoder) {
      norm(l.ln_attn);
      attn(l.self_attn);
      norm(l.ln_ff);
      ff(l.ff);
    }
    norm(encoder_final);
    for (auto& l : decoder) {
      norm(l.ln_self);
      attn(l.self_attn);
      norm(l.ln_cross);
      attn(l.cross_attn);
      norm(l.ln_ff);
      ff(l.ff);
    }
    norm(decoder_final);
    out.push_back(&lm_head);
    out.push_back(&lm_bias);
    return out;
  }

  [[nodiscard]] std::vector<const Parameter*> all() const {
    auto ptrs = const_cast<TransformerWeights*>(this)->all();
    return {ptrs.begin(), ptrs.end()};
  }
};

// Encoder output plus the key mask (true = padding) used by cross-attention.
struct EncodedText {
  Var memory;
  std::vector<bool> padding;
};

// ---------------------------------------------------------------------------
// Model

class Model {
 public:
  Model() = default;

  explicit Model(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(config_.seed);
    init_weights(rng);
    for (std::size_t t = 1; t <= config_.num_steps; ++t) {
      codebooks_.emplace_back(t, config_.codebook_size, config_.hidden_size);
      codebooks_.back().randomize(rng);
    }
  }

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  TransformerWeights& weights() { return weights_; }
  [[nodiscard]] const TransformerWeights& weights() const { return weights_; }
  std::vector<Parameter*> parameters() { return weights_.all(); }

  std::vector<Codebook>& codebooks() { return codebooks_; }
  [[nodiscard]] const std::vector<Codebook>& codebooks() const { return codebooks_; }
  // 1-based step index.
  Codebook& codebook(std::size_t step) { return codebooks_.at(step - 1); }
  [[nodiscard]] const Codebook& codebook(std::size_t step) const { return codebooks_.at(step - 1); }

  // Number of completed progressive-training steps.
  [[nodiscard]] std::size_t trained_steps() const { return trained_steps_; }
  void set_trained_steps(std::size_t n) {
    if (n > config_.num_steps) throw InvalidInput("trained_steps exceeds num_steps");
    trained_steps_ = n;
  }

  // ---- differentiable forward -------------------------------------------

  // Pad tokens (Vocab::pad == 0) are masked out as attention keys.
  template <typename Rng = std::mt19937_64>
  EncodedText encode(Tape& tape, std::span<const int> tokens, Rng* dropout_rng = nullptr) const {
    if (tokens.empty()) throw InvalidInput("encode: empty input");
    if (tokens.size() > config_.max_text_len) {
      throw InvalidInput("encode: input length " + std::to_string(tokens.size()) + " exceeds max_text_len " +
                         std::to_string(config_.max_text_len));
    }
    std::vector<std::size_t> ids;
    std::vector<bool> padding;
    for (int t : tokens) {
      if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab_size) {
        throw IndexError("encode: token " + std::to_string(t) + " outside vocabulary");
      }
      ids.push_back(static_cast<std::size_t>(t));
      padding.push_back(t == kPadToken);
    }
    const std::size_t n = ids.size();
    Var x = ops::gather_rows(bind(tape, weights_.token_embedding), std::move(ids));
    x = ops::add(x, ops::slice_rows(bind(tape, weights_.encoder_positions), 0, n));
    x = ops::dropout(x, dropout_rate(dropout_rng), *rng_or_dummy(dropout_rng));
    const Tensor mask = key_mask(n, padding, false);
    for (const auto& layer : weights_.encoder) {
      Var h = norm(tape, x, layer.ln_attn);
      Var a = attention(tape, h, h, layer.self_attn, &mask);
      x = ops::add(x, ops::dropout(a, dropout_rate(dropout_rng), *rng_or_dummy(dropout_rng)));
      h = norm(tape, x, layer.ln_ff);
      x = ops::add(x, ops::dropout(feed_forward(tape, h, layer.ff), dropout_rate(dropout_rng),
                                   *rng_or_dummy(dropout_rng)));
    }
    return {norm(tape, x, weights_.encoder_final), std::move(padding)};
  }

  // Runs the decoder stack over already-embedded inputs (n x D) with a
  // causal self-attention mask; returns the final-norm hidden states.
  template <typename Rng = std::mt19937_64>
  Var decode(Tape& tape, const EncodedText& enc, Var inputs, Rng* dropout_rng = nullptr) const {
    const std::size_t n = inputs.rows();
    if (n > config_.decoder_positions()) throw InvalidInput("decode: sequence longer than decoder positions");
    Var x = ops::add(inputs, ops::slice_rows(bind(tape, weights_.decoder_positions), 0, n));
    x = ops::dropout(x, dropout_rate(dropout_rng), *rng_or_dummy(dropout_rng));
    const Tensor causal = key_mask(n, std::vector<bool>(n, false), true);
    const Tensor cross = cross_mask(n, enc.padding);
    for (const auto& layer : weights_.decoder) {
      Var h = norm(tape, x, layer.ln_self);
      x = ops::add(x, ops::dropout(attention(tape, h, h, layer.self_attn, &causal), dropout_rate(dropout_rng),
                                   *rng_or_dummy(dropout_rng)));
      h = norm(tape, x, layer.ln_cross);
      x = ops::add(x, ops::dropout(attention(tape, h, enc.memory, layer.cross_attn, &cross),
                                   dropout_rate(dropout_rng), *rng_or_dummy(dropout_rng)));
      h = norm(tape, x, layer.ln_ff);
      x = ops::add(x, ops::dropout(feed_forward(tape, h, layer.ff), dropout_rate(dropout_rng),
                                   *rng_or_dummy(dropout_rng)));
    }
    return norm(tape, x, weights_.decoder_final);
  }

  // Teacher-forced text decoding: inputs are [<s>, y_1 .. y_{L-1}], the
  // result is L x V logits predicting y_1 .. y_L.
  template <typename Rng = std::mt19937_64>
  Var decode_text(Tape& tape, const EncodedText& enc, std::span<const int> targets, Rng* dropout_rng = nullptr) const {
    if (targets.empty()) throw InvalidInput("decode_text: empty target");
    std::vector<std::size_t> ids{static_cast<std::size_t>(kBosToken)};
    for (std::size_t i = 0; i + 1 < targets.size(); ++i) {
      if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= config_.vocab_size) {
        throw IndexError("decode_text: target token outside vocabulary");
      }
      ids.push_back(static_cast<std::size_t>(targets[i]));
    }
    Var inputs = ops::gather_rows(bind(tape, weights_.token_embedding), std::move(ids));
    Var h = decode(tape, enc, inputs, dropout_rng);
    return ops::add_row(ops::matmul(h, bind(tape, weights_.lm_head)), bind(tape, weights_.lm_bias));
  }

  // Decoder states d_1 .. d_{n+1} for a prefix of n codes, one per row.
  // Row t-1 depends only on prefix codes z_1 .. z_{t-1}. Prefix codes enter
  // as their (constant) codebook rows, so no gradient reaches a codebook.
  template <typename Rng = std::mt19937_64>
  Var decode_codes(Tape& tape, const EncodedText& enc, std::span<const int> prefix, Rng* dropout_rng = nullptr) const {
    if (prefix.size() > config_.num_steps - 1) {
      throw InvalidInput("decode_codes: prefix longer than num_steps - 1");
    }
    std::vector<Var> rows{bind(tape, weights_.code_start)};
    for (std::size_t t = 0; t < prefix.size(); ++t) {
      const Codebook& cb = codebooks_.at(t);
      if (prefix[t] < 0 || static_cast<std::size_t>(prefix[t]) >= cb.size()) {
        throw IndexError("decode_codes: code " + std::to_string(prefix[t]) + " out of range");
      }
      rows.push_back(ops::gather_rows(codebook_var(tape, t + 1), {static_cast<std::size_t>(prefix[t])}));
    }
    Var inputs = rows.size() == 1 ? rows.front() : ops::concat_rows(rows);
    return decode(tape, enc, inputs, dropout_rng);
  }

  // Row-wise code logits d_t . E_t^T / temperature for rows t = 1 .. n of
  // `states`, against the constant codebooks 1 .. n.
  Var code_logits(Tape& tape, Var states, double temperature = 1.0) const {
    std::vector<Var> rows;
    for (std::size_t t = 0; t < states.rows(); ++t) {
      Var e = codebook_var(tape, t + 1);
      rows.push_back(ops::scale(ops::matmul_nt(ops::slice_rows(states, t, 1), e), 1.0 / temperature));
    }
    return rows.size() == 1 ? rows.front() : ops::concat_rows(rows);
  }

  // Codebook E_t as a graph input. Recording tapes route it through a probe
  // leaf and a stop-gradient, so codebook_probes() can confirm that nothing
  // flows back into the tables; EMA is their only update path.
  Var codebook_var(Tape& tape, std::size_t step) const {
    const Codebook& cb = codebook(step);
    if (!tape.recording()) return tape.constant(cb.embeddings());
    if (probes_.size() != codebooks_.size()) probes_.resize(codebooks_.size());
    Parameter& probe = probes_[step - 1];
    if (probe.value.values != cb.embeddings().values) {
      probe.name = "codebook." + std::to_string(step);
      probe.value = cb.embeddings();
      probe.grad.assign(cb.embeddings().size(), 0.0);
    }
    return ops::stop_gradient(tape.param(probe));
  }

  [[nodiscard]] const std::vector<Parameter>& codebook_probes() const { return probes_; }
  void clear_codebook_probes() const { probes_.clear(); }

  // ---- inference API -----------------------------------------------------

  [[nodiscard]] Tensor encode(std::span<const int> tokens) const {
    Tape tape(false);
    return encode(tape, tokens).memory.value();
  }

  // d_t for step t (1-based) given z_{<t}.
  [[nodiscard]] std::vector<double> decode_step(std::span<const int> tokens, const SemanticId& prefix,
                                                std::size_t t) const {
    check_step(t);
    if (prefix.size() != t - 1) throw InvalidInput("decode_step: prefix length must equal t - 1");
    Tape tape(false);
    EncodedText enc = encode(tape, tokens);
    return last_state(tape, enc, prefix.codes);
  }

  // Greedy chain: encode once, then decode + assign for t = 1 .. depth.
  [[nodiscard]] SemanticId generate_ids(std::span<const int> tokens, std::size_t depth) const {
    return greedy(tokens, depth).first;
  }

  // d_T along the greedy chain (pre-quantization state at the last step).
  [[nodiscard]] std::vector<double> final_representation(std::span<const int> tokens, std::size_t depth) const {
    return greedy(tokens, depth).second;
  }

  // Greedy ID and d_depth together, sharing one encoder pass.
  [[nodiscard]] std::pair<SemanticId, std::vector<double>> greedy(std::span<const int> tokens,
                                                                  std::size_t depth) const {
    check_step(depth);
    Tape tape(false);
    EncodedText enc = encode(tape, tokens);
    SemanticId id;
    std::vector<double> state;
    for (std::size_t t = 1; t <= depth; ++t) {
      state = last_state(tape, enc, id.codes);
      id.codes.push_back(assign_code(state, codebook(t)));
    }
    return {std::move(id), std::move(state)};
  }

  // Decoder state for the step following `prefix` on an existing encoding.
  [[nodiscard]] std::vector<double> last_state(Tape& tape, const EncodedText& enc, std::span<const int> prefix) const {
    Var states = decode_codes(tape, enc, prefix);
    const auto r = states.value().row(states.rows() - 1);
    return {r.begin(), r.end()};
  }

  static constexpr int kPadToken = 0;
  static constexpr int kBosToken = 2;

 private:
  // Tapes record a mutable Parameter* so that backward() can accumulate
  // gradients; forward passes themselves never write through it.
  static Var bind(Tape& tape, const Parameter& p) { return tape.param(const_cast<Parameter&>(p)); }

  void check_step(std::size_t t) const {
    if (t < 1 || t > config_.num_steps) {
      throw InvalidInput("step " + std::to_string(t) + " outside [1, " + std::to_string(config_.num_steps) + "]");
    }
  }

  template <typename Rng>
  double dropout_rate(Rng* rng) const {
    return rng == nullptr ? 0.0 : config_.dropout;
  }

  template <typename Rng>
  static Rng* rng_or_dummy(Rng* rng) {
    static thread_local Rng dummy;
    return rng != nullptr ? rng : &dummy;
  }

  static Tensor key_mask(std::size_t n, const std::vector<bool>& padding, bool causal) {
    Tensor m = Tensor::matrix(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (padding[j] || (causal && j > i)) m.at(i, j) = kMasked;
    return m;
  }

  static Tensor cross_mask(std::size_t n, const std::vector<bool>& padding) {
    Tensor m = Tensor::matrix(n, padding.size());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < padding.size(); ++j)
        if (padding[j]) m.at(i, j) = kMasked;
    return m;
  }

  Var norm(Tape& tape, Var x, const NormWeights& w) const {
    return ops::layer_norm(x, bind(tape, w.gain), bind(tape, w.bias));
  }

  Var feed_forward(Tape& tape, Var x, const FeedForwardWeights& w) const {
    Var h = ops::gelu(ops::add_row(ops::matmul(x, bind(tape, w.w1)), bind(tape, w.b1)));
    return ops::add_row(ops::matmul(h, bind(tape, w.w2)), bind(tape, w.b2));
  }

  Var attention(Tape& tape, Var xq, Var xkv, const AttentionWeights& w, const Tensor* mask) const {
    const std::size_t heads = config_.attention_heads;
    const std::size_t dh = config_.hidden_size / heads;
    Var q = ops::matmul(xq, bind(tape, w.wq));
    Var k = ops::matmul(xkv, bind(tape, w.wk));
    Var v = ops::matmul(xkv, bind(tape, w.wv));
    const double s = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> outs;
    for (std::size_t h = 0; h < heads; ++h) {
      Var qh = heads == 1 ? q : ops::slice_cols(q, h * dh, dh);
      Var kh = heads == 1 ? k : ops::slice_cols(k, h * dh, dh);
      Var vh = heads == 1 ? v : ops::slice_cols(v, h * dh, dh);
      Var scores = ops::scale(ops::matmul_nt(qh, kh), s);
      if (mask != nullptr) scores = ops::add_constant(scores, *mask);
      outs.push_back(ops::matmul(ops::softmax_rows(scores), vh));
    }
    Var o = heads == 1 ? outs.front() : ops::concat_cols(outs);
    return ops::matmul(o, bind(tape, w.wo));
  }

  template <typename Rng>
  void init_weights(Rng& rng) {
    const std::size_t d = config_.hidden_size, f = config_.feed_forward_size, v = config_.vocab_size;
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    const double sf = 1.0 / std::sqrt(static_cast<double>(f));
    auto mat = [&](const std::string& name, std::size_t r, std::size_t c, double std) {
      return Parameter(name, random_normal({r, c}, std, rng));
    };
    auto zeros = [&](const std::string& name, std::size_t n) { return Parameter(name, Tensor::matrix(1, n)); };
    auto ones = [&](const std::string& name, std::size_t n) { return Parameter(name, Tensor::matrix(1, n, 1.0)); };
    auto norm_w = [&](const std::string& name) { return NormWeights{ones(name + ".gain", d), zeros(name + ".bias", d)}; };
    auto attn_w = [&](const std::string& name) {
      return AttentionWeights{mat(name + ".wq", d, d, sd), mat(name + ".wk", d, d, sd), mat(name + ".wv", d, d, sd),
                              mat(name + ".wo", d, d, sd)};
    };
    auto ff_w = [&](const std::string& name) {
      return FeedForwardWeights{mat(name + ".w1", d, f, sd), zeros(name + ".b1", f), mat(name + ".w2", f, d, sf),
                                zeros(name + ".b2", d)};
    };
    weights_.token_embedding = mat("token_embedding", v, d, sd);
    weights_.encoder_positions = mat("encoder_positions", config_.max_text_len, d, 0.1 * sd);
    weights_.decoder_positions = mat("decoder_positions", config_.decoder_positions(), d, 0.1 * sd);
    weights_.code_start = mat("code_start", 1, d, sd);
    weights_.encoder.clear();
    for (std::size_t l = 0; l < config_.encoder_layers; ++l) {
      const std::string p = "encoder." + std::to_string(l);
      weights_.encoder.push_back({norm_w(p + ".ln_attn"), attn_w(p + ".self_attn"), norm_w(p + ".ln_ff"),
                                  ff_w(p + ".ff")});
    }
    weights_.encoder_final = norm_w("encoder.final");
    weights_.decoder.clear();
    for (std::size_t l = 0; l < config_.decoder_layers; ++l) {
      const std::string p = "decoder." + std::to_string(l);
      weights_.decoder.push_back({norm_w(p + ".ln_self"), attn_w(p + ".self_attn"), norm_w(p + ".ln_cross"),
                                  attn_w(p + ".cross_attn"), norm_w(p + ".ln_ff"), ff_w(p + ".ff")});
    }
    weights_.decoder_final = norm_w("decoder.final");
    weights_.lm_head = mat("lm_head", d, v, sd);
    weights_.lm_bias = zeros("lm_bias", v);
  }

  static constexpr double kMasked = -1e9;

  ModelConfig config_;
  TransformerWeights weights_;
  std::vector<Codebook> codebooks_;
  std::size_t trained_steps_ = 0;
  mutable std::vector<Parameter> probes_;
};

}  // namespace gsid
