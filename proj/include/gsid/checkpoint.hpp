#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gsid/data.hpp"
#include "gsid/errors.hpp"
#include "gsid/hash.hpp"
#include "gsid/model.hpp"
#include "gsid/optimizer.hpp"

namespace gsid {

// Model checkpoints are a CBOR-encoded JSON document. CBOR keeps every
// double as its exact 8-byte value, so save/load is bit-exact.
inline constexpr const char* kCheckpointFormat = "gsid-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  Model model;
  Vocab vocab;
  std::optional<OptimizerState> optimizer;
  // Stage bookkeeping (e.g. pre-training epoch, frozen assignments).
  json meta = json::object();
};

namespace detail {

inline json tensor_json(const Tensor& t) { return json{{"shape", t.shape}, {"values", t.values}}; }

inline Tensor tensor_from(const json& j) {
  return Tensor(j.at("shape").get<std::vector<std::size_t>>(), j.at("values").get<std::vector<double>>());
}

inline const char* kind_name(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

inline OptimizerKind kind_from(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  throw DataError("checkpoint: unknown optimizer kind " + s);
}

}  // namespace detail

inline json optimizer_to_json(const OptimizerState& s) {
  const auto& o = s.options;
  return json{{"kind", detail::kind_name(o.kind)},
              {"learning_rate", o.learning_rate},
              {"beta1", o.beta1},
              {"beta2", o.beta2},
              {"epsilon", o.epsilon},
              {"clip_norm", o.clip_norm},
              {"first_moment", s.first_moment},
              {"second_moment", s.second_moment},
              {"step", s.step},
              {"skipped_updates", s.skipped_updates}};
}

inline OptimizerState optimizer_from_json(const json& j) {
  OptimizerState s;
  s.options.kind = detail::kind_from(j.at("kind").get<std::string>());
  j.at("learning_rate").get_to(s.options.learning_rate);
  j.at("beta1").get_to(s.options.beta1);
  j.at("beta2").get_to(s.options.beta2);
  j.at("epsilon").get_to(s.options.epsilon);
  j.at("clip_norm").get_to(s.options.clip_norm);
  j.at("first_moment").get_to(s.first_moment);
  j.at("second_moment").get_to(s.second_moment);
  j.at("step").get_to(s.step);
  j.at("skipped_updates").get_to(s.skipped_updates);
  return s;
}

// Everything that determines model behaviour, without vocab or optimizer.
inline json model_to_json(const Model& m) {
  json params = json::array();
  for (const Parameter* p : m.weights().all()) params.push_back({{"name", p->name}, {"value", detail::tensor_json(p->value)}});
  json books = json::array();
  for (const auto& cb : m.codebooks()) {
    books.push_back({{"step", cb.step()},
                     {"decay", cb.decay()},
                     {"laplace_eps", cb.laplace_eps()},
                     {"embeddings", detail::tensor_json(cb.embeddings())},
                     {"counts", cb.ema_counts()},
                     {"sums", detail::tensor_json(cb.ema_sums())}});
  }
  return json{{"config", m.config()}, {"trained_steps", m.trained_steps()}, {"parameters", params}, {"codebooks", books}};
}

inline Model model_from_json(const json& j) {
  Model m(j.at("config").get<ModelConfig>());
  auto params = m.parameters();
  const json& stored = j.at("parameters");
  if (stored.size() != params.size()) {
    throw DataError("checkpoint: expected " + std::to_string(params.size()) + " parameters, found " +
                    std::to_string(stored.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string name = stored[i].at("name").get<std::string>();
    if (name != params[i]->name) throw DataError("checkpoint: parameter " + name + " where " + params[i]->name + " expected");
    Tensor v = detail::tensor_from(stored[i].at("value"));
    if (v.shape != params[i]->value.shape) throw DataError("checkpoint: shape mismatch for " + name);
    params[i]->value = std::move(v);
    params[i]->grad.assign(params[i]->value.size(), 0.0);
  }
  const json& books = j.at("codebooks");
  if (books.size() != m.codebooks().size()) throw DataError("checkpoint: codebook count mismatch");
  for (std::size_t t = 0; t < books.size(); ++t) {
    const json& b = books[t];
    Codebook cb(b.at("step").get<std::size_t>(), m.config().codebook_size, m.config().hidden_size,
                b.at("decay").get<double>(), b.at("laplace_eps").get<double>());
    cb.restore(detail::tensor_from(b.at("embeddings")), b.at("counts").get<std::vector<double>>(),
               detail::tensor_from(b.at("sums")));
    m.codebooks()[t] = std::move(cb);
  }
  m.set_trained_steps(j.at("trained_steps").get<std::size_t>());
  return m;
}

// Content hash of the model state alone; frozen assignments and indices
// record it so they can be matched to the weights they came from.
inline std::string model_hash(const Model& m) {
  const auto bytes = json::to_cbor(model_to_json(m));
  Fnv1a h;
  h.update(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  return h.hex();
}

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  if (c.model.config().vocab_size != c.vocab.size()) {
    throw InvalidInput("checkpoint: model vocab_size does not match vocabulary");
  }
  json j{{"format", kCheckpointFormat},
         {"version", kCheckpointVersion},
         {"model", model_to_json(c.model)},
         {"vocab", c.vocab.to_json()},
         {"vocab_hash", c.vocab.hash()},
         {"optimizer", c.optimizer ? optimizer_to_json(*c.optimizer) : json(nullptr)},
         {"meta", c.meta}};
  return json::to_cbor(j);
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  json j;
  try {
    j = json::from_cbor(bytes);
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: not a valid container: ") + e.what());
  }
  if (!j.is_object() || j.value("format", "") != kCheckpointFormat) throw DataError("checkpoint: unrecognized format");
  if (!j.contains("version") || j.at("version").get<int>() != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version");
  }
  try {
    Checkpoint c;
    c.vocab = Vocab::from_json(j.at("vocab"));
    if (j.at("vocab_hash").get<std::string>() != c.vocab.hash()) throw DataError("checkpoint: vocab hash mismatch");
    c.model = model_from_json(j.at("model"));
    if (!j.at("optimizer").is_null()) c.optimizer = optimizer_from_json(j.at("optimizer"));
    c.meta = j.at("meta");
    return c;
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: missing or malformed field: ") + e.what());
  }
}

// Returns the FNV-1a hash of the written bytes.
inline std::string save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  const auto bytes = encode_checkpoint(c);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
  Fnv1a h;
  h.update(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  return h.hex();
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string raw = read_file(path);
  return decode_checkpoint(std::vector<std::uint8_t>(raw.begin(), raw.end()));
}

}  // namespace gsid
