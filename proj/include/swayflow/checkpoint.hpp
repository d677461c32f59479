#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "swayflow/common.hpp"
#include "swayflow/io.hpp"
#include "swayflow/model.hpp"
#include "swayflow/training.hpp"

namespace swayflow {

// Checkpoint container, all integers and floats little endian:
//   magic "SWfCKPT1" | u32 version (= 1) | u8 precision (bytes per scalar)
//   u32 json length + config JSON {"model": {...}, "training": {...}}
//   u64 update count | u64 optimizer step count
//   u32 n + named tensors    (u32 name len, name, u32 rank, u32 dims…, f64 payload)
//   u32 n + named EMA vectors     (u32 name len, name, u64 count, f64 payload)
//   u32 n + named first moments   (same layout)
//   u32 n + named second moments  (same layout)
//   u32 rng-state length + serialized rng stream
//   magic "SWfEND1\n"
inline constexpr char kCheckpointMagic[] = "SWfCKPT1";
inline constexpr char kCheckpointEndMagic[] = "SWfEND1\n";
inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointData {
  uint32_t version = kCheckpointVersion;
  uint8_t precision = 4;
  nlohmann::json config;
  uint64_t update_count = 0;
  uint64_t opt_step_count = 0;
  std::vector<std::pair<std::string, std::pair<Shape, std::vector<double>>>> params;
  std::map<std::string, std::vector<double>> ema, opt_m, opt_v;
  std::string rng_state;
};

namespace detail {

inline void put_name(std::string& buf, const std::string& name) {
  put_u32(buf, static_cast<uint32_t>(name.size()));
  buf.append(name);
}

inline void put_named_vectors(std::string& buf,
                              const std::map<std::string, std::vector<double>>& table) {
  put_u32(buf, static_cast<uint32_t>(table.size()));
  for (const auto& [name, values] : table) {
    put_name(buf, name);
    put_u64(buf, static_cast<uint64_t>(values.size()));
    for (double x : values) put_f64(buf, x);
  }
}

inline std::string read_name(ByteReader& r) {
  const uint32_t n = r.u32();
  if (n > 4096) fail(r.what, ": implausible name length ", n);
  return r.bytes(n);
}

inline std::map<std::string, std::vector<double>> read_named_vectors(ByteReader& r) {
  std::map<std::string, std::vector<double>> table;
  const uint32_t n = r.u32();
  for (uint32_t i = 0; i < n; ++i) {
    std::string name = read_name(r);
    const uint64_t count = r.u64();
    std::vector<double> values;
    values.reserve(count);
    for (uint64_t k = 0; k < count; ++k) values.push_back(r.f64());
    table.emplace(std::move(name), std::move(values));
  }
  return table;
}

// Applies every key in `j` to a config through `setter(key, value)`, which
// must reject unknown keys.
template <class Setter>
void apply_json_keys(const nlohmann::json& j, const char* what, Setter&& setter) {
  if (!j.is_object()) fail(what, ": expected an object");
  for (const auto& [key, value] : j.items()) setter(key, value);
}

}  // namespace detail

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  return nlohmann::json{{"feat_dim", cfg.feat_dim},
                        {"capacity", cfg.capacity},
                        {"dit_layers", cfg.dit_layers},
                        {"dit_dim", cfg.dit_dim},
                        {"heads", cfg.heads},
                        {"ffn_mult", cfg.ffn_mult},
                        {"convnext_layers", cfg.convnext_layers},
                        {"convnext_dim", cfg.convnext_dim},
                        {"convnext_ffn_mult", cfg.convnext_ffn_mult},
                        {"vocab_size", cfg.vocab_size},
                        {"rope_base", cfg.rope_base},
                        {"dropout", cfg.dropout}};
}

// Fields present in `j` override `base`; unknown keys are rejected by name.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {}) {
  detail::apply_json_keys(j, "model config", [&](const std::string& key, const nlohmann::json& v) {
    if (key == "feat_dim") base.feat_dim = v.get<int64_t>();
    else if (key == "capacity") base.capacity = v.get<int64_t>();
    else if (key == "dit_layers") base.dit_layers = v.get<int64_t>();
    else if (key == "dit_dim") base.dit_dim = v.get<int64_t>();
    else if (key == "heads") base.heads = v.get<int64_t>();
    else if (key == "ffn_mult") base.ffn_mult = v.get<int64_t>();
    else if (key == "convnext_layers") base.convnext_layers = v.get<int64_t>();
    else if (key == "convnext_dim") base.convnext_dim = v.get<int64_t>();
    else if (key == "convnext_ffn_mult") base.convnext_ffn_mult = v.get<int64_t>();
    else if (key == "vocab_size") base.vocab_size = v.get<int64_t>();
    else if (key == "rope_base") base.rope_base = v.get<double>();
    else if (key == "dropout") base.dropout = v.get<double>();
    else fail("model config: unknown key '", key, "'");
  });
  base.validate();
  return base;
}

inline nlohmann::json training_config_to_json(const TrainingConfig& cfg) {
  return nlohmann::json{{"peak_lr", cfg.peak_lr},
                        {"warmup_updates", cfg.warmup_updates},
                        {"total_updates", cfg.total_updates},
                        {"batch_frames", cfg.batch_frames},
                        {"mask_ratio_lo", cfg.mask_ratio_lo},
                        {"mask_ratio_hi", cfg.mask_ratio_hi},
                        {"cfg_drop_audio", cfg.cfg_drop_audio},
                        {"cfg_drop_both", cfg.cfg_drop_both},
                        {"grad_clip_norm", cfg.grad_clip_norm},
                        {"ema_decay", cfg.ema_decay},
                        {"weight_decay", cfg.weight_decay},
                        {"beta1", cfg.beta1},
                        {"beta2", cfg.beta2},
                        {"adam_eps", cfg.adam_eps},
                        {"seed", cfg.seed},
                        {"precision", cfg.precision}};
}

inline TrainingConfig training_config_from_json(const nlohmann::json& j, TrainingConfig base = {}) {
  detail::apply_json_keys(
      j, "training config", [&](const std::string& key, const nlohmann::json& v) {
        if (key == "peak_lr") base.peak_lr = v.get<double>();
        else if (key == "warmup_updates") base.warmup_updates = v.get<int64_t>();
        else if (key == "total_updates") base.total_updates = v.get<int64_t>();
        else if (key == "batch_frames") base.batch_frames = v.get<int64_t>();
        else if (key == "mask_ratio_lo") base.mask_ratio_lo = v.get<double>();
        else if (key == "mask_ratio_hi") base.mask_ratio_hi = v.get<double>();
        else if (key == "cfg_drop_audio") base.cfg_drop_audio = v.get<double>();
        else if (key == "cfg_drop_both") base.cfg_drop_both = v.get<double>();
        else if (key == "grad_clip_norm") base.grad_clip_norm = v.get<double>();
        else if (key == "ema_decay") base.ema_decay = v.get<double>();
        else if (key == "weight_decay") base.weight_decay = v.get<double>();
        else if (key == "beta1") base.beta1 = v.get<double>();
        else if (key == "beta2") base.beta2 = v.get<double>();
        else if (key == "adam_eps") base.adam_eps = v.get<double>();
        else if (key == "seed") base.seed = v.get<uint64_t>();
        else if (key == "precision") base.precision = v.get<std::string>();
        else fail("training config: unknown key '", key, "'");
      });
  base.validate();
  return base;
}

template <class S>
void save_checkpoint(const std::string& path, Trainer<S>& trainer) {
  std::string buf;
  buf.append(kCheckpointMagic, 8);
  detail::put_u32(buf, kCheckpointVersion);
  buf.push_back(static_cast<char>(sizeof(S)));

  nlohmann::json config{{"model", model_config_to_json(trainer.model().cfg)},
                        {"training", training_config_to_json(trainer.config())}};
  const std::string config_text = config.dump();
  detail::put_u32(buf, static_cast<uint32_t>(config_text.size()));
  buf.append(config_text);

  detail::put_u64(buf, static_cast<uint64_t>(trainer.update_count()));
  detail::put_u64(buf, static_cast<uint64_t>(trainer.optimizer().step_count));

  detail::put_u32(buf, static_cast<uint32_t>(trainer.params().size()));
  for (const auto& [name, p] : trainer.params()) {
    detail::put_name(buf, name);
    detail::put_u32(buf, static_cast<uint32_t>(p->shape().size()));
    for (int64_t d : p->shape()) detail::put_u32(buf, static_cast<uint32_t>(d));
    for (S x : p->data()) detail::put_f64(buf, static_cast<double>(x));
  }

  detail::put_named_vectors(buf, trainer.ema().shadow);
  detail::put_named_vectors(buf, trainer.optimizer().m);
  detail::put_named_vectors(buf, trainer.optimizer().v);

  const std::string rng_text = trainer.rng().serialize();
  detail::put_u32(buf, static_cast<uint32_t>(rng_text.size()));
  buf.append(rng_text);
  buf.append(kCheckpointEndMagic, 8);
  detail::spill(path, buf, "save_checkpoint");
}

inline CheckpointData read_checkpoint(const std::string& path) {
  const std::string buf = detail::slurp(path, "read_checkpoint");
  detail::ByteReader r{buf, 0, "read_checkpoint(" + path + ")"};
  CheckpointData data;
  if (r.bytes(8) != kCheckpointMagic)
    fail(r.what, ": bad leading magic; not a checkpoint file");
  data.version = r.u32();
  if (data.version != kCheckpointVersion)
    fail(r.what, ": unsupported version ", data.version, " (expected ", kCheckpointVersion, ")");
  data.precision = static_cast<uint8_t>(static_cast<unsigned char>(r.bytes(1)[0]));
  const uint32_t json_len = r.u32();
  data.config = nlohmann::json::parse(r.bytes(json_len));
  data.update_count = r.u64();
  data.opt_step_count = r.u64();

  const uint32_t n_params = r.u32();
  for (uint32_t i = 0; i < n_params; ++i) {
    std::string name = detail::read_name(r);
    const uint32_t rank = r.u32();
    if (rank > 8) fail(r.what, ": implausible rank ", rank, " for parameter '", name, "'");
    Shape shape;
    for (uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<int64_t>(r.u32()));
    const int64_t n = numel(shape);
    std::vector<double> values;
    values.reserve(static_cast<std::size_t>(n));
    for (int64_t k = 0; k < n; ++k) values.push_back(r.f64());
    data.params.emplace_back(std::move(name), std::make_pair(std::move(shape), std::move(values)));
  }

  data.ema = detail::read_named_vectors(r);
  data.opt_m = detail::read_named_vectors(r);
  data.opt_v = detail::read_named_vectors(r);

  const uint32_t rng_len = r.u32();
  data.rng_state = r.bytes(rng_len);
  if (r.bytes(8) != kCheckpointEndMagic)
    fail(r.what, ": bad trailing magic; file is corrupt");
  if (!r.done()) fail(r.what, ": ", buf.size() - r.pos, " trailing bytes after end magic");
  return data;
}

// Copies stored tensors (live weights, or the EMA shadow) into a model.
// Every model parameter must be present with the exact shape; mismatches
// are rejected by parameter name before anything is written.
template <class S>
void load_params_into(VectorFieldModel<S>& model, const CheckpointData& data, bool use_ema) {
  std::map<std::string, const std::pair<Shape, std::vector<double>>*> by_name;
  for (const auto& [name, entry] : data.params) by_name[name] = &entry;

  ParamList<S> params = collect_params(model);
  std::vector<std::pair<Tensor<S>*, const std::vector<double>*>> staged;
  for (const auto& [name, p] : params) {
    const std::vector<double>* values = nullptr;
    if (use_ema) {
      auto it = data.ema.find(name);
      if (it == data.ema.end()) fail("checkpoint: EMA entry missing for '", name, "'");
      values = &it->second;
    } else {
      auto it = by_name.find(name);
      if (it == by_name.end()) fail("checkpoint: parameter '", name, "' missing");
      if (it->second->first != p->shape())
        fail("checkpoint: parameter '", name, "' has shape ", shape_str(it->second->first),
             ", model expects ", shape_str(p->shape()));
      values = &it->second->second;
    }
    if (values->size() != static_cast<std::size_t>(p->numel()))
      fail("checkpoint: '", name, "' holds ", values->size(), " values, model expects ",
           p->numel());
    staged.emplace_back(p, values);
  }
  if (!use_ema && by_name.size() != params.size())
    fail("checkpoint: ", by_name.size(), " stored parameters for a model with ", params.size());
  for (auto& [p, values] : staged) {
    auto& value = p->mutable_data();
    for (std::size_t i = 0; i < value.size(); ++i) value[i] = static_cast<S>((*values)[i]);
  }
}

// Restores a freshly constructed trainer (same corpus, congruent model) to
// the saved state: weights, EMA, optimizer moments, update counter, and the
// random stream. All validation happens before any state is touched.
template <class S>
void restore_trainer(const CheckpointData& data, Trainer<S>& trainer) {
  if (data.precision != sizeof(S))
    fail("checkpoint: precision is ", static_cast<int>(data.precision),
         " bytes per scalar, build uses ", sizeof(S));
  for (const auto& table : {&data.ema, &data.opt_m, &data.opt_v}) {
    for (const auto& [name, values] : *table) {
      bool found = false;
      for (const auto& [pname, p] : trainer.params()) {
        if (pname != name) continue;
        found = true;
        if (values.size() != static_cast<std::size_t>(p->numel()))
          fail("checkpoint: state for '", name, "' holds ", values.size(),
               " values, model expects ", p->numel());
        break;
      }
      if (!found) fail("checkpoint: state entry '", name, "' matches no model parameter");
    }
  }
  Rng restored_rng = Rng::deserialize(data.rng_state);

  load_params_into(trainer.model(), data, /*use_ema=*/false);
  trainer.ema().shadow = data.ema;
  trainer.optimizer().m = data.opt_m;
  trainer.optimizer().v = data.opt_v;
  trainer.optimizer().step_count = static_cast<int64_t>(data.opt_step_count);
  trainer.set_update_count(static_cast<int64_t>(data.update_count));
  trainer.rng() = restored_rng;
}

template <class S>
void load_checkpoint(const std::string& path, Trainer<S>& trainer) {
  restore_trainer(read_checkpoint(path), trainer);
}

}  // namespace swayflow
