#include "avm/config.hpp"

#include <algorithm>
#include <cctype>
#include <json.hpp>

namespace avm {

namespace {

struct PresetInfo {
  Preset preset;
  const char* name;
  const char* cli;
  Aggregation aggregation;
  EncoderKind encoder;
  LossKind loss;
};

constexpr PresetInfo kPresets[] = {
    {Preset::vm_m, "VM-M", "vm-m", Aggregation::mean, EncoderKind::none, LossKind::triplet_struct},
    {Preset::vm_r, "VM-R", "vm-r", Aggregation::raw, EncoderKind::none, LossKind::triplet_struct},
    {Preset::vm_ms, "VM-MS", "vm-ms", Aggregation::mean_std, EncoderKind::none, LossKind::triplet_struct},
    {Preset::ivm_m, "IVM-M", "ivm-m", Aggregation::mean, EncoderKind::none, LossKind::infonce},
    {Preset::ivm_ms, "IVM-MS", "ivm-ms", Aggregation::mean_std, EncoderKind::none, LossKind::infonce},
    {Preset::livm, "LIVM", "livm", Aggregation::raw, EncoderKind::lstm, LossKind::infonce},
    {Preset::tivm, "TIVM", "tivm", Aggregation::raw, EncoderKind::transformer, LossKind::infonce},
};

const PresetInfo& info(Preset p) {
  return *std::find_if(std::begin(kPresets), std::end(kPresets), [p](const auto& i) { return i.preset == p; });
}

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

template <typename E>
E enum_from(const nlohmann::json& j, const char* key, std::initializer_list<std::pair<E, const char*>> names) {
  const auto value = j.at(key).get<std::string>();
  for (auto [e, n] : names)
    if (value == n) return e;
  throw ConfigError(std::string("unknown ") + key + " '" + value + "'");
}

template <typename E>
const char* enum_to(E value, std::initializer_list<std::pair<E, const char*>> names) {
  for (auto [e, n] : names)
    if (e == value) return n;
  return "?";
}

const std::initializer_list<std::pair<Aggregation, const char*>> kAggNames = {
    {Aggregation::mean, "mean"}, {Aggregation::mean_std, "mean_std"}, {Aggregation::raw, "raw"}};
const std::initializer_list<std::pair<EncoderKind, const char*>> kEncNames = {
    {EncoderKind::none, "none"}, {EncoderKind::lstm, "lstm"}, {EncoderKind::transformer, "transformer"}};
const std::initializer_list<std::pair<LossKind, const char*>> kLossNames = {
    {LossKind::triplet_struct, "triplet_struct"}, {LossKind::infonce, "infonce"}};

}  // namespace

const std::vector<Preset>& all_presets() {
  static const std::vector<Preset> presets{Preset::vm_m,   Preset::vm_r, Preset::vm_ms, Preset::ivm_m,
                                           Preset::ivm_ms, Preset::livm, Preset::tivm};
  return presets;
}

std::string preset_name(Preset preset) { return info(preset).name; }
std::string preset_cli_name(Preset preset) { return info(preset).cli; }

ModelConfig build_preset(Preset preset) {
  const auto& i = info(preset);
  ModelConfig cfg;
  cfg.preset = preset;
  cfg.aggregation = i.aggregation;
  cfg.encoder = i.encoder;
  cfg.loss_kind = i.loss;
  return cfg;
}

ModelConfig build_preset(std::string_view name) {
  const auto key = lower(name);
  for (const auto& i : kPresets)
    if (key == i.cli) return build_preset(i.preset);
  std::string valid;
  for (const auto& i : kPresets) valid += std::string(valid.empty() ? "" : ", ") + i.cli;
  throw ConfigError("unknown preset '" + std::string(name) + "'; valid presets: " + valid);
}

ModelConfig scaled(ModelConfig cfg, Scale scale) {
  switch (scale) {
    case Scale::full:
      break;
    case Scale::desk:
      cfg.hidden_widths = {256, 128};
      cfg.embed_dim = 512;
      cfg.encoder_width = 64;
      cfg.encoder_layers = 2;
      cfg.heads = 4;
      cfg.ff_width = 128;
      cfg.lstm_hidden = 48;
      cfg.lstm_layers = 2;
      break;
    case Scale::micro:
      cfg.hidden_widths = {16, 16};
      cfg.embed_dim = 16;
      cfg.encoder_width = 4;
      cfg.encoder_layers = 1;
      cfg.heads = 2;
      cfg.ff_width = 6;
      cfg.lstm_hidden = 3;
      cfg.lstm_layers = 2;
      break;
  }
  return cfg;
}

std::string config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["preset"] = preset_name(c.preset);
  j["aggregation"] = enum_to(c.aggregation, kAggNames);
  j["encoder"] = enum_to(c.encoder, kEncNames);
  j["loss_kind"] = enum_to(c.loss_kind, kLossNames);
  j["loss"] = {{"temperature", c.loss.temperature}, {"symmetric", c.loss.symmetric},
               {"margin", c.loss.margin},           {"top_q", c.loss.top_q},
               {"intra_k", c.loss.intra_k},         {"structure_weight", c.loss.structure_weight}};
  j["dropout"] = c.dropout;
  j["bn_momentum"] = c.bn_momentum;
  j["audio_dim"] = c.audio_dim;
  j["video_dim"] = c.video_dim;
  j["seq_len"] = c.seq_len;
  j["hidden_widths"] = c.hidden_widths;
  j["embed_dim"] = c.embed_dim;
  j["encoder_width"] = c.encoder_width;
  j["encoder_layers"] = c.encoder_layers;
  j["heads"] = c.heads;
  j["ff_width"] = c.ff_width;
  j["lstm_hidden"] = c.lstm_hidden;
  j["lstm_layers"] = c.lstm_layers;
  j["seed"] = c.seed;
  return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ModelConfig c = build_preset(j.at("preset").get<std::string>());
    c.aggregation = enum_from(j, "aggregation", kAggNames);
    c.encoder = enum_from(j, "encoder", kEncNames);
    c.loss_kind = enum_from(j, "loss_kind", kLossNames);
    const auto& l = j.at("loss");
    c.loss.temperature = l.at("temperature").get<double>();
    c.loss.symmetric = l.at("symmetric").get<bool>();
    c.loss.margin = l.at("margin").get<double>();
    c.loss.top_q = l.at("top_q").get<std::size_t>();
    c.loss.intra_k = l.at("intra_k").get<std::size_t>();
    c.loss.structure_weight = l.at("structure_weight").get<double>();
    c.dropout = j.at("dropout").get<double>();
    c.bn_momentum = j.at("bn_momentum").get<double>();
    c.audio_dim = j.at("audio_dim").get<std::size_t>();
    c.video_dim = j.at("video_dim").get<std::size_t>();
    c.seq_len = j.at("seq_len").get<std::size_t>();
    c.hidden_widths = j.at("hidden_widths").get<std::vector<std::size_t>>();
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.encoder_width = j.at("encoder_width").get<std::size_t>();
    c.encoder_layers = j.at("encoder_layers").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.ff_width = j.at("ff_width").get<std::size_t>();
    c.lstm_hidden = j.at("lstm_hidden").get<std::size_t>();
    c.lstm_layers = j.at("lstm_layers").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
}

}  // namespace avm
