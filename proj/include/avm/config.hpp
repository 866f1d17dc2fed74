#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "avm/losses.hpp"

namespace avm {

enum class Preset { vm_m, vm_r, vm_ms, ivm_m, ivm_ms, livm, tivm };
enum class Aggregation { mean, mean_std, raw };
enum class EncoderKind { none, lstm, transformer };
enum class LossKind { triplet_struct, infonce };

struct ModelConfig {
  Preset preset = Preset::tivm;
  Aggregation aggregation = Aggregation::raw;
  EncoderKind encoder = EncoderKind::transformer;
  LossKind loss_kind = LossKind::infonce;
  LossConfig loss;

  double dropout = 0.1;
  double bn_momentum = 0.1;

  std::size_t audio_dim = 128;
  std::size_t video_dim = 1000;
  std::size_t seq_len = 15;

  // Fully connected branch: hidden widths, then a projection to embed_dim.
  std::vector<std::size_t> hidden_widths{2048, 1024};
  std::size_t embed_dim = 512;

  // Temporal encoders. encoder_width is also the input projection width.
  std::size_t encoder_width = 512;
  std::size_t encoder_layers = 2;
  std::size_t heads = 8;
  std::size_t ff_width = 2048;
  std::size_t lstm_hidden = 384;
  std::size_t lstm_layers = 2;

  std::uint64_t seed = 0;

  bool operator==(const ModelConfig&) const = default;
};

// Reduced widths for fast experiments and gradient checks. Presets keep
// their aggregation/encoder/loss mapping; only sizes change.
enum class Scale { full, desk, micro };

// Accepts display names ("TIVM", "VM-M") and CLI names ("tivm", "vm-m").
ModelConfig build_preset(std::string_view name);
ModelConfig build_preset(Preset preset);
ModelConfig scaled(ModelConfig config, Scale scale);

std::string preset_name(Preset preset);      // "VM-M"
std::string preset_cli_name(Preset preset);  // "vm-m"
const std::vector<Preset>& all_presets();

std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& text);

}  // namespace avm
