#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "stressvit/autodiff.hpp"
#include "stressvit/rng.hpp"
#include "stressvit/tensor.hpp"

namespace stressvit {

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 3;
  std::size_t hidden_dim = 32;
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t mlp_dim = 64;
  double attn_dropout = 0.0;
  double mlp_dropout = 0.0;
  std::size_t num_outputs = 1;
  double norm_eps = 1e-6;

  static ViTConfig b16();
  static ViTConfig l16();
  static ViTConfig tiny();
  // "B/16", "L/16" or "TINY" (case-insensitive).
  static ViTConfig preset(std::string_view name);

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t seq_len() const { return num_patches() + 1; }
  std::size_t patch_len() const { return patch_size * patch_size * channels; }
  std::size_t head_dim() const { return hidden_dim / num_heads; }

  // Throws std::invalid_argument on a broken invariant.
  void validate() const;
  // Same architecture (dropout rates may differ).
  bool same_shape(const ViTConfig& other) const;
};

struct EncoderBlock {
  Parameter norm1_gamma, norm1_beta;
  Parameter query_w, query_b;
  Parameter key_w, key_b;
  Parameter value_w, value_b;
  Parameter out_w, out_b;
  Parameter norm2_gamma, norm2_beta;
  Parameter mlp1_w, mlp1_b;
  Parameter mlp2_w, mlp2_b;
};

struct NamedParameter {
  std::string name;
  Parameter* param;
};

struct ConstNamedParameter {
  std::string name;
  const Parameter* param;
};

class ViTModel {
 public:
  ViTModel() = default;
  // All-zero parameters except unit LayerNorm scales.
  explicit ViTModel(const ViTConfig& config);
  // Truncated-normal (0.02) projections, zero biases and class token.
  static ViTModel init(const ViTConfig& config, Rng& rng);

  ViTConfig config;
  Parameter patch_w, patch_b;
  Parameter class_token;
  Parameter position;
  std::vector<EncoderBlock> blocks;
  Parameter final_gamma, final_beta;
  Parameter head_w, head_b;

  // Stable, structure-mirroring names ("blocks.3.attn.query.weight", ...).
  std::vector<NamedParameter> named_parameters();
  std::vector<ConstNamedParameter> named_parameters() const;
  std::vector<Parameter*> parameters();
  std::size_t parameter_count() const;
  void zero_grad();
};

// Number of scalars a config's model holds, without allocating it.
std::size_t parameter_count(const ViTConfig& config);

// Trailing range of trainable encoder blocks; nullopt means every parameter.
struct FreezeSpec {
  std::optional<std::size_t> trailing_blocks;

  static FreezeSpec all() { return {}; }
  static FreezeSpec last(std::size_t n) { return {n}; }
};

void set_trainable(ViTModel& model, const FreezeSpec& spec);

// Captured per encoder block. Tensors carry a leading batch axis:
// query/key/value [B x heads x T x d_k], attention [B x heads x T x T]
// (post-softmax, before dropout), output [B x T x hidden] (after out-projection).
struct AttentionRecord {
  std::size_t layer_index = 0;
  Tensor query, key, value;
  Tensor attention;
  Tensor output;
};

// Per-image capture filled by mhsa_forward.
struct HeadCapture {
  std::vector<Tensor> query, key, value, attention;
  Tensor output;
};

// [C x H x W] image to [N x patch_len] rows, each patch flattened row, column,
// channel-last.
Tensor patchify(const Tensor& image, std::size_t patch_size);

Var embed(const Tensor& patches, const ViTModel& model, Tape* tape);

Var mhsa_forward(const Var& tokens, const EncoderBlock& block, const ViTConfig& config, bool training, Rng* rng,
                 HeadCapture* capture, Tape* tape);

Var encoder_block_forward(const Var& tokens, const EncoderBlock& block, const ViTConfig& config, bool training,
                          Rng* rng, HeadCapture* capture, Tape* tape);

struct ForwardOptions {
  bool training = false;
  bool capture = false;
};

struct ForwardResult {
  Var logits;                            // [B x num_outputs]
  std::vector<AttentionRecord> records;  // one per block when capturing
};

// batch is [B x C x H x W]. Dropout draws from rng in image order, then block
// order, then attention-before-MLP. rng may be null outside training.
ForwardResult vit_forward(const ViTModel& model, const Tensor& batch, const ForwardOptions& options, Tape* tape,
                          Rng* rng);

// Eval-mode logits without recording.
Tensor vit_logits(const ViTModel& model, const Tensor& batch);

// Final-norm class-token embedding of one [C x H x W] image.
Tensor pooled_representation(const ViTModel& model, const Tensor& image);

// Stacks equally-shaped [C x H x W] images into [B x C x H x W].
Tensor stack_images(std::span<const Tensor> images);

}  // namespace stressvit
