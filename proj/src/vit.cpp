#include "stressvit/vit.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <stdexcept>

namespace stressvit {

ViTConfig ViTConfig::b16() { return {224, 16, 3, 768, 12, 12, 3072}; }
ViTConfig ViTConfig::l16() { return {224, 16, 3, 1024, 24, 16, 4096}; }
ViTConfig ViTConfig::tiny() { return {32, 8, 3, 32, 2, 4, 64}; }

ViTConfig ViTConfig::preset(std::string_view name) {
  std::string up(name);
  std::transform(up.begin(), up.end(), up.begin(), [](unsigned char c) { return std::toupper(c); });
  if (up == "B/16" || up == "VIT-B/16" || up == "B16") return b16();
  if (up == "L/16" || up == "VIT-L/16" || up == "L16") return l16();
  if (up == "TINY") return tiny();
  throw std::invalid_argument("unknown model preset '" + std::string(name) + "' (expected B/16, L/16 or TINY)");
}

void ViTConfig::validate() const {
  for (auto [v, what] : {std::pair{image_size, "image_size"}, {patch_size, "patch_size"}, {channels, "channels"},
                         {hidden_dim, "hidden_dim"}, {num_layers, "num_layers"}, {num_heads, "num_heads"},
                         {mlp_dim, "mlp_dim"}, {num_outputs, "num_outputs"}}) {
    if (v < 1) throw std::invalid_argument(std::string(what) + " must be at least 1");
  }
  if (image_size % patch_size != 0) {
    throw std::invalid_argument("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                                std::to_string(patch_size));
  }
  if (hidden_dim % num_heads != 0) {
    throw std::invalid_argument("hidden_dim " + std::to_string(hidden_dim) + " is not divisible by num_heads " +
                                std::to_string(num_heads));
  }
  if (!(attn_dropout >= 0.0 && attn_dropout < 1.0) || !(mlp_dropout >= 0.0 && mlp_dropout < 1.0)) {
    throw std::invalid_argument("dropout rates must lie in [0, 1)");
  }
  if (!(norm_eps > 0.0)) throw std::invalid_argument("norm_eps must be positive");
}

bool ViTConfig::same_shape(const ViTConfig& o) const {
  return image_size == o.image_size && patch_size == o.patch_size && channels == o.channels &&
         hidden_dim == o.hidden_dim && num_layers == o.num_layers && num_heads == o.num_heads &&
         mlp_dim == o.mlp_dim && num_outputs == o.num_outputs;
}

namespace {

Parameter zeros(Shape s) { return Parameter(Tensor(std::move(s))); }
Parameter ones(Shape s) { return Parameter(Tensor(std::move(s), 1.0)); }

void fill_truncated(Parameter& p, Rng& rng) {
  for (auto& v : p.value.data()) v = rng.truncated_normal(0.02);
}

}  // namespace

ViTModel::ViTModel(const ViTConfig& cfg) : config(cfg) {
  config.validate();
  const std::size_t h = cfg.hidden_dim;
  patch_w = zeros({cfg.patch_len(), h});
  patch_b = zeros({h});
  class_token = zeros({h});
  position = zeros({cfg.seq_len(), h});
  blocks.resize(cfg.num_layers);
  for (auto& b : blocks) {
    b.norm1_gamma = ones({h});
    b.norm1_beta = zeros({h});
    b.query_w = zeros({h, h});
    b.query_b = zeros({h});
    b.key_w = zeros({h, h});
    b.key_b = zeros({h});
    b.value_w = zeros({h, h});
    b.value_b = zeros({h});
    b.out_w = zeros({h, h});
    b.out_b = zeros({h});
    b.norm2_gamma = ones({h});
    b.norm2_beta = zeros({h});
    b.mlp1_w = zeros({h, cfg.mlp_dim});
    b.mlp1_b = zeros({cfg.mlp_dim});
    b.mlp2_w = zeros({cfg.mlp_dim, h});
    b.mlp2_b = zeros({h});
  }
  final_gamma = ones({h});
  final_beta = zeros({h});
  head_w = zeros({h, cfg.num_outputs});
  head_b = zeros({cfg.num_outputs});
}

ViTModel ViTModel::init(const ViTConfig& cfg, Rng& rng) {
  ViTModel m(cfg);
  // Draw order is fixed: embedding, positions, then per block q, k, v, out,
  // mlp1, mlp2, then the head.
  fill_truncated(m.patch_w, rng);
  fill_truncated(m.position, rng);
  for (auto& b : m.blocks) {
    for (Parameter* p : {&b.query_w, &b.key_w, &b.value_w, &b.out_w, &b.mlp1_w, &b.mlp2_w}) fill_truncated(*p, rng);
  }
  fill_truncated(m.head_w, rng);
  return m;
}

std::vector<NamedParameter> ViTModel::named_parameters() {
  std::vector<NamedParameter> out;
  out.push_back({"patch_embed.weight", &patch_w});
  out.push_back({"patch_embed.bias", &patch_b});
  out.push_back({"class_token", &class_token});
  out.push_back({"position_embeddings", &position});
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    auto& b = blocks[i];
    const std::string pre = "blocks." + std::to_string(i) + ".";
    out.push_back({pre + "norm1.gamma", &b.norm1_gamma});
    out.push_back({pre + "norm1.beta", &b.norm1_beta});
    out.push_back({pre + "attn.query.weight", &b.query_w});
    out.push_back({pre + "attn.query.bias", &b.query_b});
    out.push_back({pre + "attn.key.weight", &b.key_w});
    out.push_back({pre + "attn.key.bias", &b.key_b});
    out.push_back({pre + "attn.value.weight", &b.value_w});
    out.push_back({pre + "attn.value.bias", &b.value_b});
    out.push_back({pre + "attn.out.weight", &b.out_w});
    out.push_back({pre + "attn.out.bias", &b.out_b});
    out.push_back({pre + "norm2.gamma", &b.norm2_gamma});
    out.push_back({pre + "norm2.beta", &b.norm2_beta});
    out.push_back({pre + "mlp.fc1.weight", &b.mlp1_w});
    out.push_back({pre + "mlp.fc1.bias", &b.mlp1_b});
    out.push_back({pre + "mlp.fc2.weight", &b.mlp2_w});
    out.push_back({pre + "mlp.fc2.bias", &b.mlp2_b});
  }
  out.push_back({"final_norm.gamma", &final_gamma});
  out.push_back({"final_norm.beta", &final_beta});
  out.push_back({"head.weight", &head_w});
  out.push_back({"head.bias", &head_b});
  return out;
}

std::vector<ConstNamedParameter> ViTModel::named_parameters() const {
  std::vector<ConstNamedParameter> out;
  for (auto& np : const_cast<ViTModel*>(this)->named_parameters()) out.push_back({std::move(np.name), np.param});
  return out;
}

std::vector<Parameter*> ViTModel::parameters() {
  std::vector<Parameter*> out;
  for (auto& np : named_parameters()) out.push_back(np.param);
  return out;
}

std::size_t ViTModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& np : named_parameters()) n += np.param->value.size();
  return n;
}

void ViTModel::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

std::size_t parameter_count(const ViTConfig& c) {
  c.validate();
  const std::size_t h = c.hidden_dim;
  const std::size_t per_block = 4 * h                      // two norms
                                + 4 * (h * h + h)          // q, k, v, out
                                + (h * c.mlp_dim + c.mlp_dim) + (c.mlp_dim * h + h);
  return c.patch_len() * h + h + h + c.seq_len() * h + c.num_layers * per_block + 2 * h + h * c.num_outputs +
         c.num_outputs;
}

void set_trainable(ViTModel& model, const FreezeSpec& spec) {
  const std::size_t layers = model.blocks.size();
  if (!spec.trailing_blocks) {
    for (Parameter* p : model.parameters()) p->trainable = true;
    return;
  }
  const std::size_t n = *spec.trailing_blocks;
  if (n > layers) {
    throw std::invalid_argument("cannot train the last " + std::to_string(n) + " blocks of a " +
                                std::to_string(layers) + "-block encoder");
  }
  const bool embeddings = n == layers;
  for (Parameter* p : {&model.patch_w, &model.patch_b, &model.class_token, &model.position}) p->trainable = embeddings;
  for (std::size_t i = 0; i < layers; ++i) {
    const bool on = i >= layers - n;
    auto& b = model.blocks[i];
    for (Parameter* p : {&b.norm1_gamma, &b.norm1_beta, &b.query_w, &b.query_b, &b.key_w, &b.key_b, &b.value_w,
                         &b.value_b, &b.out_w, &b.out_b, &b.norm2_gamma, &b.norm2_beta, &b.mlp1_w, &b.mlp1_b,
                         &b.mlp2_w, &b.mlp2_b}) {
      p->trainable = on;
    }
  }
  model.final_gamma.trainable = n > 0;
  model.final_beta.trainable = n > 0;
  model.head_w.trainable = true;
  model.head_b.trainable = true;
}

Tensor patchify(const Tensor& image, std::size_t patch_size) {
  if (image.rank() != 3) throw ShapeError("patchify expects [C x H x W], got " + shape_str(image.shape()));
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h != w) throw ShapeError("patchify expects a square image, got " + shape_str(image.shape()));
  if (patch_size == 0 || h % patch_size != 0) {
    throw ShapeError("image size " + std::to_string(h) + " is not divisible by patch size " +
                     std::to_string(patch_size));
  }
  const std::size_t g = h / patch_size;
  const std::size_t len = patch_size * patch_size * c;
  Tensor out({g * g, len});
  for (std::size_t pr = 0; pr < g; ++pr) {
    for (std::size_t pc = 0; pc < g; ++pc) {
      double* row = out.data().data() + (pr * g + pc) * len;
      for (std::size_t i = 0; i < patch_size; ++i) {
        for (std::size_t j = 0; j < patch_size; ++j) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            row[(i * patch_size + j) * c + ch] = image[(ch * h + pr * patch_size + i) * w + pc * patch_size + j];
          }
        }
      }
    }
  }
  return out;
}

Var embed(const Tensor& patches, const ViTModel& model, Tape* tape) {
  const auto& cfg = model.config;
  if (patches.rank() != 2 || patches.cols() != model.patch_w.value.dim(0) || patches.rows() != cfg.num_patches()) {
    throw ShapeError("embed expects patches [" + std::to_string(cfg.num_patches()) + "x" +
                     std::to_string(model.patch_w.value.dim(0)) + "], got " + shape_str(patches.shape()));
  }
  Var proj = add_row(matmul(constant(patches), leaf(model.patch_w, tape)), leaf(model.patch_b, tape));
  Var cls = reshape(leaf(model.class_token, tape), {1, cfg.hidden_dim});
  const Var parts[] = {cls, proj};
  return add(concat_rows(parts), leaf(model.position, tape));
}

Var mhsa_forward(const Var& tokens, const EncoderBlock& b, const ViTConfig& cfg, bool training, Rng* rng,
                 HeadCapture* capture, Tape* tape) {
  if (tokens.value().rank() != 2 || tokens.value().cols() != cfg.hidden_dim) {
    throw ShapeError("attention expects tokens [T x " + std::to_string(cfg.hidden_dim) + "], got " +
                     shape_str(tokens.shape()));
  }
  const std::size_t dk = cfg.head_dim();
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  Var q = add_row(matmul(tokens, leaf(b.query_w, tape)), leaf(b.query_b, tape));
  Var k = add_row(matmul(tokens, leaf(b.key_w, tape)), leaf(b.key_b, tape));
  Var v = add_row(matmul(tokens, leaf(b.value_w, tape)), leaf(b.value_b, tape));

  std::vector<Var> heads;
  heads.reserve(cfg.num_heads);
  for (std::size_t h = 0; h < cfg.num_heads; ++h) {
    Var qh = slice_cols(q, h * dk, (h + 1) * dk);
    Var kh = slice_cols(k, h * dk, (h + 1) * dk);
    Var vh = slice_cols(v, h * dk, (h + 1) * dk);
    Var attn = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_dk));
    if (capture) {
      capture->query.push_back(qh.value());
      capture->key.push_back(kh.value());
      capture->value.push_back(vh.value());
      capture->attention.push_back(attn.value());
    }
    heads.push_back(matmul(dropout(attn, cfg.attn_dropout, training, rng), vh));
  }
  Var out = add_row(matmul(concat_cols(heads), leaf(b.out_w, tape)), leaf(b.out_b, tape));
  if (capture) capture->output = out.value();
  return out;
}

Var encoder_block_forward(const Var& tokens, const EncoderBlock& b, const ViTConfig& cfg, bool training, Rng* rng,
                          HeadCapture* capture, Tape* tape) {
  Var normed = layer_norm(tokens, leaf(b.norm1_gamma, tape), leaf(b.norm1_beta, tape), cfg.norm_eps);
  Var x = add(tokens, mhsa_forward(normed, b, cfg, training, rng, capture, tape));
  Var h = layer_norm(x, leaf(b.norm2_gamma, tape), leaf(b.norm2_beta, tape), cfg.norm_eps);
  h = gelu(add_row(matmul(h, leaf(b.mlp1_w, tape)), leaf(b.mlp1_b, tape)));
  h = add_row(matmul(h, leaf(b.mlp2_w, tape)), leaf(b.mlp2_b, tape));
  return add(x, dropout(h, cfg.mlp_dropout, training, rng));
}

namespace {

Tensor image_at(const Tensor& batch, std::size_t i) {
  const std::size_t c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  const std::size_t len = c * h * w;
  std::vector<double> data(batch.data().begin() + static_cast<std::ptrdiff_t>(i * len),
                           batch.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * len));
  return Tensor({c, h, w}, std::move(data));
}

void check_batch(const ViTConfig& cfg, const Tensor& batch) {
  if (batch.rank() != 4 || batch.dim(1) != cfg.channels || batch.dim(2) != cfg.image_size ||
      batch.dim(3) != cfg.image_size) {
    throw ShapeError("expected batch [B x " + std::to_string(cfg.channels) + " x " + std::to_string(cfg.image_size) +
                     " x " + std::to_string(cfg.image_size) + "], got " + shape_str(batch.shape()));
  }
}

// Class-token row after the encoder and final norm, [1 x hidden].
Var encode(const ViTModel& model, const Tensor& image, bool training, Rng* rng, std::vector<HeadCapture>* captures,
           Tape* tape) {
  const auto& cfg = model.config;
  Var x = embed(patchify(image, cfg.patch_size), model, tape);
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    HeadCapture* cap = captures ? &(*captures)[l] : nullptr;
    x = encoder_block_forward(x, model.blocks[l], cfg, training, rng, cap, tape);
  }
  return layer_norm(slice_rows(x, 0, 1), leaf(model.final_gamma, tape), leaf(model.final_beta, tape), cfg.norm_eps);
}

}  // namespace

ForwardResult vit_forward(const ViTModel& model, const Tensor& batch, const ForwardOptions& options, Tape* tape,
                          Rng* rng) {
  const auto& cfg = model.config;
  check_batch(cfg, batch);
  const std::size_t n = batch.dim(0);
  const std::size_t layers = model.blocks.size();
  const std::size_t heads = cfg.num_heads, t = cfg.seq_len(), dk = cfg.head_dim(), hd = cfg.hidden_dim;

  ForwardResult result;
  if (options.capture) {
    result.records.resize(layers);
    for (std::size_t l = 0; l < layers; ++l) {
      auto& r = result.records[l];
      r.layer_index = l;
      r.query = Tensor({n, heads, t, dk});
      r.key = Tensor({n, heads, t, dk});
      r.value = Tensor({n, heads, t, dk});
      r.attention = Tensor({n, heads, t, t});
      r.output = Tensor({n, t, hd});
    }
  }

  std::vector<Var> logits;
  logits.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<HeadCapture> caps(options.capture ? layers : 0);
    Var cls = encode(model, image_at(batch, i), options.training, rng, options.capture ? &caps : nullptr, tape);
    logits.push_back(add_row(matmul(cls, leaf(model.head_w, tape)), leaf(model.head_b, tape)));
    for (std::size_t l = 0; l < caps.size(); ++l) {
      auto& r = result.records[l];
      auto put = [](Tensor& dst, std::size_t offset, const Tensor& src) {
        std::copy(src.data().begin(), src.data().end(), dst.data().begin() + static_cast<std::ptrdiff_t>(offset));
      };
      for (std::size_t h = 0; h < heads; ++h) {
        put(r.query, (i * heads + h) * t * dk, caps[l].query[h]);
        put(r.key, (i * heads + h) * t * dk, caps[l].key[h]);
        put(r.value, (i * heads + h) * t * dk, caps[l].value[h]);
        put(r.attention, (i * heads + h) * t * t, caps[l].attention[h]);
      }
      put(r.output, i * t * hd, caps[l].output);
    }
  }
  result.logits = concat_rows(logits);
  return result;
}

Tensor vit_logits(const ViTModel& model, const Tensor& batch) {
  return vit_forward(model, batch, {}, nullptr, nullptr).logits.value();
}

Tensor pooled_representation(const ViTModel& model, const Tensor& image) {
  Var cls = encode(model, image, false, nullptr, nullptr, nullptr);
  return cls.value().reshaped({model.config.hidden_dim});
}

Tensor stack_images(std::span<const Tensor> images) {
  if (images.empty()) throw ShapeError("cannot stack an empty image list");
  const Shape s = images[0].shape();
  Shape out_shape{images.size()};
  out_shape.insert(out_shape.end(), s.begin(), s.end());
  std::vector<double> data;
  data.reserve(shape_numel(out_shape));
  for (const auto& im : images) {
    if (im.shape() != s) throw ShapeError("stack_images: mixed shapes " + shape_str(s) + " and " + shape_str(im.shape()));
    data.insert(data.end(), im.data().begin(), im.data().end());
  }
  return Tensor(std::move(out_shape), std::move(data));
}

}  // namespace stressvit
