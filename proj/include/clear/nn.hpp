#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "clear/rng.hpp"
#include "clear/tensor.hpp"

namespace clear {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct LinearLayer {
  Tensor weight;  // [out×in]
  Tensor bias;    // [out]

  static LinearLayer init(int out_dim, int in_dim, Rng& rng);
  Tensor apply_vec(const Tensor& x) const;   // [in] -> [out]
  Tensor apply_rows(const Tensor& x) const;  // [R×in] -> [R×out]
  int out_dim() const { return weight.shape()[0]; }
  int in_dim() const { return weight.shape()[1]; }
};

// (x - μ)/√(σ² + eps) · scale + shift over a single vector.
Tensor layer_norm(const Tensor& x, const Tensor& scale, const Tensor& shift, double eps = 1e-5);

enum class EncoderKind { PatchAttention, GatedConv };

EncoderKind encoder_kind_from_string(const std::string& s);
std::string to_string(EncoderKind k);

struct EncoderConfig {
  EncoderKind kind = EncoderKind::PatchAttention;
  int input_h = 64;
  int input_w = 64;
  int embed_dim = 64;  // output embedding width d
  int depth = 2;
  int patch_size = 16;       // patch-attn
  int channels = 16;         // gated-conv
  int projection_hidden = 128;

  void validate() const;  // throws listing every violation
};

// Pre-norm residual attention block over [T×d] tokens, single head.
struct SelfAttentionBlock {
  Tensor ln1_scale, ln1_shift;
  LinearLayer q, k, v, out;
  Tensor ln2_scale, ln2_shift;
  LinearLayer mlp1, mlp2;

  Tensor forward(const Tensor& tokens) const;
};

// norm(conv_main(x)) ⊙ σ(conv_gate(x)); spatial dims preserved by zero padding.
// A fully closed gate drives the block output to zero.
struct GatedConvBlock {
  Tensor main_w, main_b;
  Tensor gate_w, gate_b;
  Tensor norm_scale, norm_shift;  // per channel

  Tensor forward(const Tensor& x) const;  // [C×H×W] -> [C×H×W]
};

class Encoder {
 public:
  Encoder() = default;

  const EncoderConfig& config() const { return cfg_; }
  Tensor encode(const Tensor& slice) const;  // [H×W] -> [embed_dim]
  std::vector<NamedParam> named_params() const;
  std::vector<Tensor> params() const;
  int64_t param_count() const;
  void set_trainable(bool trainable);
  void copy_data_from(const Encoder& other);  // values only, shapes must match
  void load_named(const std::vector<NamedParam>& entries);

 private:
  friend Encoder init_params(const EncoderConfig&, uint64_t);

  EncoderConfig cfg_;
  // patch-attn
  LinearLayer patch_embed_;
  Tensor pos_embed_;
  std::vector<SelfAttentionBlock> attn_blocks_;
  Tensor final_ln_scale_, final_ln_shift_;
  // gated-conv
  Tensor stem_w_, stem_b_;
  std::vector<GatedConvBlock> conv_blocks_;
  // shared projection head
  LinearLayer head1_, head2_;

  Tensor backbone(const Tensor& slice) const;
};

Encoder init_params(const EncoderConfig& cfg, uint64_t seed);

}  // namespace clear
