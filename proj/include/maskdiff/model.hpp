#pragma once

#include "maskdiff/common.hpp"
#include "maskdiff/image.hpp"
#include "maskdiff/patch_mask.hpp"
#include "maskdiff/rng.hpp"
#include "maskdiff/schedules.hpp"

#include <string>
#include <unordered_map>
#include <vector>

namespace maskdiff {

enum class HeadMode { dual, x0_only, eps_only };

HeadMode head_mode_from_string(const std::string& s);
std::string to_string(HeadMode m);

struct ModelConfig {
  int image_size = 16;
  int channels = 1;
  int patch_size = 4;
  int width = 128;
  int n_heads = 4;
  int enc_depth = 6;
  int dec_depth = 2;
  int n_classes = 10;  // class vocabulary of the finetuned model; pretraining
                       // always builds the unconditional variant
  int time_embed_dim = 256;
  bool use_adaln = true;
  HeadMode head_mode = HeadMode::dual;

  int grid_side() const { return image_size / patch_size; }
  int n_patches() const { return grid_side() * grid_side(); }
  int patch_dim() const { return patch_size * patch_size * channels; }
  int head_dim() const { return width / n_heads; }
  int out_dim() const { return head_mode == HeadMode::dual ? 2 * patch_dim() : patch_dim(); }
  void validate() const;
};

// Named parameter tensors in stable registration order.  `decay` marks
// tensors eligible for weight decay (2-D weights only; biases, embeddings,
// and norm gains opt out).
struct NamedTensor {
  std::string name;
  Matrix value;
  bool decay = false;
};

class ParamStore {
 public:
  Matrix& add(const std::string& name, int rows, int cols, bool decay);
  Matrix& operator[](const std::string& name);
  const Matrix& at(const std::string& name) const;
  bool has(const std::string& name) const;

  size_t count() const { return tensors_.size(); }
  NamedTensor& tensor(size_t i) { return tensors_[i]; }
  const NamedTensor& tensor(size_t i) const { return tensors_[i]; }

  int64_t n_scalars() const;
  void set_zero();
  ParamStore zeros_like() const;
  // L2 norm over every tensor, used for gradient clipping.
  double global_norm() const;

 private:
  std::vector<NamedTensor> tensors_;
  std::unordered_map<std::string, size_t> index_;
};

// Conditioning vector cache: timestep frequency features through the 2-layer
// SiLU MLP, plus the class-table row (last row = learned null embedding).
struct ConditionEmbedding {
  int t = 0;
  int label_row = -1;  // row added into c; -1 when the model is unconditional
  Vector freq;         // [time_embed_dim]
  Vector mlp_pre;      // [width] first linear output, pre-SiLU
  Vector mlp_act;      // [width]
  Vector t_vec;        // [width]
  Vector c;            // [width] conditioning vector fed to the blocks
  Vector silu_c;       // [width] SiLU(c); input to every AdaLN projection
};

// Per-block AdaLN outputs: modulate(h, s, b) = h .* (1 + s) + b, gates scale
// the residual branches.
struct BlockModulation {
  Vector shift_attn, scale_attn, gate_attn;
  Vector shift_mlp, scale_mlp, gate_mlp;
};

struct DualPrediction {
  Matrix x0_pred;   // [N_patches x patch_dim]; empty in eps_only mode
  Matrix eps_pred;  // [N_patches x patch_dim]; empty in x0_only mode

  bool has_x0() const { return x0_pred.size() > 0; }
  bool has_eps() const { return eps_pred.size() > 0; }
  // The head driving clean-image reconstruction: x0 head when present,
  // otherwise the single eps head reused at t = 0.
  const Matrix& recon() const { return has_x0() ? x0_pred : eps_pred; }
};

struct Representation {
  Vector cls_features;  // [width]
  int t = 0;
};

// sin/cos features of t: sin in the first half, cos in the second, frequencies
// geometrically spaced with maximum period 1e4.
Vector timestep_embedding(int t, int dim);

struct LnCache {
  Matrix x;
  Matrix normed;   // (x - mean) / std, before affine or modulation
  Vector inv_std;  // per row
};

struct AttnCache {
  Matrix q, k, v;              // [L x width], heads packed along columns
  std::vector<Matrix> probs;   // per head [L x L]
  Matrix concat;               // [L x width]
};

struct BlockCache {
  Matrix x_in;
  LnCache ln1;
  Matrix h1;        // modulated / affine LN output feeding attention
  AttnCache attn;
  Matrix attn_out;  // after output projection
  Matrix x_mid;
  LnCache ln2;
  Matrix h2;
  Matrix mlp_pre;   // h2 * W1 + b1
  Matrix mlp_act;   // GELU(mlp_pre)
  Matrix mlp_out;
  BlockModulation mod;
};

// Everything backward needs from one forward pass.
struct Tape {
  ConditionEmbedding cond;
  MaskSpec spec;
  Matrix tokens_in;   // [N x patch_dim]
  Matrix embedded;    // [N x width] patch embed + encoder positions
  Matrix enc_in;      // [prefix + K x width]
  std::vector<BlockCache> enc;
  LnCache enc_norm;
  Matrix latents;     // [prefix + K x width]
  Matrix dec_embedded;  // latents * decoder embed, before scatter
  Matrix dec_in;      // [prefix + N x width]
  std::vector<BlockCache> dec;
  LnCache fin_ln;
  Matrix fin_mod;     // modulated final LN output, patch rows feed the head
  Matrix head_in;     // [N x width]
  Matrix head_out;    // [N x out_dim]
};

// Asymmetric encoder-decoder transformer with AdaLN-zero conditioning and a
// dual x0/eps prediction head.  Forward passes are pure given parameters;
// backward consumes the tape produced by the matching forward call.
class Network {
 public:
  explicit Network(const ModelConfig& cfg);

  void init_params(uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  bool conditional() const { return cfg_.n_classes > 0; }
  int null_label() const { return cfg_.n_classes; }
  // Token rows ahead of the patch tokens: CLS, plus the condition token when
  // AdaLN is disabled and conditioning is injected in-sequence instead.
  int prefix_rows() const { return cfg_.use_adaln ? 1 : 2; }

  // label = -1 selects the null row on conditional models and is ignored on
  // unconditional ones.
  ConditionEmbedding make_condition(int t, int label) const;

  // Patch tokens -> width, plus encoder positional embeddings.
  Matrix embed_patches(const Matrix& tokens) const;

  struct EncodeResult {
    Matrix latents;  // [prefix + K x width], after the final encoder norm
    Vector cls;      // CLS latent
  };
  // `visible` rows must already carry positional embeddings.
  EncodeResult encode(const Matrix& visible, const ConditionEmbedding& cond, Tape* tape) const;

  DualPrediction decode(const Matrix& latents, const MaskSpec& spec,
                        const ConditionEmbedding& cond, Tape* tape) const;

  DualPrediction forward(const Matrix& tokens, const MaskSpec& spec, int t, int label,
                         Tape* tape) const;

  // dx0 / deps are d(loss)/d(head outputs); pass an empty matrix for a head
  // that received no loss.  Gradients accumulate into `grads`.
  void backward(const Tape& tape, const Matrix& dx0, const Matrix& deps,
                ParamStore& grads) const;

  // CLS features of a clean, unmasked image at t = 0 with null conditioning.
  Representation extract_representation(const Image& img) const;
  // Variant for pure-diffusion models: the input is noised to timestep t first.
  Representation extract_representation_noised(const Image& img, const BetaSchedule& schedule,
                                               int t, Rng& rng) const;

  BlockModulation block_modulation(const std::string& prefix, const ConditionEmbedding& cond) const;
  // One transformer block applied standalone (test hook).
  Matrix apply_block(const std::string& prefix, const Matrix& x,
                     const ConditionEmbedding& cond) const;

 private:
  Matrix block_forward(const std::string& prefix, const Matrix& x,
                       const ConditionEmbedding& cond, BlockCache* cache) const;
  Matrix block_backward(const std::string& prefix, const BlockCache& cache,
                        const ConditionEmbedding& cond, const Matrix& dout, ParamStore& grads,
                        Vector& dsilu_c) const;
  Matrix run_stack(const std::string& side, int depth, Matrix x, const ConditionEmbedding& cond,
                   std::vector<BlockCache>* caches) const;

  ModelConfig cfg_;
  ParamStore params_;
};

}  // namespace maskdiff
