// SPDX-License-Identifier: Apache-2.0
/**
 * @file model.hpp
 * @brief Dual-head network: shared encoder, float trait head, quantized state head,
 *        agitation regressor, reconstruction decoders, training step, onboarding.
 */
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mpib/features.hpp"
#include "mpib/losses.hpp"
#include "mpib/nn.hpp"
#include "mpib/quant.hpp"

namespace mpib::model {

using nn::Mat;
using nn::RowVec;
using nn::Vec;

enum class EncoderMode { fp16, int8_ptq, int8_qat };
EncoderMode parse_encoder_mode(const std::string& s);
std::string to_string(EncoderMode m);

struct ModelConfig {
  int n_mels = features::kMelBands;
  int frames = features::kWindowFrames;
  int stem_channels = 8;
  int conv_blocks = 4;
  int embed_dim = 128;
  double encoder_dropout = 0.1;
  int trait_dim = 64;
  double trait_dropout = 0.1;
  int state_dim = 32;
  int state_bits = 4;
  double state_dropout = 0.3;
  int agit_hidden1 = 256;
  int agit_hidden2 = 144;
  double agit_bias_init = 2.0;
  int recon_hidden = 128;
  int recon_pool = 4;
  int tmae_patch = 16;
  int tmae_hidden = 64;
  double ln_eps = 1e-5;
  int calibration_interval = 100;

  void validate() const;
};

/// Per-tensor symmetric INT8 fake quantization; mask marks unclipped entries.
struct FakeQuant {
  Mat value;
  Mat mask;
};
FakeQuant fake_quant_tensor(const Mat& x, double scale, int bits);
/// Per-row (output channel) symmetric fake quantization of a weight matrix.
FakeQuant fake_quant_rows(const Mat& w, int bits);

class Encoder {
 public:
  Encoder() = default;
  Encoder(const ModelConfig& cfg, Rng& rng);

  /// x: [B x frames*n_mels] time-major windows. Returns h [B x embed_dim].
  Mat forward(const Mat& x, int frames, EncoderMode mode, bool train, Rng& rng);
  /// Back-propagates through the last training-path forward; returns dL/dx.
  Mat backward(const Mat& dh);
  /// Jacobian-vector product at the last float-path forward (dropout masks reused).
  Mat tangent(const Mat& dx) const;

  /// Records per-layer activation ranges for post-training INT8 quantization.
  void calibrate_ptq(const Mat& x, int frames);
  bool int8_ready() const { return !act_absmax_.empty(); }

  std::vector<nn::Param*> params();
  std::size_t param_count() const;
  nn::Dropout& dropout() { return drop_; }
  const std::vector<double>& activation_ranges() const { return act_absmax_; }
  void set_activation_ranges(std::vector<double> r) { act_absmax_ = std::move(r); }

 private:
  Mat forward_float(const Mat& x, int frames, bool train, bool qat, Rng& rng);
  Mat forward_int8(const Mat& x, int frames) const;
  void observe(std::size_t slot, const Mat& a, bool qat);
  Mat maybe_fq(std::size_t slot, const Mat& a, bool qat);
  Mat fq_backward(std::size_t slot, const Mat& g) const;

  ModelConfig cfg_;
  nn::Conv3x3 stem_;
  nn::ReLU stem_relu_;
  std::vector<nn::Depthwise3x3> dw_;
  std::vector<nn::ReLU> dw_relu_;
  std::vector<nn::Linear> pw_;
  std::vector<nn::ReLU> pw_relu_;
  nn::Linear fc_;
  nn::Dropout drop_;
  std::vector<nn::Shape4> shapes_;  // input shape of stem, dw_i, pw_i ...
  nn::Shape4 pool_shape_;
  std::vector<double> act_absmax_;  // one per quantized op input
  std::vector<Mat> fq_masks_;       // QAT activation masks
  bool last_qat_ = false;
  bool warned_range_ = false;
};

class TraitHead {
 public:
  TraitHead() = default;
  TraitHead(const ModelConfig& cfg, Rng& rng);
  Mat forward(const Mat& h, bool train, Rng& rng);
  Mat backward(const Mat& dz);
  Mat tangent(const Mat& dh) const;
  std::vector<nn::Param*> params() { return {&lin.W, &lin.b}; }
  std::size_t param_count() const { return static_cast<std::size_t>(lin.W.size() + lin.b.size()); }
  nn::Linear lin;
  nn::LayerNorm ln;
  nn::Dropout drop;
};

struct StateEmbedding {
  std::vector<std::int32_t> codes;  // [B x dim] row-major; empty when bits == 16
  double scale = 1.0;
  int bits = 4;
};

struct StateOutput {
  Mat pre;  // normalized activations before output quantization
  Mat zq;   // dequantized state embedding (pre-dropout)
  Mat z;    // after dropout (training input to downstream heads)
  StateEmbedding emb;
};

/// Linear -> QLayerNorm(INT8) -> b-bit output quantization -> Dropout.
class StateHead {
 public:
  StateHead() = default;
  StateHead(const ModelConfig& cfg, Rng& rng);

  StateOutput forward(const Mat& h, bool train, Rng& rng);
  /// dz: gradient w.r.t. post-dropout output; dzq: extra gradient w.r.t. dequantized output.
  Mat backward(const Mat& dz, const Mat& dzq);

  /// Integer deployment path for bits == 4: INT8 h, packed INT4 weights.
  StateEmbedding forward_deploy(const Mat& h) const;
  quant::PackedInt4Matrix packed_weights() const;

  /// Refreshes weight scales and activation scales from the current observation window.
  void recalibrate();
  void observe(const Mat& h, const Mat& a, const Mat& n);
  bool calibrated() const { return !wscheme_.scales.empty() || bits_ == 16; }

  std::vector<nn::Param*> params() { return {&lin.W, &lin.b}; }
  std::size_t param_count() const { return static_cast<std::size_t>(lin.W.size() + lin.b.size()); }
  int bits() const { return bits_; }
  int dim() const { return lin.out(); }
  const quant::QuantScheme& weight_scheme() const { return wscheme_; }
  double act_scale() const { return act_scale_; }
  double out_scale() const { return out_scale_; }
  double input_scale() const { return in_scale_; }
  void set_scales(quant::QuantScheme w, double act, double out, double in);
  Mat effective_weight() const;
  nn::Dropout& dropout() { return drop_; }

  nn::Linear lin;

 private:
  Mat qln(const Mat& a, Vec& inv_std, Mat& int8_mask) const;
  int bits_ = 4;
  double eps_ = 1e-5;
  int interval_ = 100;
  long steps_ = 0;
  quant::QuantScheme wscheme_;
  double act_scale_ = 0.0, out_scale_ = 0.0, in_scale_ = 0.0;
  double win_act_ = 0.0, win_out_ = 0.0, win_in_ = 0.0;
  nn::Dropout drop_;
  // cache
  Mat wmask_, int8_mask_, out_mask_, pre_;
  Vec inv_std_;
  nn::LayerNorm plain_ln_;
};

class AgitationMLP {
 public:
  AgitationMLP() = default;
  AgitationMLP(const ModelConfig& cfg, int in_dim, Rng& rng);
  Mat forward(const Mat& z);          // raw (unclipped) predictions [B x 1]
  Mat backward(const Mat& dy);
  Mat apply(const Mat& z) const;      // no caching
  std::vector<double> predict(const Mat& z) const;  // clipped to [0, 4]
  std::vector<nn::Param*> params();
  std::size_t param_count() const;
  nn::Linear l1, l2, l3;

 private:
  nn::ReLU r1_, r2_;
};

/// Two-layer MLP: in -> hidden (ReLU) -> out.
class Mlp2 {
 public:
  Mlp2() = default;
  Mlp2(const std::string& name, int in, int hidden, int out, Rng& rng);
  Mat forward(const Mat& x);
  Mat backward(const Mat& dy);
  std::vector<nn::Param*> params();
  std::size_t param_count() const;
  nn::Linear a, b;

 private:
  nn::ReLU r_;
};

/// Average-pools each window by pool x pool; returns [B x (frames/pool * n_mels/pool)].
Mat pool_input(const Mat& x, int frames, int n_mels, int pool);

struct Batch {
  Mat x;  // normalized windows [B x frames*n_mels]
  int frames = features::kWindowFrames;
  std::vector<int> participant;
  std::vector<int> session;
  std::vector<double> agitation;
  std::vector<std::pair<int, int>> smooth_pairs;  // adjacent windows, same session
};

struct TrainConfig {
  losses::LossWeights weights = losses::LossWeights::preset("exp");
  double tau = 0.07;
  bool use_recon = true;
  bool opl_state_grad = true;
  bool freeze_encoder = false;
  double spectral_bound = 1.0;  // <= 0 disables the trait-head projection
  EncoderMode mode = EncoderMode::fp16;
};

struct ForwardCache {
  Mat h, zt, recon_pred, recon_target, pred;
  StateOutput state;
};

class MpibModel {
 public:
  MpibModel() = default;
  MpibModel(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  /// Full forward + backward for one batch; fills parameter gradients (zeroed first).
  losses::LossBreakdown loss_and_grad(const Batch& batch, const TrainConfig& tc, bool train, Rng& rng,
                                      ForwardCache* cache = nullptr);
  /// One optimizer step; returns the loss breakdown.
  losses::LossBreakdown train_step(const Batch& batch, const TrainConfig& tc, nn::AdamW& opt, double lr,
                                   Rng& rng);

  /// Masked-patch pretraining loss and gradients (encoder + T-MAE decoder).
  double tmae_loss_and_grad(const Mat& x, int frames, double mask_ratio, Rng& rng);
  double tmae_pretrain_step(const Mat& x, int frames, double mask_ratio, nn::AdamW& opt, double lr, Rng& rng);

  struct Embeddings {
    Mat h, zt, zs_pre, zq;
    std::vector<double> agitation;  // clipped predictions
    StateEmbedding state;
  };
  /// Inference-mode forward (dropout off) in batches.
  Embeddings embed(const Mat& x, int frames, EncoderMode mode = EncoderMode::fp16);

  std::vector<nn::Param*> params();
  std::vector<nn::Param*> encoder_params() { return encoder.params(); }
  std::size_t param_count();
  void zero_grad();

  Encoder encoder;
  TraitHead trait;
  StateHead state;
  AgitationMLP agit;
  Mlp2 recon;
  Mlp2 tmae;

 private:
  ModelConfig cfg_;
};

// ---------------------------------------------------------------- onboarding

struct TraitProfile {
  std::vector<double> centroid;  // 64 dims
  std::int64_t created_at = 0;
  int source_count = 3;
};

/// Coordinate-wise median of exactly three embeddings; throws "recording flagged: i,j"
/// when any confidence exceeds delta.
TraitProfile onboard(const std::array<std::vector<double>, 3>& embeddings,
                     const std::array<double, 3>& confidence, double delta, std::int64_t created_at = 0);

/// State confidence used for onboarding gating: clipped agitation / 4.
double state_confidence(double agitation_pred);

enum class DriftStatus { ok, reonboard };
DriftStatus check_drift(const TraitProfile& profile, const std::vector<double>& recent, double threshold = 0.3);

/// 64 x binary16 centroid (128 bytes) followed by an 8-byte little-endian timestamp.
std::vector<std::uint8_t> serialize_profile(const TraitProfile& p);
TraitProfile deserialize_profile(const std::vector<std::uint8_t>& bytes);

// ---------------------------------------------------------------- checkpoint

void save_checkpoint(const std::filesystem::path& path, MpibModel& m, const features::GlobalNormStats& norm,
                     const std::string& config_json);
struct LoadedCheckpoint {
  std::string config_json;
  features::GlobalNormStats norm;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, MpibModel& m);
/// Reads only the embedded configuration JSON (needed to size the model before loading).
std::string peek_checkpoint_config(const std::filesystem::path& path);

}  // namespace mpib::model
