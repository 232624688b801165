#pragma once

#include <array>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "tic/entropy.hpp"
#include "tic/swin.hpp"

namespace tic {

/// Rate points of the eight-model ladder, low to high.
inline constexpr std::array<double, 8> kLambdaLadder = {0.0018, 0.0035, 0.0067, 0.013,
                                                        0.025,  0.0483, 0.0932, 0.18};

struct ModelConfig {
  std::string name = "tic-128-q1";
  int channels = 128;
  int main_window = 8;
  int hyper_window = 4;
  std::array<int, 3> main_heads{4, 8, 16};
  std::array<int, 2> hyper_heads{16, 16};
  /// STBs per NTU, ordered toward the bottleneck.
  std::array<int, 3> main_stb_counts{1, 1, 1};
  std::array<int, 2> hyper_stb_counts{1, 1};
  int context_patch = 5;
  int cam_heads = 4;
  int mlp_ratio = 4;
  double lambda = kLambdaLadder[0];
  entropy::QuantMode quant_mode = entropy::QuantMode::noise;

  int hyper_channels() const { return 2 * channels; }
  /// Images must be padded to a multiple of this before g_a.
  static constexpr int kSpatialMultiple = 64;

  /// Throws ContractError when the record cannot build a model.
  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  /// FNV-1a of the architectural fields (lambda and quant_mode excluded);
  /// two configs with equal hashes load each other's checkpoints.
  std::uint32_t hash() const;
};

/// Named presets: tic-128-q1..q4, tic-192-q5..q8, ticplus-128-q1..q4,
/// ticplus-192-q5..q8, plus the reduced "toy-<C>" / "toyplus-<C>" family
/// used for desk-scale training and tests.
ModelConfig preset(const std::string& name);
std::vector<std::string> preset_names();

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Main and hyper analysis/synthesis transforms plus both entropy models.
class TicModel {
 public:
  explicit TicModel(ModelConfig cfg, std::uint64_t seed = 0);

  const ModelConfig& config() const { return cfg_; }

  /// [N,3,H,W] -> [N,C,H/16,W/16]
  Tensor g_a(const Tensor& x) const;
  /// [N,C,h,w] -> [N,3,16h,16w]
  Tensor g_s(const Tensor& y_hat) const;
  /// [N,C,h,w] -> [N,C,h/4,w/4]
  Tensor h_a(const Tensor& y) const;
  /// [N,C,h,w] -> [N,2C,4h,4w]
  Tensor h_s(const Tensor& z_hat) const;

  const entropy::Cam& cam() const { return cam_; }
  const entropy::FactorizedPrior& prior() const { return prior_; }

  nn::ParamList parameters() const;
  std::size_t parameter_count() const;

  struct Forward {
    Tensor x_hat, y, z, y_hat, z_hat;
    entropy::GaussianParams params;
    Tensor bits_y, bits_z;  // scalars
  };
  /// Full pass. Noise mode is the differentiable training surrogate; round
  /// mode quantizes exactly as the codec does (serial, mean-offset rounding
  /// of y on the coding grid) and is not differentiable through y_hat.
  Forward forward(const Tensor& x, entropy::QuantMode mode, Rng& rng) const;

 private:
  ModelConfig cfg_;
  // g_a
  std::array<nn::Conv2d, 4> enc_conv_;
  std::array<nn::Gdn, 3> enc_gdn_;
  std::array<std::vector<swin::SwinBlock>, 3> enc_stb_;
  // g_s (index i mirrors encoder stage i)
  std::array<nn::Conv2d, 4> dec_conv_;
  std::array<nn::Gdn, 3> dec_gdn_;
  std::array<std::vector<swin::SwinBlock>, 3> dec_stb_;
  // h_a / h_s
  std::array<std::vector<swin::SwinBlock>, 2> hyper_enc_stb_;
  std::array<nn::Conv2d, 2> hyper_enc_conv_;
  std::array<nn::Conv2d, 2> hyper_dec_conv_;
  std::array<std::vector<swin::SwinBlock>, 2> hyper_dec_stb_;
  entropy::Cam cam_;
  entropy::FactorizedPrior prior_;
};

/// Checkpoint container:
///   magic "TICK" | version u32 | config_len u32 | config JSON
///   | count u32 | count x (name_len u32, name, rank u32, dims u64..., values f64...)
///   | crc32 u32 over every preceding byte
void save_checkpoint(const TicModel& model, const std::filesystem::path& path);
TicModel load_checkpoint(const std::filesystem::path& path);
/// Loads parameters into an existing model; rejects config or shape mismatches.
void load_parameters(TicModel& model, const std::filesystem::path& path);

}  // namespace tic
