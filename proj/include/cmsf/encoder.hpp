#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <vector>

#include "cmsf/matrix.hpp"
#include "cmsf/ops.hpp"
#include "cmsf/tape.hpp"

namespace cmsf {

struct LayerFlags {
  bool batch_norm = false;
  bool relu = false;
  bool operator==(const LayerFlags&) const = default;
};

// widths[0] is the input width, widths.back() the output width. flags has one
// entry per linear layer; the final layer carries no activation.
struct MlpSpec {
  std::vector<std::size_t> widths;
  std::vector<LayerFlags> flags;

  // linear(in, hidden) -> batch norm -> ReLU -> linear(hidden, out)
  static MlpSpec expand_project(std::size_t in, std::size_t hidden, std::size_t out);
  static MlpSpec linear(std::size_t in, std::size_t out);

  std::size_t input_width() const { return widths.front(); }
  std::size_t output_width() const { return widths.back(); }
  std::size_t layer_count() const { return widths.size() - 1; }
  void validate() const;
  bool operator==(const MlpSpec&) const = default;
};

// Parameters registered on a tape during a training-mode forward pass.
struct ParamBinding {
  std::vector<Matrix*> params;
  std::vector<Var> vars;

  Var bind(Tape& tape, Matrix& param);
  // Gradient for each bound parameter, in binding order.
  std::vector<Matrix> gradients(const Tape& tape) const;
};

class Mlp {
 public:
  Mlp() = default;
  // Weights ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)); biases and beta 0, gamma 1.
  Mlp(MlpSpec spec, std::mt19937_64& rng);

  const MlpSpec& spec() const { return spec_; }

  // Evaluation mode (batch norm uses running statistics). Pure.
  Matrix forward(const Matrix& x) const;
  // Training mode. Registers parameters in `binding` and updates batch-norm
  // running statistics.
  Var forward(Tape& tape, Var x, ParamBinding& binding);

  // Trainable tensors in declaration order: per layer weight, bias, then
  // gamma, beta when the layer has batch norm.
  std::vector<Matrix*> parameters();
  std::vector<const Matrix*> parameters() const;
  // Batch-norm running statistics in declaration order (mean, var per layer).
  std::vector<Matrix*> buffers();
  std::vector<const Matrix*> buffers() const;

 private:
  struct Layer {
    Matrix weight;  // in x out
    Matrix bias;    // 1 x out
    bool relu = false;
    bool batch_norm = false;
    Matrix gamma;
    Matrix beta;
    BatchNormState bn;
  };

  MlpSpec spec_;
  std::vector<Layer> layers_;
};

struct EncoderSpec {
  MlpSpec trunk;      // online g and target f
  MlpSpec predictor;  // h, online path only
  double momentum = 0.99;

  // Trunk d -> h_t -> d, predictor d -> h_p -> d. A hidden width of 0 means 2d.
  static EncoderSpec desk(std::size_t input_dim, double momentum = 0.99, std::size_t trunk_hidden = 0,
                          std::size_t predictor_hidden = 0);
  void validate() const;
};

// Online encoder g with predictor h, and target encoder f kept as a momentum
// average of g. f starts as an exact copy of g.
class EncoderPair {
 public:
  EncoderPair() = default;
  static EncoderPair create(const EncoderSpec& spec, std::uint64_t seed);

  const EncoderSpec& spec() const { return spec_; }
  double momentum() const { return spec_.momentum; }
  void set_momentum(double m);

  // u = f(x) / ||f(x)||, batch norm in evaluation mode. Never mutates state.
  Matrix forward_target(const Matrix& x) const;
  // v = h(g(x)) / ||h(g(x))||, training mode.
  Var forward_online(Tape& tape, Var x, ParamBinding& binding);
  // g(x) without normalization, training mode (supervised heads sit here).
  Var forward_online_trunk(Tape& tape, Var x, ParamBinding& binding);
  // Frozen-feature embedding for evaluation: g(x) / ||g(x)|| in evaluation mode.
  Matrix embed(const Matrix& x) const;

  // theta_f <- m * theta_f + (1 - m) * theta_g, for parameters and
  // batch-norm running statistics alike.
  void momentum_update();

  Mlp& online() { return online_; }
  Mlp& target() { return target_; }
  Mlp& predictor() { return predictor_; }
  const Mlp& online() const { return online_; }
  const Mlp& target() const { return target_; }
  const Mlp& predictor() const { return predictor_; }

  // Online trunk followed by predictor parameters.
  std::vector<Matrix*> trainable_parameters();

 private:
  EncoderSpec spec_;
  Mlp online_;
  Mlp target_;
  Mlp predictor_;
};

// Checkpoint layout: 8-byte magic "CMSFCKPT", little-endian uint64 header
// length, UTF-8 JSON header (specs, momentum, tensor names and shapes), then
// every tensor's values as little-endian IEEE-754 doubles in header order.
void save_checkpoint(const std::filesystem::path& path, const EncoderPair& pair);
EncoderPair load_checkpoint(const std::filesystem::path& path);

}  // namespace cmsf
