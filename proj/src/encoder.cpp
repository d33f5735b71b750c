#include "cmsf/encoder.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>

#include <nlohmann/json.hpp>

namespace cmsf {

// ---- MlpSpec ---------------------------------------------------------------

MlpSpec MlpSpec::expand_project(std::size_t in, std::size_t hidden, std::size_t out) {
  return MlpSpec{{in, hidden, out}, {LayerFlags{true, true}, LayerFlags{false, false}}};
}

MlpSpec MlpSpec::linear(std::size_t in, std::size_t out) {
  return MlpSpec{{in, out}, {LayerFlags{}}};
}

void MlpSpec::validate() const {
  if (widths.size() < 2) throw std::invalid_argument("MlpSpec: needs at least one linear layer");
  if (flags.size() != widths.size() - 1) {
    throw std::invalid_argument("MlpSpec: " + std::to_string(flags.size()) + " flag sets for " +
                                std::to_string(widths.size() - 1) + " layers");
  }
  for (std::size_t w : widths) {
    if (w == 0) throw std::invalid_argument("MlpSpec: zero layer width");
  }
  if (flags.back().batch_norm || flags.back().relu) {
    throw std::invalid_argument("MlpSpec: final layer must not carry an activation");
  }
}

// ---- ParamBinding ------------------------------------------------------------

Var ParamBinding::bind(Tape& tape, Matrix& param) {
  const Var v = tape.parameter(param);
  params.push_back(&param);
  vars.push_back(v);
  return v;
}

std::vector<Matrix> ParamBinding::gradients(const Tape& tape) const {
  std::vector<Matrix> out;
  out.reserve(vars.size());
  for (Var v : vars) out.push_back(tape.grad(v));
  return out;
}

// ---- Mlp -------------------------------------------------------------------

Mlp::Mlp(MlpSpec spec, std::mt19937_64& rng) : spec_(std::move(spec)) {
  spec_.validate();
  layers_.reserve(spec_.layer_count());
  for (std::size_t l = 0; l < spec_.layer_count(); ++l) {
    const std::size_t in = spec_.widths[l], out = spec_.widths[l + 1];
    Layer layer;
    layer.weight = Matrix(in, out);
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& w : layer.weight.values()) w = dist(rng);
    layer.bias = Matrix(1, out, 0.0);
    layer.relu = spec_.flags[l].relu;
    layer.batch_norm = spec_.flags[l].batch_norm;
    if (layer.batch_norm) {
      layer.gamma = Matrix(1, out, 1.0);
      layer.beta = Matrix(1, out, 0.0);
      layer.bn = BatchNormState(out);
    }
    layers_.push_back(std::move(layer));
  }
}

Matrix Mlp::forward(const Matrix& x) const {
  if (x.cols() != spec_.input_width()) {
    throw std::invalid_argument("Mlp::forward: input " + shape_string(x) + " but width is " +
                                std::to_string(spec_.input_width()));
  }
  Matrix h = x;
  for (const auto& layer : layers_) {
    h = add_bias(matmul(h, layer.weight), layer.bias);
    if (layer.batch_norm) h = batch_norm_1d_eval(h, layer.gamma, layer.beta, layer.bn);
    if (layer.relu) h = relu(h);
  }
  return h;
}

Var Mlp::forward(Tape& tape, Var x, ParamBinding& binding) {
  if (tape.value(x).cols() != spec_.input_width()) {
    throw std::invalid_argument("Mlp::forward: input " + shape_string(tape.value(x)) +
                                " but width is " + std::to_string(spec_.input_width()));
  }
  Var h = x;
  for (auto& layer : layers_) {
    const Var w = binding.bind(tape, layer.weight);
    const Var b = binding.bind(tape, layer.bias);
    h = add_bias(tape, matmul(tape, h, w), b);
    if (layer.batch_norm) {
      const Var g = binding.bind(tape, layer.gamma);
      const Var be = binding.bind(tape, layer.beta);
      h = batch_norm_1d(tape, h, g, be, layer.bn);
    }
    if (layer.relu) h = relu(tape, h);
  }
  return h;
}

std::vector<Matrix*> Mlp::parameters() {
  std::vector<Matrix*> out;
  for (auto& layer : layers_) {
    out.push_back(&layer.weight);
    out.push_back(&layer.bias);
    if (layer.batch_norm) {
      out.push_back(&layer.gamma);
      out.push_back(&layer.beta);
    }
  }
  return out;
}

std::vector<const Matrix*> Mlp::parameters() const {
  std::vector<const Matrix*> out;
  for (const auto& layer : layers_) {
    out.push_back(&layer.weight);
    out.push_back(&layer.bias);
    if (layer.batch_norm) {
      out.push_back(&layer.gamma);
      out.push_back(&layer.beta);
    }
  }
  return out;
}

std::vector<Matrix*> Mlp::buffers() {
  std::vector<Matrix*> out;
  for (auto& layer : layers_) {
    if (layer.batch_norm) {
      out.push_back(&layer.bn.running_mean);
      out.push_back(&layer.bn.running_var);
    }
  }
  return out;
}

std::vector<const Matrix*> Mlp::buffers() const {
  std::vector<const Matrix*> out;
  for (const auto& layer : layers_) {
    if (layer.batch_norm) {
      out.push_back(&layer.bn.running_mean);
      out.push_back(&layer.bn.running_var);
    }
  }
  return out;
}

// ---- EncoderSpec / EncoderPair ----------------------------------------------

EncoderSpec EncoderSpec::desk(std::size_t input_dim, double momentum, std::size_t trunk_hidden,
                              std::size_t predictor_hidden) {
  if (trunk_hidden == 0) trunk_hidden = 2 * input_dim;
  if (predictor_hidden == 0) predictor_hidden = 2 * input_dim;
  return EncoderSpec{MlpSpec::expand_project(input_dim, trunk_hidden, input_dim),
                     MlpSpec::expand_project(input_dim, predictor_hidden, input_dim), momentum};
}

void EncoderSpec::validate() const {
  trunk.validate();
  predictor.validate();
  if (predictor.input_width() != trunk.output_width() ||
      predictor.output_width() != trunk.output_width()) {
    throw std::invalid_argument("EncoderSpec: predictor must map trunk output width " +
                                std::to_string(trunk.output_width()) + " to itself");
  }
  if (!(momentum >= 0.0 && momentum <= 1.0)) {
    throw std::invalid_argument("EncoderSpec: momentum must lie in [0, 1]");
  }
}

EncoderPair EncoderPair::create(const EncoderSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  EncoderPair pair;
  pair.spec_ = spec;
  pair.online_ = Mlp(spec.trunk, rng);
  pair.target_ = pair.online_;
  pair.predictor_ = Mlp(spec.predictor, rng);
  return pair;
}

void EncoderPair::set_momentum(double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw std::invalid_argument("EncoderPair: momentum must lie in [0, 1]");
  spec_.momentum = m;
}

Matrix EncoderPair::forward_target(const Matrix& x) const {
  return l2_row_normalize(target_.forward(x));
}

Var EncoderPair::forward_online(Tape& tape, Var x, ParamBinding& binding) {
  const Var g = online_.forward(tape, x, binding);
  const Var h = predictor_.forward(tape, g, binding);
  return l2_row_normalize(tape, h);
}

Var EncoderPair::forward_online_trunk(Tape& tape, Var x, ParamBinding& binding) {
  return online_.forward(tape, x, binding);
}

Matrix EncoderPair::embed(const Matrix& x) const { return l2_row_normalize(online_.forward(x)); }

void EncoderPair::momentum_update() {
  const double m = spec_.momentum;
  auto blend = [m](std::vector<Matrix*> dst, std::vector<Matrix*> src) {
    for (std::size_t i = 0; i < dst.size(); ++i) {
      auto d = dst[i]->values();
      const auto s = std::as_const(*src[i]).values();
      for (std::size_t j = 0; j < d.size(); ++j) d[j] = m * d[j] + (1.0 - m) * s[j];
    }
  };
  blend(target_.parameters(), online_.parameters());
  blend(target_.buffers(), online_.buffers());
}

std::vector<Matrix*> EncoderPair::trainable_parameters() {
  auto out = online_.parameters();
  auto pred = predictor_.parameters();
  out.insert(out.end(), pred.begin(), pred.end());
  return out;
}

// ---- Checkpoints ------------------------------------------------------------

namespace {

constexpr std::array<char, 8> kMagic = {'C', 'M', 'S', 'F', 'C', 'K', 'P', 'T'};

nlohmann::json spec_to_json(const MlpSpec& spec) {
  nlohmann::json flags = nlohmann::json::array();
  for (const auto& f : spec.flags) flags.push_back({{"batch_norm", f.batch_norm}, {"relu", f.relu}});
  return {{"widths", spec.widths}, {"flags", flags}};
}

MlpSpec spec_from_json(const nlohmann::json& j) {
  MlpSpec spec;
  spec.widths = j.at("widths").get<std::vector<std::size_t>>();
  for (const auto& f : j.at("flags")) {
    spec.flags.push_back(LayerFlags{f.at("batch_norm").get<bool>(), f.at("relu").get<bool>()});
  }
  spec.validate();
  return spec;
}

struct NamedTensor {
  std::string name;
  const Matrix* tensor;
};

std::vector<NamedTensor> checkpoint_tensors(const EncoderPair& pair) {
  std::vector<NamedTensor> out;
  auto add = [&out](const std::string& prefix, const Mlp& mlp) {
    const auto params = mlp.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      out.push_back({prefix + ".param" + std::to_string(i), params[i]});
    }
    const auto bufs = mlp.buffers();
    for (std::size_t i = 0; i < bufs.size(); ++i) {
      out.push_back({prefix + ".buffer" + std::to_string(i), bufs[i]});
    }
  };
  add("online", pair.online());
  add("target", pair.target());
  add("predictor", pair.predictor());
  return out;
}

void write_u64(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> bytes{};
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(bytes.data(), bytes.size());
}

std::uint64_t read_u64(std::istream& is) {
  std::array<unsigned char, 8> bytes{};
  is.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | bytes[i];
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const EncoderPair& pair) {
  const auto tensors = checkpoint_tensors(pair);
  nlohmann::json header;
  header["format"] = "cmsf-encoder";
  header["version"] = 1;
  header["momentum"] = pair.momentum();
  header["trunk"] = spec_to_json(pair.spec().trunk);
  header["predictor"] = spec_to_json(pair.spec().predictor);
  header["tensors"] = nlohmann::json::array();
  for (const auto& t : tensors) {
    header["tensors"].push_back({{"name", t.name}, {"rows", t.tensor->rows()}, {"cols", t.tensor->cols()}});
  }
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  os.write(kMagic.data(), kMagic.size());
  write_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors) {
    for (double v : t.tensor->values()) write_u64(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

EncoderPair load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kMagic) throw std::runtime_error("checkpoint: bad magic in " + path.string());
  const std::uint64_t header_len = read_u64(is);
  std::string text(header_len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw std::runtime_error("checkpoint: truncated header");
  const auto header = nlohmann::json::parse(text);
  if (header.at("format") != "cmsf-encoder" || header.at("version") != 1) {
    throw std::runtime_error("checkpoint: unsupported format");
  }
  EncoderSpec spec{spec_from_json(header.at("trunk")), spec_from_json(header.at("predictor")),
                   header.at("momentum").get<double>()};
  EncoderPair pair = EncoderPair::create(spec, 0);

  std::vector<Matrix*> slots;
  for (Mlp* mlp : {&pair.online(), &pair.target(), &pair.predictor()}) {
    auto p = mlp->parameters();
    auto b = mlp->buffers();
    slots.insert(slots.end(), p.begin(), p.end());
    slots.insert(slots.end(), b.begin(), b.end());
  }
  const auto& entries = header.at("tensors");
  if (entries.size() != slots.size()) {
    throw std::runtime_error("checkpoint: expected " + std::to_string(slots.size()) +
                             " tensors, header lists " + std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto rows = entries[i].at("rows").get<std::size_t>();
    const auto cols = entries[i].at("cols").get<std::size_t>();
    if (rows != slots[i]->rows() || cols != slots[i]->cols()) {
      throw std::runtime_error("checkpoint: tensor " + entries[i].at("name").get<std::string>() +
                               " has shape " + std::to_string(rows) + "x" + std::to_string(cols) +
                               ", expected " + shape_string(*slots[i]));
    }
    for (auto& v : slots[i]->values()) v = std::bit_cast<double>(read_u64(is));
  }
  return pair;
}

}  // namespace cmsf
