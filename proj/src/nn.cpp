#include "entsel/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace entsel {

namespace {

std::size_t shape_size(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor shape entries must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

void apply_activation(Matrix& z, Activation a) {
  switch (a) {
    case Activation::kTanh: z = z.array().tanh(); break;
    case Activation::kRelu: z = z.cwiseMax(0.0); break;
    case Activation::kIdentity: break;
  }
}

// Multiplies `grad` in place by the activation derivative expressed through
// the post-activation value `y`.
void activation_backward(Matrix& grad, const Matrix& y, Activation a) {
  switch (a) {
    case Activation::kTanh: grad.array() *= (1.0 - y.array().square()); break;
    case Activation::kRelu: grad.array() *= (y.array() > 0.0).cast<double>(); break;
    case Activation::kIdentity: break;
  }
}

}  // namespace

ParamTensor::ParamTensor(std::string n, std::vector<int> s)
    : name(std::move(n)), shape(std::move(s)) {
  const auto count = shape_size(shape);
  values.assign(count, 0.0);
  grad.assign(count, 0.0);
}

void ParamTensor::zero_grad() noexcept { std::fill(grad.begin(), grad.end(), 0.0); }

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "relu") return Activation::kRelu;
  if (s == "identity") return Activation::kIdentity;
  throw std::invalid_argument("unknown activation: " + s);
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::kTanh: return "tanh";
    case Activation::kRelu: return "relu";
    case Activation::kIdentity: return "identity";
  }
  return "identity";
}

Mlp::Mlp(const std::string& name, const std::vector<int>& dims, Activation hidden,
         Activation output, Rng& init_rng) {
  if (dims.size() < 2) throw std::invalid_argument("Mlp needs at least input and output dims");
  input_dim_ = dims.front();
  output_dim_ = dims.back();
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    const int in = dims[k];
    const int out = dims[k + 1];
    Layer layer{ParamTensor(name + ".l" + std::to_string(k) + ".weight", {out, in}),
                ParamTensor(name + ".l" + std::to_string(k) + ".bias", {out}),
                k + 2 == dims.size() ? output : hidden};
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& w : layer.weight.values) w = init_rng.uniform(-bound, bound);
    layers_.push_back(std::move(layer));
  }
}

Vector Mlp::forward(std::span<const double> input) const {
  if (static_cast<int>(input.size()) != input_dim_) {
    throw std::invalid_argument("Mlp::forward: expected input of length " +
                                std::to_string(input_dim_) + ", got " +
                                std::to_string(input.size()));
  }
  Matrix x = Eigen::Map<const Vector>(input.data(), input_dim_);
  return forward(x).col(0);
}

Matrix Mlp::forward(const Matrix& inputs) const {
  Tape unused;
  return forward(inputs, unused);
}

Matrix Mlp::forward(const Matrix& inputs, Tape& tape) const {
  if (inputs.rows() != input_dim_) {
    throw std::invalid_argument("Mlp::forward: expected " + std::to_string(input_dim_) +
                                " input rows, got " + std::to_string(inputs.rows()));
  }
  tape.acts.clear();
  tape.acts.reserve(layers_.size() + 1);
  tape.acts.push_back(inputs);
  for (const auto& layer : layers_) {
    const int out = layer.weight.shape[0];
    const int in = layer.weight.shape[1];
    ConstRowMajorMap w(layer.weight.values.data(), out, in);
    Eigen::Map<const Vector> b(layer.bias.values.data(), out);
    Matrix z = w * tape.acts.back();
    z.colwise() += b;
    apply_activation(z, layer.activation);
    tape.acts.push_back(std::move(z));
  }
  return tape.acts.back();
}

Matrix Mlp::backward(const Tape& tape, const Matrix& output_grad, bool accumulate_params) {
  if (tape.acts.size() != layers_.size() + 1) {
    throw std::invalid_argument("Mlp::backward: tape does not match this network");
  }
  if (output_grad.rows() != output_dim_ || output_grad.cols() != tape.acts.back().cols()) {
    throw std::invalid_argument("Mlp::backward: output_grad shape mismatch");
  }
  Matrix grad = output_grad;
  for (std::size_t k = layers_.size(); k-- > 0;) {
    auto& layer = layers_[k];
    activation_backward(grad, tape.acts[k + 1], layer.activation);
    const int out = layer.weight.shape[0];
    const int in = layer.weight.shape[1];
    if (accumulate_params) {
      RowMajorMap gw(layer.weight.grad.data(), out, in);
      Eigen::Map<Vector> gb(layer.bias.grad.data(), out);
      gw.noalias() += grad * tape.acts[k].transpose();
      gb.noalias() += grad.rowwise().sum();
    }
    ConstRowMajorMap w(layer.weight.values.data(), out, in);
    grad = w.transpose() * grad;
  }
  return grad;
}

Matrix Mlp::input_gradient(const Tape& tape, const Matrix& output_grad) const {
  if (tape.acts.size() != layers_.size() + 1 || output_grad.rows() != output_dim_) {
    throw std::invalid_argument("Mlp::input_gradient: shape mismatch");
  }
  Matrix grad = output_grad;
  for (std::size_t k = layers_.size(); k-- > 0;) {
    const auto& layer = layers_[k];
    activation_backward(grad, tape.acts[k + 1], layer.activation);
    ConstRowMajorMap w(layer.weight.values.data(), layer.weight.shape[0], layer.weight.shape[1]);
    grad = w.transpose() * grad;
  }
  return grad;
}

Vector Mlp::backward(std::span<const double> input, std::span<const double> output_grad) {
  if (static_cast<int>(input.size()) != input_dim_ ||
      static_cast<int>(output_grad.size()) != output_dim_) {
    throw std::invalid_argument("Mlp::backward: dimension mismatch");
  }
  Tape tape;
  forward(Matrix(Eigen::Map<const Vector>(input.data(), input_dim_)), tape);
  Matrix g = Eigen::Map<const Vector>(output_grad.data(), output_dim_);
  return backward(tape, g).col(0);
}

std::vector<ParamTensor*> Mlp::params() {
  std::vector<ParamTensor*> out;
  for (auto& l : layers_) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

std::vector<const ParamTensor*> Mlp::params() const {
  std::vector<const ParamTensor*> out;
  for (const auto& l : layers_) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

void Mlp::zero_grad() noexcept {
  for (auto& l : layers_) {
    l.weight.zero_grad();
    l.bias.zero_grad();
  }
}

// --- Adam ------------------------------------------------------------------

Adam::Adam(AdamConfig cfg) : cfg_(cfg) {
  if (!(cfg_.lr >= 0.0) || !(cfg_.eps > 0.0) || cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 ||
      cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0) {
    throw std::invalid_argument("Adam: invalid hyperparameters");
  }
}

void Adam::step(std::span<ParamTensor* const> params) {
  for (const ParamTensor* p : params) {
    for (double g : p->grad) {
      if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient in tensor " + p->name);
    }
  }
  if (m_.empty()) {
    for (const ParamTensor* p : params) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw std::invalid_argument("Adam: parameter list changed");

  ++step_count_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    ParamTensor& p = *params[i];
    auto& m = m_[i];
    auto& v = v_[i];
    if (m.size() != p.size()) throw std::invalid_argument("Adam: moment size mismatch for " + p.name);
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = p.grad[j];
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p.values[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
    p.zero_grad();
  }
}

// --- checkpoints -------------------------------------------------------------

void Checkpoint::add(const ParamTensor& t) { tensors.push_back({t.name, t.shape, {t.values.begin(), t.values.end()}}); }

const TensorRecord& Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw std::runtime_error("checkpoint has no tensor named " + name);
}

void Checkpoint::load_into(ParamTensor& t) const {
  const auto& rec = find(t.name);
  if (rec.shape != t.shape) throw std::runtime_error("checkpoint shape mismatch for " + t.name);
  t.values.assign(rec.values.begin(), rec.values.end());
  t.zero_grad();
}

namespace {

std::filesystem::path blob_path_for(const std::filesystem::path& manifest) {
  auto p = manifest;
  p.replace_extension(".bin");
  return p;
}

std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xff) << 24) | ((v & 0xff00) << 8) | ((v >> 8) & 0xff00) | (v >> 24);
  }
  return v;
}

}  // namespace

void Checkpoint::save(const std::filesystem::path& manifest_path) const {
  if (manifest_path.has_parent_path()) std::filesystem::create_directories(manifest_path.parent_path());
  const auto blob = blob_path_for(manifest_path);

  nlohmann::json manifest;
  manifest["format"] = "entsel-checkpoint";
  manifest["version"] = 1;
  manifest["dtype"] = "float32-le";
  manifest["blob"] = blob.filename().string();
  manifest["meta"] = meta;
  manifest["tensors"] = nlohmann::json::array();

  std::ofstream bin(blob, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot write " + blob.string());
  for (const auto& t : tensors) {
    manifest["tensors"].push_back({{"name", t.name}, {"shape", t.shape}});
    for (double v : t.values) {
      const auto bits = to_little_endian(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      bin.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
    }
  }
  if (!bin) throw std::runtime_error("failed writing " + blob.string());

  std::ofstream out(manifest_path);
  if (!out) throw std::runtime_error("cannot write " + manifest_path.string());
  out << manifest.dump(2) << '\n';
}

Checkpoint Checkpoint::load(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + manifest_path.string());
  const auto manifest = nlohmann::json::parse(in);
  if (manifest.value("format", "") != "entsel-checkpoint") {
    throw std::runtime_error("not a checkpoint manifest: " + manifest_path.string());
  }
  const auto blob = manifest_path.parent_path() / manifest.at("blob").get<std::string>();
  std::ifstream bin(blob, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open checkpoint blob " + blob.string());

  Checkpoint ck;
  ck.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& entry : manifest.at("tensors")) {
    TensorRecord rec;
    rec.name = entry.at("name").get<std::string>();
    rec.shape = entry.at("shape").get<std::vector<int>>();
    const auto n = shape_size(rec.shape);
    rec.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      bin.read(reinterpret_cast<char*>(&bits), sizeof(bits));
      if (!bin) throw std::runtime_error("checkpoint blob truncated at tensor " + rec.name);
      rec.values[i] = static_cast<double>(std::bit_cast<float>(to_little_endian(bits)));
    }
    ck.tensors.push_back(std::move(rec));
  }
  return ck;
}

}  // namespace entsel
