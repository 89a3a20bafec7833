#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/StdVector>
#include <nlohmann/json.hpp>

#include "entsel/rng.hpp"

namespace entsel {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using RowMajorMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstRowMajorMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

/// Raised when a value that must stay finite (loss, gradient) is NaN/Inf.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Vector-aligned storage so mapped kernels take the same path on every allocation.
using ParamStorage = std::vector<double, Eigen::aligned_allocator<double>>;

struct ParamTensor {
  std::string name;
  std::vector<int> shape;
  ParamStorage values;  // row-major
  ParamStorage grad;

  ParamTensor() = default;
  ParamTensor(std::string name, std::vector<int> shape);

  std::size_t size() const noexcept { return values.size(); }
  void zero_grad() noexcept;
};

enum class Activation { kTanh, kRelu, kIdentity };

Activation activation_from_string(const std::string& s);
std::string to_string(Activation a);

/// Fully connected stack. Batched calls take one sample per column.
class Mlp {
 public:
  struct Layer {
    ParamTensor weight;  // shape {out, in}
    ParamTensor bias;    // shape {out}
    Activation activation;
  };

  /// Post-activation values per layer; acts[0] is the input.
  struct Tape {
    std::vector<Matrix> acts;
  };

  Mlp() = default;
  /// dims = {input, hidden..., output}. Hidden layers use `hidden`, the last `output`.
  Mlp(const std::string& name, const std::vector<int>& dims, Activation hidden, Activation output,
      Rng& init_rng);

  int input_dim() const noexcept { return input_dim_; }
  int output_dim() const noexcept { return output_dim_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  std::vector<Layer>& layers() noexcept { return layers_; }

  Vector forward(std::span<const double> input) const;
  Matrix forward(const Matrix& inputs) const;
  Matrix forward(const Matrix& inputs, Tape& tape) const;

  /// Accumulates d<output, output_grad>/dparams into the grads (unless
  /// accumulate_params is false) and returns the input gradient.
  Matrix backward(const Tape& tape, const Matrix& output_grad, bool accumulate_params = true);
  Vector backward(std::span<const double> input, std::span<const double> output_grad);
  /// Input gradient only; parameter grads are left untouched.
  Matrix input_gradient(const Tape& tape, const Matrix& output_grad) const;

  std::vector<ParamTensor*> params();
  std::vector<const ParamTensor*> params() const;
  void zero_grad() noexcept;

 private:
  std::vector<Layer> layers_;
  int input_dim_ = 0;
  int output_dim_ = 0;
};

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moments are keyed by position in the
/// parameter list, so always pass the same list in the same order.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {});

  /// Applies one update and zeroes the grads. Throws NonFiniteError (naming
  /// the tensor) before touching anything if a grad is non-finite.
  void step(std::span<ParamTensor* const> params);

  const AdamConfig& config() const noexcept { return cfg_; }
  std::int64_t step_count() const noexcept { return step_count_; }
  const std::vector<std::vector<double>>& first_moment() const noexcept { return m_; }
  const std::vector<std::vector<double>>& second_moment() const noexcept { return v_; }

 private:
  AdamConfig cfg_;
  std::int64_t step_count_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

// --- checkpoints -----------------------------------------------------------

struct TensorRecord {
  std::string name;
  std::vector<int> shape;
  std::vector<double> values;
};

/// A manifest (`<stem>.json`) listing tensors in order plus a blob
/// (`<stem>.bin`) of little-endian float32 values in the same order.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<TensorRecord> tensors;

  void add(const ParamTensor& t);
  const TensorRecord& find(const std::string& name) const;
  /// Copies stored values into `t`; shape must match.
  void load_into(ParamTensor& t) const;

  void save(const std::filesystem::path& manifest_path) const;
  static Checkpoint load(const std::filesystem::path& manifest_path);
};

}  // namespace entsel
