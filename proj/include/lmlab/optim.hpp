#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lmlab/tensor.hpp"

namespace lmlab::opt {

enum class Kind { SGD, Adagrad, RMSProp, Adam };

Kind kind_from_string(const std::string& name);  // "sgd" | "adagrad" | "rmsprop" | "adam"
std::string to_string(Kind kind);

struct OptimizerSpec {
    Kind kind = Kind::SGD;
    double eta = 0.01;
    double beta = 0.9;    // RMSProp moving-average decay
    double beta1 = 0.9;   // Adam first-moment decay
    double beta2 = 0.999; // Adam second-moment decay
    double epsilon = 1e-8;
    double weight_decay = 0.01;  // decoupled shrink before the update
    // The Adam rule omits bias correction by default; this restores the
    // standard corrected form for comparison runs.
    bool adam_bias_correction = false;

    void validate() const;  // throws std::invalid_argument
};

// Accumulators are allocated only for the kinds that need them and always
// mirror the shapes of the trainable tensors they track.
template <typename T>
struct OptimizerState {
    std::int64_t t = 0;  // completed steps
    TensorMap<T> g_sum;  // Adagrad squared-gradient sum
    TensorMap<T> g_ma;   // RMSProp squared-gradient moving average
    TensorMap<T> m;      // Adam first moment
    TensorMap<T> v;      // Adam second moment
};

template <typename T>
using ParamRefs = std::vector<std::pair<std::string, Tensor<T>*>>;

template <typename T>
OptimizerState<T> make_state(const OptimizerSpec& spec, const ParamRefs<T>& params);

// One elementwise update:
//   SGD      theta -= eta * g
//   Adagrad  G += g^2;                    theta -= eta * g / (sqrt(G) + eps)
//   RMSProp  G = beta*G + (1-beta)*g^2;   theta -= eta * g / (sqrt(G) + eps)
//   Adam     m = b1*m + (1-b1)*g; v = b2*v + (1-b2)*g^2;
//            theta -= eta * m / (sqrt(v) + eps)
// with theta *= (1 - eta*lambda) first when lambda > 0. Throws on a grad
// key mismatch or a non-finite gradient, naming the tensor.
template <typename T>
void step(const OptimizerSpec& spec, OptimizerState<T>& state, const ParamRefs<T>& params,
          const TensorMap<T>& grads);

// Sums micro-batch gradients and releases their mean on the target-th call.
template <typename T>
class AccumulationBuffer {
  public:
    AccumulationBuffer(const ParamRefs<T>& params, int target);

    // nullopt until the target-th call, which returns the mean and resets
    std::optional<TensorMap<T>> add(const TensorMap<T>& grads);

    int micro_steps_seen() const { return seen_; }
    int target() const { return target_; }

  private:
    TensorMap<T> sum_;
    int target_ = 1;
    int seen_ = 0;
};

}  // namespace lmlab::opt
