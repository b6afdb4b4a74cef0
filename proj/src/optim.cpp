#include "lmlab/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace lmlab::opt {

Kind kind_from_string(const std::string& name) {
    if (name == "sgd") return Kind::SGD;
    if (name == "adagrad") return Kind::Adagrad;
    if (name == "rmsprop") return Kind::RMSProp;
    if (name == "adam") return Kind::Adam;
    throw std::invalid_argument("optim: unknown optimizer: " + name);
}

std::string to_string(Kind kind) {
    switch (kind) {
        case Kind::SGD: return "sgd";
        case Kind::Adagrad: return "adagrad";
        case Kind::RMSProp: return "rmsprop";
        case Kind::Adam: return "adam";
    }
    throw std::logic_error("optim: bad kind");
}

void OptimizerSpec::validate() const {
    if (!(eta > 0.0)) throw std::invalid_argument("optim: eta must be > 0");
    if (!(epsilon > 0.0)) throw std::invalid_argument("optim: epsilon must be > 0");
    auto check_decay = [](double value, const char* name) {
        if (!(value >= 0.0 && value < 1.0))
            throw std::invalid_argument(std::string("optim: ") + name + " must be in [0, 1)");
    };
    check_decay(beta, "beta");
    check_decay(beta1, "beta1");
    check_decay(beta2, "beta2");
    if (weight_decay < 0.0) throw std::invalid_argument("optim: weight_decay must be >= 0");
}

template <typename T>
OptimizerState<T> make_state(const OptimizerSpec& spec, const ParamRefs<T>& params) {
    spec.validate();
    OptimizerState<T> state;
    for (const auto& [name, tensor] : params) {
        switch (spec.kind) {
            case Kind::SGD: break;
            case Kind::Adagrad: state.g_sum.add(name, Tensor<T>::zeros_like(*tensor)); break;
            case Kind::RMSProp: state.g_ma.add(name, Tensor<T>::zeros_like(*tensor)); break;
            case Kind::Adam:
                state.m.add(name, Tensor<T>::zeros_like(*tensor));
                state.v.add(name, Tensor<T>::zeros_like(*tensor));
                break;
        }
    }
    return state;
}

template <typename T>
void step(const OptimizerSpec& spec, OptimizerState<T>& state, const ParamRefs<T>& params,
          const TensorMap<T>& grads) {
    spec.validate();
    if (grads.size() != params.size())
        throw std::invalid_argument("optim: gradient count does not match trainable count");

    const T eta = static_cast<T>(spec.eta);
    const T eps = static_cast<T>(spec.epsilon);
    const std::int64_t t_now = state.t + 1;

    for (const auto& [name, theta] : params) {
        if (!grads.contains(name))
            throw std::invalid_argument("optim: missing gradient for tensor " + name);
        const Tensor<T>& g = grads.at(name);
        if (!g.same_shape(*theta))
            throw std::invalid_argument("optim: gradient shape mismatch for tensor " + name);
        for (std::int64_t i = 0; i < g.numel(); ++i)
            if (!std::isfinite(static_cast<double>(g[i])))
                throw std::runtime_error("optim: non-finite gradient in tensor " + name);

        if (spec.weight_decay > 0.0) {
            const T shrink = static_cast<T>(1.0 - spec.eta * spec.weight_decay);
            for (auto& w : theta->flat()) w *= shrink;
        }

        switch (spec.kind) {
            case Kind::SGD: {
                for (std::int64_t i = 0; i < g.numel(); ++i) (*theta)[i] -= eta * g[i];
                break;
            }
            case Kind::Adagrad: {
                Tensor<T>& acc = state.g_sum.at(name);
                for (std::int64_t i = 0; i < g.numel(); ++i) {
                    acc[i] += g[i] * g[i];
                    (*theta)[i] -= eta * g[i] / (std::sqrt(acc[i]) + eps);
                }
                break;
            }
            case Kind::RMSProp: {
                const T beta = static_cast<T>(spec.beta);
                Tensor<T>& acc = state.g_ma.at(name);
                for (std::int64_t i = 0; i < g.numel(); ++i) {
                    acc[i] = beta * acc[i] + (T{1} - beta) * g[i] * g[i];
                    (*theta)[i] -= eta * g[i] / (std::sqrt(acc[i]) + eps);
                }
                break;
            }
            case Kind::Adam: {
                const T b1 = static_cast<T>(spec.beta1);
                const T b2 = static_cast<T>(spec.beta2);
                Tensor<T>& m = state.m.at(name);
                Tensor<T>& v = state.v.at(name);
                T m_scale = T{1}, v_scale = T{1};
                if (spec.adam_bias_correction) {
                    m_scale = static_cast<T>(1.0 - std::pow(spec.beta1, t_now));
                    v_scale = static_cast<T>(1.0 - std::pow(spec.beta2, t_now));
                }
                for (std::int64_t i = 0; i < g.numel(); ++i) {
                    m[i] = b1 * m[i] + (T{1} - b1) * g[i];
                    v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
                    const T m_hat = m[i] / m_scale;
                    const T v_hat = v[i] / v_scale;
                    (*theta)[i] -= eta * m_hat / (std::sqrt(v_hat) + eps);
                }
                break;
            }
        }
    }
    state.t = t_now;
}

template <typename T>
AccumulationBuffer<T>::AccumulationBuffer(const ParamRefs<T>& params, int target)
    : target_(target) {
    if (target < 1) throw std::invalid_argument("optim: accumulation target must be >= 1");
    for (const auto& [name, tensor] : params) sum_.add(name, Tensor<T>::zeros_like(*tensor));
}

template <typename T>
std::optional<TensorMap<T>> AccumulationBuffer<T>::add(const TensorMap<T>& grads) {
    if (grads.size() != sum_.size())
        throw std::invalid_argument("optim: accumulation key count mismatch");
    for (auto& [name, acc] : sum_) {
        if (!grads.contains(name))
            throw std::invalid_argument("optim: accumulation missing gradient for " + name);
        const Tensor<T>& g = grads.at(name);
        if (!g.same_shape(acc))
            throw std::invalid_argument("optim: accumulation shape mismatch for " + name);
        for (std::int64_t i = 0; i < g.numel(); ++i) acc[i] += g[i];
    }
    if (++seen_ < target_) return std::nullopt;

    TensorMap<T> mean;
    const T inv = static_cast<T>(1.0 / static_cast<double>(target_));
    for (auto& [name, acc] : sum_) {
        Tensor<T> out = Tensor<T>::zeros_like(acc);
        for (std::int64_t i = 0; i < acc.numel(); ++i) out[i] = acc[i] * inv;
        mean.add(name, std::move(out));
        acc.fill(T{});
    }
    seen_ = 0;
    return mean;
}

template OptimizerState<float> make_state(const OptimizerSpec&, const ParamRefs<float>&);
template OptimizerState<double> make_state(const OptimizerSpec&, const ParamRefs<double>&);
template void step(const OptimizerSpec&, OptimizerState<float>&, const ParamRefs<float>&,
                   const TensorMap<float>&);
template void step(const OptimizerSpec&, OptimizerState<double>&, const ParamRefs<double>&,
                   const TensorMap<double>&);
template class AccumulationBuffer<float>;
template class AccumulationBuffer<double>;

}  // namespace lmlab::opt
