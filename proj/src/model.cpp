#include "lmlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace lmlab::nn {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInitStddevScale = 1.0;  // stddev = scale / sqrt(d_model)

template <typename T>
void add_bias_rows(Tensor<T>& y, const Tensor<T>& bias) {
    const std::int64_t rows = y.dim(0), cols = y.dim(1);
    for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < cols; ++j) y(i, j) += bias[j];
}

template <typename T>
void accumulate_bias_grad(const Tensor<T>& dy, Tensor<T>& db) {
    const std::int64_t rows = dy.dim(0), cols = dy.dim(1);
    for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < cols; ++j) db[j] += dy(i, j);
}

template <typename T>
T gelu(T x) {
    return static_cast<T>(0.5) * x *
           (static_cast<T>(1) + std::erf(x / static_cast<T>(std::sqrt(2.0))));
}

template <typename T>
T gelu_grad(T x) {
    const T phi = static_cast<T>(0.5) *
                  (static_cast<T>(1) + std::erf(x / static_cast<T>(std::sqrt(2.0))));
    const T pdf = static_cast<T>(std::exp(-0.5 * static_cast<double>(x) * static_cast<double>(x)) /
                                 std::sqrt(2.0 * M_PI));
    return phi + x * pdf;
}

// y = g * (x - mean) / sqrt(var + eps) + b, rowwise; caches xhat and 1/std
template <typename T>
void layer_norm_forward(const Tensor<T>& x, const Tensor<T>& g, const Tensor<T>& b,
                        Tensor<T>& out, Tensor<T>& xhat, std::vector<T>& inv_std) {
    const std::int64_t rows = x.dim(0), cols = x.dim(1);
    out = Tensor<T>({rows, cols});
    xhat = Tensor<T>({rows, cols});
    inv_std.assign(static_cast<std::size_t>(rows), T{});
    for (std::int64_t i = 0; i < rows; ++i) {
        T mean{};
        for (std::int64_t j = 0; j < cols; ++j) mean += x(i, j);
        mean /= static_cast<T>(cols);
        T var{};
        for (std::int64_t j = 0; j < cols; ++j) {
            const T d = x(i, j) - mean;
            var += d * d;
        }
        var /= static_cast<T>(cols);
        const T istd = static_cast<T>(1) / std::sqrt(var + static_cast<T>(kLnEps));
        inv_std[static_cast<std::size_t>(i)] = istd;
        for (std::int64_t j = 0; j < cols; ++j) {
            const T xh = (x(i, j) - mean) * istd;
            xhat(i, j) = xh;
            out(i, j) = g[j] * xh + b[j];
        }
    }
}

template <typename T>
Tensor<T> layer_norm_backward(const Tensor<T>& dy, const Tensor<T>& xhat,
                              const std::vector<T>& inv_std, const Tensor<T>& g,
                              Tensor<T>* dg, Tensor<T>* db) {
    const std::int64_t rows = dy.dim(0), cols = dy.dim(1);
    Tensor<T> dx({rows, cols});
    for (std::int64_t i = 0; i < rows; ++i) {
        T sum_dxhat{}, sum_dxhat_xhat{};
        for (std::int64_t j = 0; j < cols; ++j) {
            const T dyv = dy(i, j);
            if (dg) (*dg)[j] += dyv * xhat(i, j);
            if (db) (*db)[j] += dyv;
            const T dxhat = dyv * g[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat(i, j);
        }
        const T inv_n = static_cast<T>(1) / static_cast<T>(cols);
        const T istd = inv_std[static_cast<std::size_t>(i)];
        for (std::int64_t j = 0; j < cols; ++j) {
            const T dxhat = dy(i, j) * g[j];
            dx(i, j) = istd * (dxhat - inv_n * sum_dxhat - xhat(i, j) * inv_n * sum_dxhat_xhat);
        }
    }
    return dx;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::int64_t begin, std::int64_t width) {
    Tensor<T> out({x.dim(0), width});
    for (std::int64_t i = 0; i < x.dim(0); ++i)
        for (std::int64_t j = 0; j < width; ++j) out(i, j) = x(i, begin + j);
    return out;
}

template <typename T>
void add_into_cols(Tensor<T>& dst, const Tensor<T>& src, std::int64_t begin) {
    for (std::int64_t i = 0; i < src.dim(0); ++i)
        for (std::int64_t j = 0; j < src.dim(1); ++j) dst(i, begin + j) += src(i, j);
}

std::string layer_name(int layer, const char* suffix) {
    return "h" + std::to_string(layer) + "." + suffix;
}

}  // namespace

void ModelConfig::validate() const {
    if (vocab_size < 1 || d_model < 1 || n_heads < 1 || n_layers < 1 || d_ff < 1)
        throw std::invalid_argument("model config: all sizes must be >= 1");
    if (max_seq_len < 2) throw std::invalid_argument("model config: max_seq_len must be >= 2");
    if (d_model % n_heads != 0)
        throw std::invalid_argument("model config: d_model must be divisible by n_heads");
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const std::vector<std::uint8_t>& visible, Tensor<T>* weights_out) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw std::invalid_argument("attention: inputs must be 2-D");
    const std::int64_t len_q = q.dim(0), d_k = q.dim(1);
    const std::int64_t len_k = k.dim(0), d_v = v.dim(1);
    if (k.dim(1) != d_k || v.dim(0) != len_k)
        throw std::invalid_argument("attention: shape mismatch");
    if (visible.size() != static_cast<std::size_t>(len_q * len_k))
        throw std::invalid_argument("attention: mask size mismatch");

    const T inv_sqrt_dk = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d_k)));
    Tensor<T> weights({len_q, len_k});
    Tensor<T> out({len_q, d_v});

    for (std::int64_t t = 0; t < len_q; ++t) {
        T max_score = std::numeric_limits<T>::lowest();
        bool any = false;
        for (std::int64_t s = 0; s < len_k; ++s) {
            if (!visible[static_cast<std::size_t>(t * len_k + s)]) continue;
            T score{};
            for (std::int64_t j = 0; j < d_k; ++j) score += q(t, j) * k(s, j);
            score *= inv_sqrt_dk;
            weights(t, s) = score;
            if (!any || score > max_score) max_score = score;
            any = true;
        }
        if (!any) throw std::invalid_argument("attention: row with no visible positions");
        T denom{};
        for (std::int64_t s = 0; s < len_k; ++s) {
            if (!visible[static_cast<std::size_t>(t * len_k + s)]) {
                weights(t, s) = T{};
                continue;
            }
            const T e = std::exp(weights(t, s) - max_score);
            weights(t, s) = e;
            denom += e;
        }
        for (std::int64_t s = 0; s < len_k; ++s) {
            if (!visible[static_cast<std::size_t>(t * len_k + s)]) continue;
            weights(t, s) /= denom;
            const T w = weights(t, s);
            for (std::int64_t j = 0; j < d_v; ++j) out(t, j) += w * v(s, j);
        }
    }
    if (weights_out) *weights_out = std::move(weights);
    return out;
}

template <typename T>
double nll_from_logits(const Tensor<T>& logits, std::span<const text::TokenId> targets) {
    if (targets.empty()) throw std::invalid_argument("nll: no target positions");
    if (static_cast<std::int64_t>(targets.size()) > logits.dim(0))
        throw std::invalid_argument("nll: more targets than logit rows");
    const std::int64_t vocab = logits.dim(1);
    double total = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const text::TokenId target = targets[i];
        if (target < 0 || target >= vocab) throw std::invalid_argument("nll: target out of range");
        T max_logit = logits(static_cast<std::int64_t>(i), 0);
        for (std::int64_t j = 1; j < vocab; ++j)
            max_logit = std::max(max_logit, logits(static_cast<std::int64_t>(i), j));
        double denom = 0.0;
        for (std::int64_t j = 0; j < vocab; ++j)
            denom += std::exp(static_cast<double>(logits(static_cast<std::int64_t>(i), j) - max_logit));
        total -= static_cast<double>(logits(static_cast<std::int64_t>(i), target) - max_logit) -
                 std::log(denom);
    }
    return total / static_cast<double>(targets.size());
}

template <typename T>
Model<T>::Model(const ModelConfig& config) : config_(config) {
    config_.validate();
    const auto d = config_.d_model;

    auto add_normal = [&](const std::string& name, std::vector<std::int64_t> shape) {
        Tensor<T> t(std::move(shape));
        Rng rng(Rng::mix(config_.seed, name));
        const double stddev = kInitStddevScale / std::sqrt(static_cast<double>(d));
        for (auto& v : t.flat()) v = static_cast<T>(rng.normal(0.0, stddev));
        params_.tensors.add(name, std::move(t));
        params_.trainable[name] = true;
    };
    auto add_const = [&](const std::string& name, std::vector<std::int64_t> shape, T value) {
        Tensor<T> t(std::move(shape));
        t.fill(value);
        params_.tensors.add(name, std::move(t));
        params_.trainable[name] = true;
    };

    add_normal("wte", {config_.vocab_size, d});
    add_normal("wpe", {config_.max_seq_len, d});
    for (int layer = 0; layer < config_.n_layers; ++layer) {
        add_const(layer_name(layer, "ln1.g"), {d}, T{1});
        add_const(layer_name(layer, "ln1.b"), {d}, T{0});
        add_normal(layer_name(layer, "attn.w_qkv"), {d, 3 * d});
        add_const(layer_name(layer, "attn.b_qkv"), {3 * d}, T{0});
        add_normal(layer_name(layer, "attn.w_proj"), {d, d});
        add_const(layer_name(layer, "attn.b_proj"), {d}, T{0});
        add_const(layer_name(layer, "ln2.g"), {d}, T{1});
        add_const(layer_name(layer, "ln2.b"), {d}, T{0});
        add_normal(layer_name(layer, "mlp.w_fc"), {d, config_.d_ff});
        add_const(layer_name(layer, "mlp.b_fc"), {config_.d_ff}, T{0});
        add_normal(layer_name(layer, "mlp.w_proj"), {config_.d_ff, d});
        add_const(layer_name(layer, "mlp.b_proj"), {d}, T{0});
    }
    add_const("ln_f.g", {d}, T{1});
    add_const("ln_f.b", {d}, T{0});
    add_normal("lm_head.w", {d, config_.vocab_size});
}

template <typename T>
const LoraAdapter<T>* Model<T>::adapter_for(const std::string& target) const {
    for (const auto& adapter : adapters_)
        if (adapter.target == target) return &adapter;
    return nullptr;
}

template <typename T>
std::vector<std::string> Model<T>::default_lora_targets() const {
    std::vector<std::string> targets;
    for (const auto& [name, tensor] : params_.tensors) {
        (void)tensor;
        if (name.find("attn.w_qkv") != std::string::npos ||
            name.find("attn.w_proj") != std::string::npos || name == "lm_head.w")
            targets.push_back(name);
    }
    return targets;
}

template <typename T>
void Model<T>::attach_lora(std::int64_t r, const std::vector<std::string>& targets,
                           double dropout_p, double scale) {
    if (r < 1) throw std::invalid_argument("lora: rank must be >= 1");
    for (const auto& target : targets) {
        if (!params_.tensors.contains(target))
            throw std::invalid_argument("lora: unknown target tensor: " + target);
        if (adapter_for(target)) throw std::invalid_argument("lora: duplicate target: " + target);
        const Tensor<T>& base = params_.tensors.at(target);
        if (base.rank() != 2) throw std::invalid_argument("lora: target is not a matrix: " + target);

        LoraAdapter<T> adapter;
        adapter.target = target;
        adapter.r = r;
        adapter.dropout_p = dropout_p;
        adapter.scale = scale;
        adapter.A = Tensor<T>({r, base.dim(0)});
        adapter.B = Tensor<T>({base.dim(1), r});
        Rng rng(Rng::mix(config_.seed, target + ".lora_A"));
        for (auto& v : adapter.A.flat()) v = static_cast<T>(rng.normal(0.0, 0.02));
        adapters_.push_back(std::move(adapter));  // B stays zero: delta starts at 0
    }
    for (auto& [name, flag] : params_.trainable) {
        (void)name;
        flag = false;
    }
}

template <typename T>
ParamCount Model<T>::count_params() const {
    ParamCount count;
    for (const auto& [name, tensor] : params_.tensors) {
        count.total += static_cast<std::uint64_t>(tensor.numel());
        if (params_.is_trainable(name))
            count.trainable += static_cast<std::uint64_t>(tensor.numel());
    }
    for (const auto& adapter : adapters_) {
        const std::uint64_t n =
            static_cast<std::uint64_t>(adapter.A.numel() + adapter.B.numel());
        count.total += n;
        count.trainable += n;
    }
    count.fraction = count.total ? static_cast<double>(count.trainable) /
                                       static_cast<double>(count.total)
                                 : 0.0;
    return count;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> Model<T>::trainable_tensors() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (auto& [name, tensor] : params_.tensors)
        if (params_.is_trainable(name)) out.emplace_back(name, &tensor);
    for (auto& adapter : adapters_) {
        out.emplace_back(adapter.target + ".lora_A", &adapter.A);
        out.emplace_back(adapter.target + ".lora_B", &adapter.B);
    }
    return out;
}

template <typename T>
Model<T> Model<T>::merge_lora() const {
    Model<T> merged = *this;
    for (const auto& adapter : merged.adapters_) {
        Tensor<T>& base = merged.params_.tensors.at(adapter.target);
        // base[in][out] += scale * sum_k A[k][in] * B[out][k]
        const std::int64_t in_dim = base.dim(0), out_dim = base.dim(1);
        for (std::int64_t i = 0; i < in_dim; ++i)
            for (std::int64_t o = 0; o < out_dim; ++o) {
                T acc{};
                for (std::int64_t kk = 0; kk < adapter.r; ++kk)
                    acc += adapter.A(kk, i) * adapter.B(o, kk);
                base(i, o) += static_cast<T>(adapter.scale) * acc;
            }
    }
    merged.adapters_.clear();
    for (auto& [name, flag] : merged.params_.trainable) {
        (void)name;
        flag = true;
    }
    return merged;
}

// per-linear-layer activation cache; drop_scale empty means no dropout mask
template <typename T>
struct LinearCache {
    bool has_adapter = false;
    Tensor<T> z;           // adapter input after dropout
    Tensor<T> drop_scale;  // elementwise 0 or 1/(1-p)
    Tensor<T> u;           // z A^T, [len x r]
};

template <typename T>
struct Model<T>::Cache {
    std::vector<text::TokenId> tokens;
    Tensor<T> x_embed;
    struct Layer {
        Tensor<T> ln1_xhat, ln1_out;
        std::vector<T> ln1_inv_std;
        LinearCache<T> qkv_lin;
        Tensor<T> qkv;
        std::vector<Tensor<T>> head_q, head_k, head_v, head_w;
        Tensor<T> att_concat;
        LinearCache<T> attn_proj_lin;
        Tensor<T> x_mid;  // after attention residual
        Tensor<T> ln2_xhat, ln2_out;
        std::vector<T> ln2_inv_std;
        LinearCache<T> fc_lin;
        Tensor<T> fc_out;    // pre-GELU
        Tensor<T> gelu_out;  // MLP projection input
        LinearCache<T> mlp_proj_lin;
    };
    std::vector<Layer> layers;
    Tensor<T> x_final;  // input to the final norm
    Tensor<T> lnf_xhat, lnf_out;
    std::vector<T> lnf_inv_std;
    LinearCache<T> lm_head_lin;
};

namespace {

// y = x W (+ bias) (+ adapter delta); caches adapter intermediates
template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                         const LoraAdapter<T>* adapter, bool training, Rng* rng,
                         LinearCache<T>* cache) {
    Tensor<T> y({x.dim(0), w.dim(1)});
    matmul(x, w, y);
    if (bias) add_bias_rows(y, *bias);
    if (!adapter) return y;

    Tensor<T> z = x;
    Tensor<T> drop_scale;
    if (training && adapter->dropout_p > 0.0) {
        if (!rng) throw std::logic_error("lora dropout requires an rng in training mode");
        drop_scale = Tensor<T>(x.shape_vec());
        const T keep_scale = static_cast<T>(1.0 / (1.0 - adapter->dropout_p));
        for (std::int64_t i = 0; i < z.numel(); ++i) {
            const bool drop = rng->bernoulli(adapter->dropout_p);
            drop_scale[i] = drop ? T{} : keep_scale;
            z[i] *= drop_scale[i];
        }
    }
    Tensor<T> u({x.dim(0), adapter->r});
    matmul_a_bt(z, adapter->A, u);
    Tensor<T> delta({x.dim(0), w.dim(1)});
    matmul_a_bt(u, adapter->B, delta);
    const T scale = static_cast<T>(adapter->scale);
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] += scale * delta[i];

    if (cache) {
        cache->has_adapter = true;
        cache->z = std::move(z);
        cache->drop_scale = std::move(drop_scale);
        cache->u = std::move(u);
    }
    return y;
}

// returns dx; accumulates into grads for every trainable tensor involved
template <typename T>
Tensor<T> linear_backward(const Tensor<T>& x, const Tensor<T>& dy, const std::string& w_name,
                          const Tensor<T>& w, const std::string& b_name,
                          const LoraAdapter<T>* adapter, const LinearCache<T>& cache,
                          TensorMap<T>& grads) {
    Tensor<T> dx({x.dim(0), w.dim(0)});
    matmul_a_bt(dy, w, dx);
    if (grads.contains(w_name)) matmul_at_b_accum(x, dy, grads.at(w_name));
    if (!b_name.empty() && grads.contains(b_name)) accumulate_bias_grad(dy, grads.at(b_name));

    if (adapter && cache.has_adapter) {
        const T scale = static_cast<T>(adapter->scale);
        Tensor<T> dy_scaled = dy;
        for (std::int64_t i = 0; i < dy_scaled.numel(); ++i) dy_scaled[i] *= scale;

        Tensor<T> du({dy.dim(0), adapter->r});
        matmul(dy_scaled, adapter->B, du);
        const std::string a_key = adapter->target + ".lora_A";
        const std::string b_key = adapter->target + ".lora_B";
        if (grads.contains(b_key)) matmul_at_b_accum(dy_scaled, cache.u, grads.at(b_key));
        if (grads.contains(a_key)) matmul_at_b_accum(du, cache.z, grads.at(a_key));

        Tensor<T> dz({x.dim(0), w.dim(0)});
        matmul(du, adapter->A, dz);
        if (!cache.drop_scale.empty())
            for (std::int64_t i = 0; i < dz.numel(); ++i) dz[i] *= cache.drop_scale[i];
        for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] += dz[i];
    }
    return dx;
}

}  // namespace

template <typename T>
Tensor<T> Model<T>::run_forward(std::span<const text::TokenId> tokens, bool training,
                                Rng* dropout_rng, Cache* cache) const {
    const std::int64_t len = static_cast<std::int64_t>(tokens.size());
    if (len < 1) throw std::invalid_argument("forward: empty input");
    if (len > config_.max_seq_len)
        throw std::invalid_argument("forward: input longer than max_seq_len");
    for (text::TokenId id : tokens)
        if (id < 0 || id >= config_.vocab_size)
            throw std::invalid_argument("forward: token id out of range");

    const std::int64_t d = config_.d_model;
    const std::int64_t n_heads = config_.n_heads;
    const std::int64_t d_k = d / n_heads;

    const Tensor<T>& wte = params_.tensors.at("wte");
    const Tensor<T>& wpe = params_.tensors.at("wpe");
    Tensor<T> x({len, d});
    for (std::int64_t t = 0; t < len; ++t)
        for (std::int64_t j = 0; j < d; ++j) x(t, j) = wte(tokens[t], j) + wpe(t, j);

    if (cache) {
        cache->tokens.assign(tokens.begin(), tokens.end());
        cache->x_embed = x;
        cache->layers.resize(static_cast<std::size_t>(config_.n_layers));
    }

    std::vector<std::uint8_t> causal(static_cast<std::size_t>(len * len), 0);
    for (std::int64_t t = 0; t < len; ++t)
        for (std::int64_t s = 0; s <= t; ++s) causal[static_cast<std::size_t>(t * len + s)] = 1;

    for (int layer = 0; layer < config_.n_layers; ++layer) {
        auto* lc = cache ? &cache->layers[static_cast<std::size_t>(layer)] : nullptr;

        Tensor<T> ln1_out, ln1_xhat;
        std::vector<T> ln1_inv_std;
        layer_norm_forward(x, params_.tensors.at(layer_name(layer, "ln1.g")),
                           params_.tensors.at(layer_name(layer, "ln1.b")), ln1_out, ln1_xhat,
                           ln1_inv_std);

        const std::string qkv_w = layer_name(layer, "attn.w_qkv");
        Tensor<T> qkv = linear_forward(
            ln1_out, params_.tensors.at(qkv_w), &params_.tensors.at(layer_name(layer, "attn.b_qkv")),
            adapter_for(qkv_w), training, dropout_rng, lc ? &lc->qkv_lin : nullptr);

        Tensor<T> att_concat({len, d});
        std::vector<Tensor<T>> head_q, head_k, head_v, head_w;
        for (std::int64_t h = 0; h < n_heads; ++h) {
            Tensor<T> q = slice_cols(qkv, h * d_k, d_k);
            Tensor<T> k = slice_cols(qkv, d + h * d_k, d_k);
            Tensor<T> v = slice_cols(qkv, 2 * d + h * d_k, d_k);
            Tensor<T> weights;
            Tensor<T> head_out = attention(q, k, v, causal, &weights);
            add_into_cols(att_concat, head_out, h * d_k);
            if (lc) {
                head_q.push_back(std::move(q));
                head_k.push_back(std::move(k));
                head_v.push_back(std::move(v));
                head_w.push_back(std::move(weights));
            }
        }

        const std::string proj_w = layer_name(layer, "attn.w_proj");
        Tensor<T> att_proj = linear_forward(
            att_concat, params_.tensors.at(proj_w),
            &params_.tensors.at(layer_name(layer, "attn.b_proj")), adapter_for(proj_w), training,
            dropout_rng, lc ? &lc->attn_proj_lin : nullptr);

        Tensor<T> x_mid({len, d});
        for (std::int64_t i = 0; i < x.numel(); ++i) x_mid[i] = x[i] + att_proj[i];

        Tensor<T> ln2_out, ln2_xhat;
        std::vector<T> ln2_inv_std;
        layer_norm_forward(x_mid, params_.tensors.at(layer_name(layer, "ln2.g")),
                           params_.tensors.at(layer_name(layer, "ln2.b")), ln2_out, ln2_xhat,
                           ln2_inv_std);

        const std::string fc_w = layer_name(layer, "mlp.w_fc");
        Tensor<T> fc_out = linear_forward(
            ln2_out, params_.tensors.at(fc_w), &params_.tensors.at(layer_name(layer, "mlp.b_fc")),
            adapter_for(fc_w), training, dropout_rng, lc ? &lc->fc_lin : nullptr);

        Tensor<T> gelu_out(fc_out.shape_vec());
        for (std::int64_t i = 0; i < fc_out.numel(); ++i) gelu_out[i] = gelu(fc_out[i]);

        const std::string mlp_proj_w = layer_name(layer, "mlp.w_proj");
        Tensor<T> mlp_out = linear_forward(
            gelu_out, params_.tensors.at(mlp_proj_w),
            &params_.tensors.at(layer_name(layer, "mlp.b_proj")), adapter_for(mlp_proj_w),
            training, dropout_rng, lc ? &lc->mlp_proj_lin : nullptr);

        Tensor<T> x_next({len, d});
        for (std::int64_t i = 0; i < x.numel(); ++i) x_next[i] = x_mid[i] + mlp_out[i];

        if (lc) {
            lc->ln1_xhat = std::move(ln1_xhat);
            lc->ln1_out = std::move(ln1_out);
            lc->ln1_inv_std = std::move(ln1_inv_std);
            lc->qkv = std::move(qkv);
            lc->head_q = std::move(head_q);
            lc->head_k = std::move(head_k);
            lc->head_v = std::move(head_v);
            lc->head_w = std::move(head_w);
            lc->att_concat = std::move(att_concat);
            lc->x_mid = std::move(x_mid);
            lc->ln2_xhat = std::move(ln2_xhat);
            lc->ln2_out = std::move(ln2_out);
            lc->ln2_inv_std = std::move(ln2_inv_std);
            lc->fc_out = std::move(fc_out);
            lc->gelu_out = std::move(gelu_out);
            x = std::move(x_next);
        } else {
            x = std::move(x_next);
        }
    }

    Tensor<T> lnf_out, lnf_xhat;
    std::vector<T> lnf_inv_std;
    layer_norm_forward(x, params_.tensors.at("ln_f.g"), params_.tensors.at("ln_f.b"), lnf_out,
                       lnf_xhat, lnf_inv_std);

    Tensor<T> logits = linear_forward(lnf_out, params_.tensors.at("lm_head.w"),
                                      static_cast<const Tensor<T>*>(nullptr),
                                      adapter_for("lm_head.w"), training, dropout_rng,
                                      cache ? &cache->lm_head_lin : nullptr);
    if (cache) {
        cache->x_final = std::move(x);
        cache->lnf_xhat = std::move(lnf_xhat);
        cache->lnf_out = std::move(lnf_out);
        cache->lnf_inv_std = std::move(lnf_inv_std);
    }
    return logits;
}

template <typename T>
Tensor<T> Model<T>::forward(std::span<const text::TokenId> tokens) const {
    return run_forward(tokens, false, nullptr, nullptr);
}

template <typename T>
void Model<T>::backward_sequence(const Cache& cache, const Tensor<T>& dlogits,
                                 TensorMap<T>& grads) const {
    const std::int64_t len = static_cast<std::int64_t>(cache.tokens.size());
    const std::int64_t d = config_.d_model;
    const std::int64_t n_heads = config_.n_heads;
    const std::int64_t d_k = d / n_heads;
    const T inv_sqrt_dk = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d_k)));

    // output head
    Tensor<T> d_lnf_out =
        linear_backward(cache.lnf_out, dlogits, "lm_head.w", params_.tensors.at("lm_head.w"),
                        "", adapter_for("lm_head.w"), cache.lm_head_lin, grads);

    Tensor<T>* dg = grads.contains("ln_f.g") ? &grads.at("ln_f.g") : nullptr;
    Tensor<T>* db = grads.contains("ln_f.b") ? &grads.at("ln_f.b") : nullptr;
    Tensor<T> dx = layer_norm_backward(d_lnf_out, cache.lnf_xhat, cache.lnf_inv_std,
                                       params_.tensors.at("ln_f.g"), dg, db);

    for (int layer = config_.n_layers - 1; layer >= 0; --layer) {
        const auto& lc = cache.layers[static_cast<std::size_t>(layer)];

        // x_next = x_mid + mlp_proj(gelu(fc(ln2(x_mid)))): dx flows into both
        const std::string mlp_proj_w = layer_name(layer, "mlp.w_proj");
        Tensor<T> d_gelu = linear_backward(lc.gelu_out, dx, mlp_proj_w,
                                           params_.tensors.at(mlp_proj_w),
                                           layer_name(layer, "mlp.b_proj"),
                                           adapter_for(mlp_proj_w), lc.mlp_proj_lin, grads);
        for (std::int64_t i = 0; i < d_gelu.numel(); ++i)
            d_gelu[i] *= gelu_grad(lc.fc_out[i]);

        const std::string fc_w = layer_name(layer, "mlp.w_fc");
        Tensor<T> d_ln2_out =
            linear_backward(lc.ln2_out, d_gelu, fc_w, params_.tensors.at(fc_w),
                            layer_name(layer, "mlp.b_fc"), adapter_for(fc_w), lc.fc_lin, grads);

        dg = grads.contains(layer_name(layer, "ln2.g")) ? &grads.at(layer_name(layer, "ln2.g"))
                                                        : nullptr;
        db = grads.contains(layer_name(layer, "ln2.b")) ? &grads.at(layer_name(layer, "ln2.b"))
                                                        : nullptr;
        Tensor<T> d_x_mid = layer_norm_backward(d_ln2_out, lc.ln2_xhat, lc.ln2_inv_std,
                                                params_.tensors.at(layer_name(layer, "ln2.g")),
                                                dg, db);
        for (std::int64_t i = 0; i < dx.numel(); ++i) d_x_mid[i] += dx[i];

        // x_mid = x + attn_proj(concat): split gradient at the residual
        const std::string proj_w = layer_name(layer, "attn.w_proj");
        Tensor<T> d_concat = linear_backward(lc.att_concat, d_x_mid, proj_w,
                                             params_.tensors.at(proj_w),
                                             layer_name(layer, "attn.b_proj"),
                                             adapter_for(proj_w), lc.attn_proj_lin, grads);

        Tensor<T> d_qkv({len, 3 * d});
        for (std::int64_t h = 0; h < n_heads; ++h) {
            const Tensor<T>& q = lc.head_q[static_cast<std::size_t>(h)];
            const Tensor<T>& k = lc.head_k[static_cast<std::size_t>(h)];
            const Tensor<T>& v = lc.head_v[static_cast<std::size_t>(h)];
            const Tensor<T>& w = lc.head_w[static_cast<std::size_t>(h)];
            Tensor<T> d_out = slice_cols(d_concat, h * d_k, d_k);

            // dV = W^T dOut ; dP = dOut V^T ; softmax backward ; dQ, dK
            Tensor<T> dv({len, d_k});
            matmul_at_b_accum(w, d_out, dv);
            Tensor<T> dp({len, len});
            matmul_a_bt(d_out, v, dp);

            Tensor<T> ds({len, len});
            for (std::int64_t t = 0; t < len; ++t) {
                T weighted{};
                for (std::int64_t s = 0; s <= t; ++s) weighted += w(t, s) * dp(t, s);
                for (std::int64_t s = 0; s <= t; ++s)
                    ds(t, s) = w(t, s) * (dp(t, s) - weighted) * inv_sqrt_dk;
            }
            Tensor<T> dq({len, d_k});
            matmul(ds, k, dq);
            Tensor<T> dk({len, d_k});
            matmul_at_b_accum(ds, q, dk);

            add_into_cols(d_qkv, dq, h * d_k);
            add_into_cols(d_qkv, dk, d + h * d_k);
            add_into_cols(d_qkv, dv, 2 * d + h * d_k);
        }

        const std::string qkv_w = layer_name(layer, "attn.w_qkv");
        Tensor<T> d_ln1_out =
            linear_backward(lc.ln1_out, d_qkv, qkv_w, params_.tensors.at(qkv_w),
                            layer_name(layer, "attn.b_qkv"), adapter_for(qkv_w), lc.qkv_lin,
                            grads);

        dg = grads.contains(layer_name(layer, "ln1.g")) ? &grads.at(layer_name(layer, "ln1.g"))
                                                        : nullptr;
        db = grads.contains(layer_name(layer, "ln1.b")) ? &grads.at(layer_name(layer, "ln1.b"))
                                                        : nullptr;
        const Tensor<T>& x_in = layer == 0
                                    ? cache.x_embed
                                    : cache.layers[static_cast<std::size_t>(layer - 1)].x_mid;
        (void)x_in;
        Tensor<T> d_x_in = layer_norm_backward(d_ln1_out, lc.ln1_xhat, lc.ln1_inv_std,
                                               params_.tensors.at(layer_name(layer, "ln1.g")),
                                               dg, db);
        for (std::int64_t i = 0; i < d_x_in.numel(); ++i) d_x_in[i] += d_x_mid[i];
        dx = std::move(d_x_in);
    }

    if (grads.contains("wte")) {
        Tensor<T>& dwte = grads.at("wte");
        for (std::int64_t t = 0; t < len; ++t)
            for (std::int64_t j = 0; j < d; ++j) dwte(cache.tokens[static_cast<std::size_t>(t)], j) += dx(t, j);
    }
    if (grads.contains("wpe")) {
        Tensor<T>& dwpe = grads.at("wpe");
        for (std::int64_t t = 0; t < len; ++t)
            for (std::int64_t j = 0; j < d; ++j) dwpe(t, j) += dx(t, j);
    }
}

template <typename T>
typename Model<T>::BackwardResult Model<T>::backward(const text::Batch& batch,
                                                     Rng* dropout_rng) {
    BackwardResult result;
    for (auto& [key, tensor] : trainable_tensors())
        result.grads.add(key, Tensor<T>::zeros_like(*tensor));

    // count predicted positions over the whole batch first: the loss is a
    // global mean, so per-sequence sums are scaled once at the end
    std::vector<std::int64_t> lengths(static_cast<std::size_t>(batch.rows), 0);
    std::int64_t total_targets = 0;
    for (std::int64_t r = 0; r < batch.rows; ++r) {
        std::int64_t length = 0;
        while (length < batch.cols && !batch.masked_at(r, length)) ++length;
        lengths[static_cast<std::size_t>(r)] = length;
        total_targets += std::max<std::int64_t>(0, length - 1);
    }
    if (total_targets == 0)
        throw std::invalid_argument("backward: batch has no predicted positions");

    double loss_sum = 0.0;
    for (std::int64_t r = 0; r < batch.rows; ++r) {
        const std::int64_t length = lengths[static_cast<std::size_t>(r)];
        if (length < 2) continue;
        std::vector<text::TokenId> tokens(static_cast<std::size_t>(length));
        for (std::int64_t t = 0; t < length; ++t)
            tokens[static_cast<std::size_t>(t)] = batch.id_at(r, t);

        Cache cache;
        Tensor<T> logits = run_forward(tokens, true, dropout_rng, &cache);

        // dlogits = (softmax - onehot(target)) / total_targets at predicting rows
        Tensor<T> dlogits({length, config_.vocab_size});
        const T inv_total = static_cast<T>(1.0 / static_cast<double>(total_targets));
        for (std::int64_t t = 0; t + 1 < length; ++t) {
            const text::TokenId target = tokens[static_cast<std::size_t>(t + 1)];
            T max_logit = logits(t, 0);
            for (std::int64_t j = 1; j < config_.vocab_size; ++j)
                max_logit = std::max(max_logit, logits(t, j));
            double denom = 0.0;
            for (std::int64_t j = 0; j < config_.vocab_size; ++j)
                denom += std::exp(static_cast<double>(logits(t, j) - max_logit));
            loss_sum -= static_cast<double>(logits(t, target) - max_logit) - std::log(denom);
            for (std::int64_t j = 0; j < config_.vocab_size; ++j) {
                const double p = std::exp(static_cast<double>(logits(t, j) - max_logit)) / denom;
                dlogits(t, j) = static_cast<T>(p) * inv_total;
            }
            dlogits(t, target) -= inv_total;
        }
        backward_sequence(cache, dlogits, result.grads);
    }
    result.loss = loss_sum / static_cast<double>(total_targets);
    return result;
}

template <typename T>
double Model<T>::sequence_nll(std::span<const text::TokenId> tokens) const {
    if (tokens.size() < 2) throw std::invalid_argument("nll: need at least 2 tokens");
    Tensor<T> logits = forward(tokens);
    std::vector<text::TokenId> targets(tokens.begin() + 1, tokens.end());
    return nll_from_logits(logits, targets);
}

template <typename T>
std::vector<double> Model<T>::next_token_probabilities(
    std::span<const text::TokenId> tokens) const {
    if (tokens.size() < 2) throw std::invalid_argument("need at least 2 tokens");
    Tensor<T> logits = forward(tokens);
    std::vector<double> probs;
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
        const std::int64_t row = static_cast<std::int64_t>(i);
        T max_logit = logits(row, 0);
        for (std::int64_t j = 1; j < config_.vocab_size; ++j)
            max_logit = std::max(max_logit, logits(row, j));
        double denom = 0.0;
        for (std::int64_t j = 0; j < config_.vocab_size; ++j)
            denom += std::exp(static_cast<double>(logits(row, j) - max_logit));
        probs.push_back(std::exp(static_cast<double>(logits(row, tokens[i + 1]) - max_logit)) /
                        denom);
    }
    return probs;
}

template <typename T>
double Model<T>::perplexity(std::span<const text::TokenId> tokens) const {
    return std::exp(sequence_nll(tokens));
}

template <typename T>
std::vector<double> Model<T>::embed(std::span<const text::TokenId> tokens) const {
    if (tokens.empty()) throw std::invalid_argument("embed: empty input");
    Cache cache;
    run_forward(tokens, false, nullptr, &cache);
    const Tensor<T>& hidden = cache.lnf_out;
    std::vector<double> mean(static_cast<std::size_t>(config_.d_model), 0.0);
    for (std::int64_t t = 0; t < hidden.dim(0); ++t)
        for (std::int64_t j = 0; j < hidden.dim(1); ++j)
            mean[static_cast<std::size_t>(j)] += static_cast<double>(hidden(t, j));
    for (auto& v : mean) v /= static_cast<double>(hidden.dim(0));
    return mean;
}

namespace {

template <typename V>
void write_raw(std::ofstream& out, const V& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(value));
}

template <typename V>
V read_raw(std::ifstream& in) {
    V value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(value));
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    return value;
}

void write_string(std::ofstream& out, const std::string& s) {
    write_raw(out, static_cast<std::uint16_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::ifstream& in) {
    const auto n = read_raw<std::uint16_t>(in);
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    return s;
}

template <typename T>
void write_values(std::ofstream& out, const Tensor<T>& t) {
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * static_cast<std::int64_t>(sizeof(T))));
}

template <typename T>
void read_values(std::ifstream& in, Tensor<T>& t) {
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * static_cast<std::int64_t>(sizeof(T))));
    if (!in) throw std::runtime_error("checkpoint: truncated tensor data");
}

}  // namespace

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("checkpoint: cannot write " + tmp.string());
        out.write(kCheckpointMagic, 4);
        write_raw(out, static_cast<std::uint32_t>(1));
        const ModelConfig& c = model.config();
        write_raw(out, c.vocab_size);
        write_raw(out, c.d_model);
        write_raw(out, c.n_heads);
        write_raw(out, c.n_layers);
        write_raw(out, c.d_ff);
        write_raw(out, c.max_seq_len);
        write_raw(out, c.seed);
        write_raw(out, static_cast<std::uint8_t>(sizeof(T)));

        write_raw(out, static_cast<std::uint32_t>(model.params().tensors.size()));
        for (const auto& [name, tensor] : model.params().tensors) {
            write_string(out, name);
            write_raw(out, static_cast<std::uint8_t>(model.params().is_trainable(name) ? 1 : 0));
            write_raw(out, static_cast<std::uint8_t>(tensor.rank()));
            for (std::int64_t dim : tensor.shape()) write_raw(out, dim);
            write_values(out, tensor);
        }

        write_raw(out, static_cast<std::uint32_t>(model.adapters().size()));
        for (const auto& adapter : model.adapters()) {
            write_string(out, adapter.target);
            write_raw(out, adapter.r);
            write_raw(out, adapter.dropout_p);
            write_raw(out, adapter.scale);
            write_values(out, adapter.A);
            write_values(out, adapter.B);
        }
        if (!out) throw std::runtime_error("checkpoint: short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

namespace {

struct CheckpointHeader {
    ModelConfig config;
    std::uint8_t dtype = 0;
};

CheckpointHeader read_header(std::ifstream& in, const std::filesystem::path& path) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path.string());
    const auto version = read_raw<std::uint32_t>(in);
    if (version != 1)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    CheckpointHeader header;
    header.config.vocab_size = read_raw<std::int64_t>(in);
    header.config.d_model = read_raw<std::int64_t>(in);
    header.config.n_heads = read_raw<std::int64_t>(in);
    header.config.n_layers = read_raw<std::int64_t>(in);
    header.config.d_ff = read_raw<std::int64_t>(in);
    header.config.max_seq_len = read_raw<std::int64_t>(in);
    header.config.seed = read_raw<std::uint64_t>(in);
    header.dtype = read_raw<std::uint8_t>(in);
    return header;
}

}  // namespace

int checkpoint_precision(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
    return static_cast<int>(read_header(in, path).dtype);
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
    const CheckpointHeader header = read_header(in, path);
    if (header.dtype != sizeof(T))
        throw std::runtime_error("checkpoint: stores " +
                                 std::to_string(static_cast<int>(header.dtype) * 8) +
                                 "-bit floats, requested " + std::to_string(sizeof(T) * 8) +
                                 "-bit");

    Model<T> model(header.config);
    const auto tensor_count = read_raw<std::uint32_t>(in);
    if (tensor_count != model.params().tensors.size())
        throw std::runtime_error("checkpoint: tensor count mismatch");
    for (std::uint32_t i = 0; i < tensor_count; ++i) {
        const std::string name = read_string(in);
        const bool trainable = read_raw<std::uint8_t>(in) != 0;
        const int rank = read_raw<std::uint8_t>(in);
        std::vector<std::int64_t> shape;
        for (int j = 0; j < rank; ++j) shape.push_back(read_raw<std::int64_t>(in));
        if (!model.params().tensors.contains(name))
            throw std::runtime_error("checkpoint: unexpected tensor " + name);
        Tensor<T>& tensor = model.params().tensors.at(name);
        if (shape != tensor.shape_vec())
            throw std::runtime_error("checkpoint: shape mismatch for " + name);
        read_values(in, tensor);
        model.params().trainable[name] = trainable;
    }

    const auto adapter_count = read_raw<std::uint32_t>(in);
    for (std::uint32_t i = 0; i < adapter_count; ++i) {
        LoraAdapter<T> adapter;
        adapter.target = read_string(in);
        adapter.r = read_raw<std::int64_t>(in);
        adapter.dropout_p = read_raw<double>(in);
        adapter.scale = read_raw<double>(in);
        if (!model.params().tensors.contains(adapter.target))
            throw std::runtime_error("checkpoint: adapter targets unknown tensor " +
                                     adapter.target);
        const Tensor<T>& base = model.params().tensors.at(adapter.target);
        adapter.A = Tensor<T>({adapter.r, base.dim(0)});
        adapter.B = Tensor<T>({base.dim(1), adapter.r});
        read_values(in, adapter.A);
        read_values(in, adapter.B);
        model.adapters().push_back(std::move(adapter));
    }
    return model;
}

template class Model<float>;
template class Model<double>;
template Tensor<float> attention(const Tensor<float>&, const Tensor<float>&,
                                 const Tensor<float>&, const std::vector<std::uint8_t>&,
                                 Tensor<float>*);
template Tensor<double> attention(const Tensor<double>&, const Tensor<double>&,
                                  const Tensor<double>&, const std::vector<std::uint8_t>&,
                                  Tensor<double>*);
template double nll_from_logits(const Tensor<float>&, std::span<const text::TokenId>);
template double nll_from_logits(const Tensor<double>&, std::span<const text::TokenId>);
template void save_checkpoint(const Model<float>&, const std::filesystem::path&);
template void save_checkpoint(const Model<double>&, const std::filesystem::path&);
template Model<float> load_checkpoint(const std::filesystem::path&);
template Model<double> load_checkpoint(const std::filesystem::path&);

}  // namespace lmlab::nn
