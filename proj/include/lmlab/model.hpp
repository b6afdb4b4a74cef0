#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lmlab/rng.hpp"
#include "lmlab/tensor.hpp"
#include "lmlab/textprep.hpp"

namespace lmlab::nn {

struct ModelConfig {
    std::int64_t vocab_size = 0;
    std::int64_t d_model = 64;
    std::int64_t n_heads = 4;
    std::int64_t n_layers = 2;
    std::int64_t d_ff = 256;
    std::int64_t max_seq_len = 128;
    std::uint64_t seed = 0;

    void validate() const;  // throws std::invalid_argument
    bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct ParamSet {
    TensorMap<T> tensors;
    std::map<std::string, bool> trainable;  // keyed like tensors

    bool is_trainable(const std::string& name) const {
        auto it = trainable.find(name);
        return it != trainable.end() && it->second;
    }
};

// Base weight W stored [in x out] (activations multiply from the left), so
// the effective weight is W + scale * A^T B^T with A [r x in], B [out x r]:
// the (B A)^T low-rank delta. B starts at zero; the adapter pair are the
// layer's only trainable tensors.
template <typename T>
struct LoraAdapter {
    std::string target;
    Tensor<T> A;
    Tensor<T> B;
    std::int64_t r = 0;
    double dropout_p = 0.0;  // on the adapter input, training only
    double scale = 1.0;
};

struct ParamCount {
    std::uint64_t total = 0;
    std::uint64_t trainable = 0;
    double fraction = 0.0;
};

// softmax(q k^T / sqrt(d_k)) v with an explicit visibility mask
// (visible[t * len_k + s] != 0 means position t may read position s).
// Masked weights are exactly zero. weights_out, when given, receives the
// [len_q x len_k] softmax matrix.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const std::vector<std::uint8_t>& visible,
                    Tensor<T>* weights_out = nullptr);

// mean over positions of -ln softmax(logits[i])[targets[i]]
template <typename T>
double nll_from_logits(const Tensor<T>& logits, std::span<const text::TokenId> targets);

// Decoder-only transformer: learned token + position embeddings, pre-norm
// residual blocks (masked multi-head attention, then a GELU MLP), final
// layer norm, untied linear output head.
template <typename T>
class Model {
  public:
    explicit Model(const ModelConfig& config);  // deterministic init from seed

    const ModelConfig& config() const { return config_; }
    ParamSet<T>& params() { return params_; }
    const ParamSet<T>& params() const { return params_; }
    std::vector<LoraAdapter<T>>& adapters() { return adapters_; }
    const std::vector<LoraAdapter<T>>& adapters() const { return adapters_; }

    // Freezes every base tensor and adds one zero-delta adapter per target.
    void attach_lora(std::int64_t r, const std::vector<std::string>& targets,
                     double dropout_p, double scale = 1.0);
    // Names holding "attn.w_qkv", "attn.w_proj", or "lm_head.w".
    std::vector<std::string> default_lora_targets() const;

    // next-token logits [len x vocab]; no dropout
    Tensor<T> forward(std::span<const text::TokenId> tokens) const;

    // Loss is the mean NLL over predicted positions (t predicts t+1) where
    // both ends are unmasked. Gradients cover exactly the trainable set;
    // adapter gradients are keyed "<target>.lora_A" / "<target>.lora_B".
    struct BackwardResult {
        double loss = 0.0;
        TensorMap<T> grads;
    };
    BackwardResult backward(const text::Batch& batch, Rng* dropout_rng);

    double sequence_nll(std::span<const text::TokenId> tokens) const;
    // p(tokens[i+1] | tokens[0..i]) for each predicted position
    std::vector<double> next_token_probabilities(
        std::span<const text::TokenId> tokens) const;
    // e^(mean NLL); equals the base-2 perplexity definition
    double perplexity(std::span<const text::TokenId> tokens) const;
    // mean of final-layer hidden states (post final norm) over positions
    std::vector<double> embed(std::span<const text::TokenId> tokens) const;

    ParamCount count_params() const;
    // trainable tensors paired with their gradient keys, in deterministic order
    std::vector<std::pair<std::string, Tensor<T>*>> trainable_tensors();

    // base' = base + scale * (B A)^T, adapters dropped
    Model merge_lora() const;

  private:
    struct Cache;
    Tensor<T> run_forward(std::span<const text::TokenId> tokens, bool training,
                          Rng* dropout_rng, Cache* cache) const;
    void backward_sequence(const Cache& cache, const Tensor<T>& dlogits,
                           TensorMap<T>& grads) const;
    const LoraAdapter<T>* adapter_for(const std::string& target) const;

    ModelConfig config_;
    ParamSet<T> params_;
    std::vector<LoraAdapter<T>> adapters_;
};

inline constexpr char kCheckpointMagic[4] = {'L', 'M', 'C', 'K'};

// Binary checkpoint layout (little-endian, version 1):
//   magic "LMCK", u32 version,
//   config: i64 vocab_size, d_model, n_heads, n_layers, d_ff, max_seq_len,
//           u64 seed,
//   u8 dtype_bytes (4 = float, 8 = double),
//   u32 tensor count, then per tensor:
//     u16 name length + name bytes, u8 trainable, u8 rank,
//     i64 dims..., raw row-major values,
//   u32 adapter count, then per adapter:
//     u16 target length + target bytes, i64 r, f64 dropout_p, f64 scale,
//     A values [r x in], B values [out x r].
template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path);

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path);  // validates shapes

// dtype byte width recorded in the file, for precision dispatch
int checkpoint_precision(const std::filesystem::path& path);

}  // namespace lmlab::nn
