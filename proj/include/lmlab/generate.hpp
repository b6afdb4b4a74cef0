#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lmlab/model.hpp"
#include "lmlab/textprep.hpp"

namespace lmlab::nn {

struct GenerateOptions {
    std::int64_t max_length = 200;  // cap on prompt + continuation
    int num_beams = 2;
    int no_repeat_ngram = 2;  // 0 disables blocking
};

// Next-token log-probabilities over the vocabulary given a prefix.
using LogProbFn =
    std::function<std::vector<double>(std::span<const text::TokenId>)>;

// Beam search ranked by total log-probability (no length penalty). Any
// continuation whose trailing no_repeat_ngram tokens already occur in the
// hypothesis (prompt included) scores -inf. Ties break on higher score,
// then lower token id, then lower source-hypothesis index; emitting eos_id
// freezes a hypothesis. Returns the best hypothesis, prompt included.
// num_beams=1 reduces to greedy argmax decoding.
std::vector<text::TokenId> beam_search(const LogProbFn& step,
                                       std::span<const text::TokenId> prompt,
                                       text::TokenId eos_id, const GenerateOptions& options);

// beam_search driven by the model's next-token distribution; pad and unk
// are never emitted, and prefixes longer than max_seq_len are cropped to
// their trailing window
template <typename T>
std::vector<text::TokenId> generate_tokens(const Model<T>& model,
                                           const text::Vocabulary& vocab,
                                           std::span<const text::TokenId> prompt,
                                           const GenerateOptions& options);

// One detokenized sentence: the prompt plus its continuation, cut before
// the first ".", "!" or "?" token.
template <typename T>
std::string generate_sentence(const Model<T>& model, const text::Vocabulary& vocab,
                              const std::string& prompt, const GenerateOptions& options);

}  // namespace lmlab::nn
