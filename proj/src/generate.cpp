#include "lmlab/generate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace lmlab::nn {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct Hypothesis {
    std::vector<text::TokenId> tokens;
    double logp = 0.0;
    bool finished = false;
};

// bans every token whose appended no_repeat_ngram-gram already occurs in
// tokens, matching the usual "no repeat n-gram" decoding rule
void apply_ngram_block(const std::vector<text::TokenId>& tokens, int n,
                       std::vector<double>& scores) {
    if (n <= 0) return;
    const std::size_t len = tokens.size();
    if (len + 1 < static_cast<std::size_t>(n)) return;
    const std::size_t prefix_len = static_cast<std::size_t>(n - 1);
    const auto* suffix = tokens.data() + (len - prefix_len);
    for (std::size_t i = 0; i + prefix_len < len; ++i) {
        if (!std::equal(suffix, suffix + prefix_len, tokens.data() + i)) continue;
        const text::TokenId banned = tokens[i + prefix_len];
        if (banned >= 0 && static_cast<std::size_t>(banned) < scores.size())
            scores[static_cast<std::size_t>(banned)] = kNegInf;
    }
}

}  // namespace

std::vector<text::TokenId> beam_search(const LogProbFn& step,
                                       std::span<const text::TokenId> prompt,
                                       text::TokenId eos_id, const GenerateOptions& options) {
    if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
    if (options.num_beams < 1) throw std::invalid_argument("generate: num_beams must be >= 1");
    if (options.max_length < 1) throw std::invalid_argument("generate: max_length must be >= 1");

    std::vector<Hypothesis> beams;
    beams.push_back({std::vector<text::TokenId>(prompt.begin(), prompt.end()), 0.0, false});

    struct Candidate {
        double logp;
        text::TokenId token;  // -1 marks a carried-over frozen hypothesis
        std::size_t source;
        bool finished;
    };

    while (true) {
        bool any_active = false;
        for (const auto& beam : beams)
            if (!beam.finished &&
                static_cast<std::int64_t>(beam.tokens.size()) < options.max_length)
                any_active = true;
        if (!any_active) break;

        std::vector<Candidate> candidates;
        for (std::size_t b = 0; b < beams.size(); ++b) {
            const Hypothesis& hyp = beams[b];
            if (hyp.finished ||
                static_cast<std::int64_t>(hyp.tokens.size()) >= options.max_length) {
                candidates.push_back({hyp.logp, -1, b, true});
                continue;
            }
            std::vector<double> scores = step(hyp.tokens);
            apply_ngram_block(hyp.tokens, options.no_repeat_ngram, scores);
            for (std::size_t t = 0; t < scores.size(); ++t) {
                if (scores[t] == kNegInf) continue;
                candidates.push_back({hyp.logp + scores[t], static_cast<text::TokenId>(t), b,
                                      static_cast<text::TokenId>(t) == eos_id});
            }
        }
        if (candidates.empty()) break;  // every continuation blocked

        std::sort(candidates.begin(), candidates.end(),
                  [](const Candidate& a, const Candidate& b) {
                      if (a.logp != b.logp) return a.logp > b.logp;
                      if (a.token != b.token) return a.token < b.token;
                      return a.source < b.source;
                  });

        std::vector<Hypothesis> next;
        const std::size_t keep =
            std::min(candidates.size(), static_cast<std::size_t>(options.num_beams));
        for (std::size_t i = 0; i < keep; ++i) {
            const Candidate& c = candidates[i];
            Hypothesis hyp = beams[c.source];
            if (c.token >= 0) {
                hyp.tokens.push_back(c.token);
                hyp.logp = c.logp;
                hyp.finished = c.finished;
            }
            next.push_back(std::move(hyp));
        }
        beams = std::move(next);
    }

    std::size_t best = 0;
    for (std::size_t b = 1; b < beams.size(); ++b)
        if (beams[b].logp > beams[best].logp) best = b;
    return beams[best].tokens;
}

template <typename T>
std::vector<text::TokenId> generate_tokens(const Model<T>& model,
                                           const text::Vocabulary& vocab,
                                           std::span<const text::TokenId> prompt,
                                           const GenerateOptions& options) {
    const std::int64_t window = model.config().max_seq_len;
    const text::TokenId pad = vocab.pad_id(), unk = vocab.unk_id();

    LogProbFn step = [&model, window, pad, unk](std::span<const text::TokenId> prefix) {
        std::span<const text::TokenId> view = prefix;
        if (static_cast<std::int64_t>(view.size()) > window)
            view = view.subspan(view.size() - static_cast<std::size_t>(window));
        Tensor<T> logits = model.forward(view);
        const std::int64_t last = logits.dim(0) - 1;
        const std::int64_t vocab_size = logits.dim(1);

        double max_logit = static_cast<double>(logits(last, 0));
        for (std::int64_t j = 1; j < vocab_size; ++j)
            max_logit = std::max(max_logit, static_cast<double>(logits(last, j)));
        double denom = 0.0;
        for (std::int64_t j = 0; j < vocab_size; ++j)
            denom += std::exp(static_cast<double>(logits(last, j)) - max_logit);
        const double log_denom = std::log(denom) + max_logit;

        std::vector<double> scores(static_cast<std::size_t>(vocab_size));
        for (std::int64_t j = 0; j < vocab_size; ++j)
            scores[static_cast<std::size_t>(j)] = static_cast<double>(logits(last, j)) - log_denom;
        scores[static_cast<std::size_t>(pad)] = kNegInf;
        scores[static_cast<std::size_t>(unk)] = kNegInf;
        return scores;
    };
    return beam_search(step, prompt, vocab.eos_id(), options);
}

template <typename T>
std::string generate_sentence(const Model<T>& model, const text::Vocabulary& vocab,
                              const std::string& prompt, const GenerateOptions& options) {
    std::vector<text::TokenId> prompt_ids = text::tokenize(prompt, vocab);
    if (prompt_ids.empty()) throw std::invalid_argument("generate: empty prompt");
    std::vector<text::TokenId> tokens = generate_tokens(model, vocab, prompt_ids, options);

    std::vector<text::TokenId> kept;
    for (text::TokenId id : tokens) {
        if (id == vocab.eos_id() || id == vocab.pad_id()) break;
        const std::string& word = vocab.token_of(id);
        if (word == "." || word == "!" || word == "?") break;
        kept.push_back(id);
    }
    return text::detokenize(kept, vocab);
}

template std::vector<text::TokenId> generate_tokens(const Model<float>&,
                                                    const text::Vocabulary&,
                                                    std::span<const text::TokenId>,
                                                    const GenerateOptions&);
template std::vector<text::TokenId> generate_tokens(const Model<double>&,
                                                    const text::Vocabulary&,
                                                    std::span<const text::TokenId>,
                                                    const GenerateOptions&);
template std::string generate_sentence(const Model<float>&, const text::Vocabulary&,
                                       const std::string&, const GenerateOptions&);
template std::string generate_sentence(const Model<double>&, const text::Vocabulary&,
                                       const std::string&, const GenerateOptions&);

}  // namespace lmlab::nn
