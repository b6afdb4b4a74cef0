#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace lmlab::metrics {

// A metric value plus a definedness flag for the degenerate inputs the
// scorers must survive (empty candidate, reference shorter than n, ...).
struct Score {
    double value = 0.0;
    bool defined = true;
};

// Word tokens for similarity metrics: lowercase, whitespace split,
// punctuation-only tokens dropped so scores count individual words.
std::vector<std::string> metric_tokens(std::string_view text);

// score = bp * exp(sum_n w_n * ln p_n); any zero precision gives 0.
double bleu_from_precisions(std::span<const double> precisions,
                            std::span<const double> weights, double brevity_penalty);

struct BleuOptions {
    int max_n = 4;
    std::vector<double> weights;  // empty = uniform 1/max_n
    // Default is the ratio form min(1, candidate/reference); the standard
    // exponential penalty exp(1 - ref/cand) is available for comparison.
    bool standard_brevity_penalty = false;
};

Score bleu(const std::vector<std::string>& candidate,
           const std::vector<std::vector<std::string>>& references,
           const BleuOptions& options = {});

// Clipped n-gram overlap divided by the reference n-gram count.
Score rouge_n(const std::vector<std::string>& candidate,
              const std::vector<std::string>& reference, int n);

// LCS length divided by max(len(candidate), len(reference)).
Score rouge_l(const std::vector<std::string>& candidate,
              const std::vector<std::string>& reference);

// 2^(-(1/N) * sum log2 p_i). Throws on probabilities outside (0, 1].
double perplexity(std::span<const double> token_probabilities);

// cosine(u, v) = u.v / (|u| |v|); undefined when either norm is zero
Score cosine_similarity(std::span<const double> u, std::span<const double> v);

using Embedder = std::function<std::vector<double>(const std::string&)>;

struct ReproScores {
    std::vector<Score> pairs;
    double mean = 0.0;  // over defined pairs
};

ReproScores reproducibility(const std::vector<std::string>& base_outputs,
                            const std::vector<std::string>& variant_outputs,
                            const Embedder& embedder);

void write_repro_csv(const std::filesystem::path& path, const ReproScores& scores);

struct PromptPair {
    std::string prompt;
    std::string reference;
};

std::vector<PromptPair> load_prompt_pairs(const std::filesystem::path& path);

// Type-erased model surface so evaluation is testable with injected fakes.
struct EvalModel {
    std::string name;
    std::function<std::string(const std::string& prompt)> generate;
    std::function<double(const std::string& text)> perplexity;
};

struct MetricRow {
    std::string prompt;
    Score bleu, rouge1, rouge2, rougeL;
    double perplexity = 0.0;
    bool ok = true;  // generation + scoring succeeded
};

struct ModelReport {
    std::string model;
    std::vector<MetricRow> rows;
    double avg_bleu = 0.0, avg_rouge1 = 0.0, avg_rouge2 = 0.0, avg_rougeL = 0.0;
    double avg_perplexity = 0.0;
};

// Generates one sentence per prompt for every model, scores it against the
// reference, and writes the comparison CSVs plus one generated-text file
// per model under out_dir. When variant is true the text files carry the
// _synonyms suffix.
std::vector<ModelReport> evaluate_models(const std::vector<EvalModel>& models,
                                         const std::vector<PromptPair>& prompt_set,
                                         const std::filesystem::path& out_dir,
                                         bool variant = false, int threads = 1);

}  // namespace lmlab::metrics
