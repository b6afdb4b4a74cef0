#include "lmlab/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "lmlab/config.hpp"
#include "lmlab/csv.hpp"
#include "lmlab/util.hpp"

namespace lmlab::metrics {

namespace {

bool is_ascii_punct(char c) {
    return std::ispunct(static_cast<unsigned char>(c)) != 0;
}

using NgramCounts = std::map<std::vector<std::string>, int>;

NgramCounts count_ngrams(const std::vector<std::string>& tokens, int n) {
    NgramCounts counts;
    if (static_cast<int>(tokens.size()) < n) return counts;
    for (size_t i = 0; i + n <= tokens.size(); ++i) {
        std::vector<std::string> gram(tokens.begin() + i, tokens.begin() + i + n);
        ++counts[std::move(gram)];
    }
    return counts;
}

}  // namespace

std::vector<std::string> metric_tokens(std::string_view text) {
    std::vector<std::string> tokens;
    std::string word;
    auto flush = [&] {
        if (word.empty()) return;
        size_t begin = 0, end = word.size();
        while (begin < end && is_ascii_punct(word[begin])) ++begin;
        while (end > begin && is_ascii_punct(word[end - 1])) --end;
        if (end > begin) tokens.push_back(word.substr(begin, end - begin));
        word.clear();
    };
    for (char raw : text) {
        unsigned char c = static_cast<unsigned char>(raw);
        if (std::isspace(c)) {
            flush();
        } else {
            word += static_cast<char>(std::tolower(c));
        }
    }
    flush();
    return tokens;
}

double bleu_from_precisions(std::span<const double> precisions,
                            std::span<const double> weights, double brevity_penalty) {
    if (precisions.size() != weights.size())
        throw std::invalid_argument("bleu: precisions/weights length mismatch");
    double log_sum = 0.0;
    for (size_t i = 0; i < precisions.size(); ++i) {
        if (precisions[i] <= 0.0) return 0.0;
        log_sum += weights[i] * std::log(precisions[i]);
    }
    return brevity_penalty * std::exp(log_sum);
}

Score bleu(const std::vector<std::string>& candidate,
           const std::vector<std::vector<std::string>>& references,
           const BleuOptions& options) {
    if (options.max_n < 1) throw std::invalid_argument("bleu: max_n must be >= 1");
    if (references.empty()) throw std::invalid_argument("bleu: no references");

    std::vector<double> weights = options.weights;
    if (weights.empty())
        weights.assign(options.max_n, 1.0 / options.max_n);
    if (static_cast<int>(weights.size()) != options.max_n)
        throw std::invalid_argument("bleu: weights length must equal max_n");

    if (candidate.empty()) return {0.0, false};

    std::vector<double> precisions(options.max_n, 0.0);
    for (int n = 1; n <= options.max_n; ++n) {
        long total = static_cast<long>(candidate.size()) - n + 1;
        if (total <= 0) return {0.0, false};
        NgramCounts cand_counts = count_ngrams(candidate, n);
        long matched = 0;
        for (const auto& [gram, count] : cand_counts) {
            int best_ref = 0;
            for (const auto& ref : references) {
                // recount per reference; prompt-scale inputs keep this cheap
                int c = 0;
                if (static_cast<int>(ref.size()) >= n)
                    for (size_t i = 0; i + n <= ref.size(); ++i)
                        if (std::equal(gram.begin(), gram.end(), ref.begin() + i)) ++c;
                best_ref = std::max(best_ref, c);
            }
            matched += std::min(count, best_ref);
        }
        precisions[n - 1] = static_cast<double>(matched) / static_cast<double>(total);
        if (matched == 0) return {0.0, false};
    }

    // effective reference length: closest to the candidate, ties to shorter
    size_t cand_len = candidate.size();
    size_t ref_len = references[0].size();
    for (const auto& ref : references) {
        auto dist = [cand_len](size_t len) {
            return len > cand_len ? len - cand_len : cand_len - len;
        };
        if (dist(ref.size()) < dist(ref_len) ||
            (dist(ref.size()) == dist(ref_len) && ref.size() < ref_len))
            ref_len = ref.size();
    }
    if (ref_len == 0) throw std::invalid_argument("bleu: empty reference");

    double ratio = static_cast<double>(cand_len) / static_cast<double>(ref_len);
    double bp = options.standard_brevity_penalty
                    ? (cand_len > ref_len ? 1.0 : std::exp(1.0 - 1.0 / ratio))
                    : std::min(1.0, ratio);
    return {bleu_from_precisions(precisions, weights, bp), true};
}

Score rouge_n(const std::vector<std::string>& candidate,
              const std::vector<std::string>& reference, int n) {
    if (n < 1) throw std::invalid_argument("rouge_n: n must be >= 1");
    long ref_total = static_cast<long>(reference.size()) - n + 1;
    if (ref_total <= 0) return {0.0, false};

    NgramCounts ref_counts = count_ngrams(reference, n);
    NgramCounts cand_counts = count_ngrams(candidate, n);
    long matched = 0;
    for (const auto& [gram, count] : cand_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) matched += std::min(count, it->second);
    }
    return {static_cast<double>(matched) / static_cast<double>(ref_total), true};
}

Score rouge_l(const std::vector<std::string>& candidate,
              const std::vector<std::string>& reference) {
    if (candidate.empty() || reference.empty()) return {0.0, false};
    size_t m = candidate.size(), n = reference.size();
    // two-row LCS table
    std::vector<long> prev(n + 1, 0), curr(n + 1, 0);
    for (size_t i = 1; i <= m; ++i) {
        for (size_t j = 1; j <= n; ++j) {
            if (candidate[i - 1] == reference[j - 1])
                curr[j] = prev[j - 1] + 1;
            else
                curr[j] = std::max(prev[j], curr[j - 1]);
        }
        std::swap(prev, curr);
    }
    return {static_cast<double>(prev[n]) / static_cast<double>(std::max(m, n)), true};
}

double perplexity(std::span<const double> token_probabilities) {
    if (token_probabilities.empty())
        throw std::invalid_argument("perplexity: no probabilities");
    double sum_log2 = 0.0;
    for (double p : token_probabilities) {
        if (!(p > 0.0) || p > 1.0)
            throw std::invalid_argument("perplexity: probability outside (0, 1]");
        sum_log2 += std::log2(p);
    }
    return std::exp2(-sum_log2 / static_cast<double>(token_probabilities.size()));
}

Score cosine_similarity(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size())
        throw std::invalid_argument("cosine: dimension mismatch");
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    if (nu == 0.0 || nv == 0.0) return {0.0, false};
    return {dot / (std::sqrt(nu) * std::sqrt(nv)), true};
}

ReproScores reproducibility(const std::vector<std::string>& base_outputs,
                            const std::vector<std::string>& variant_outputs,
                            const Embedder& embedder) {
    if (base_outputs.size() != variant_outputs.size())
        throw std::invalid_argument("reproducibility: output lists differ in length");
    ReproScores out;
    double sum = 0.0;
    size_t defined = 0;
    for (size_t i = 0; i < base_outputs.size(); ++i) {
        std::vector<double> u = embedder(base_outputs[i]);
        std::vector<double> v = embedder(variant_outputs[i]);
        Score s = cosine_similarity(u, v);
        if (s.defined) {
            sum += s.value;
            ++defined;
        }
        out.pairs.push_back(s);
    }
    out.mean = defined ? sum / static_cast<double>(defined) : 0.0;
    return out;
}

void write_repro_csv(const std::filesystem::path& path, const ReproScores& scores) {
    std::ostringstream out;
    out << "Pair Number,Cosine Similarity\n";
    for (size_t i = 0; i < scores.pairs.size(); ++i) {
        const Score& s = scores.pairs[i];
        out << (i + 1) << ',' << (s.defined ? util::format_double(s.value) : "undefined")
            << '\n';
    }
    util::atomic_write_file(path, out.str());
}

std::vector<PromptPair> load_prompt_pairs(const std::filesystem::path& path) {
    config::Table root = config::parse_file(path);
    auto it = root.table_arrays.find("pair");
    if (it == root.table_arrays.end())
        throw std::runtime_error("prompt file " + path.string() + " has no [[pair]] entries");
    std::vector<PromptPair> pairs;
    for (const auto& entry : it->second) {
        PromptPair p;
        p.prompt = entry.require("prompt").as_string();
        p.reference = entry.require("reference").as_string();
        if (p.reference.empty())
            throw std::runtime_error("prompt file: empty reference for prompt '" + p.prompt + "'");
        pairs.push_back(std::move(p));
    }
    return pairs;
}

namespace {

MetricRow score_prompt(const EvalModel& model, const PromptPair& pair,
                       std::string& generated_out) {
    MetricRow row;
    row.prompt = pair.prompt;
    try {
        std::string generated = model.generate(pair.prompt);
        std::vector<std::string> cand = metric_tokens(generated);
        std::vector<std::string> ref = metric_tokens(pair.reference);
        row.bleu = bleu(cand, {ref});
        row.rouge1 = rouge_n(cand, ref, 1);
        row.rouge2 = rouge_n(cand, ref, 2);
        row.rougeL = rouge_l(cand, ref);
        row.perplexity = model.perplexity(generated);
        generated_out = std::move(generated);
    } catch (const std::exception&) {
        row.ok = false;
    }
    return row;
}

}  // namespace

std::vector<ModelReport> evaluate_models(const std::vector<EvalModel>& models,
                                         const std::vector<PromptPair>& prompt_set,
                                         const std::filesystem::path& out_dir,
                                         bool variant, int threads) {
    if (prompt_set.empty()) throw std::invalid_argument("evaluate_models: empty prompt set");
    std::filesystem::create_directories(out_dir);

    size_t n_models = models.size(), n_prompts = prompt_set.size();
    std::vector<MetricRow> rows(n_models * n_prompts);
    std::vector<std::string> texts(n_models * n_prompts);

    auto run_cell = [&](size_t cell) {
        size_t m = cell / n_prompts, p = cell % n_prompts;
        rows[cell] = score_prompt(models[m], prompt_set[p], texts[cell]);
    };
    size_t cells = n_models * n_prompts;
    if (threads <= 1 || cells <= 1) {
        for (size_t cell = 0; cell < cells; ++cell) run_cell(cell);
    } else {
        std::atomic<size_t> next{0};
        auto worker = [&] {
            for (size_t cell; (cell = next.fetch_add(1)) < cells;) run_cell(cell);
        };
        std::vector<std::thread> pool;
        size_t pool_size = std::min<size_t>(threads, cells);
        for (size_t t = 0; t < pool_size; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    const char* text_suffix =
        variant ? "_generated_text_synonyms.txt" : "_generated_text.txt";
    std::vector<ModelReport> reports;
    for (size_t m = 0; m < n_models; ++m) {
        ModelReport rep;
        rep.model = models[m].name;
        std::string text_file;
        double b = 0, r1 = 0, r2 = 0, rl = 0, pp = 0;
        size_t ok_count = 0;
        for (size_t p = 0; p < n_prompts; ++p) {
            size_t cell = m * n_prompts + p;
            rep.rows.push_back(rows[cell]);
            // failed rows keep their (empty) line so pair indices stay aligned
            text_file += texts[cell];
            text_file += '\n';
            if (!rows[cell].ok) continue;
            ++ok_count;
            b += rows[cell].bleu.value;
            r1 += rows[cell].rouge1.value;
            r2 += rows[cell].rouge2.value;
            rl += rows[cell].rougeL.value;
            pp += rows[cell].perplexity;
        }
        if (ok_count) {
            double k = static_cast<double>(ok_count);
            rep.avg_bleu = b / k;
            rep.avg_rouge1 = r1 / k;
            rep.avg_rouge2 = r2 / k;
            rep.avg_rougeL = rl / k;
            rep.avg_perplexity = pp / k;
        }
        util::atomic_write_file(out_dir / (models[m].name + text_suffix), text_file);
        reports.push_back(std::move(rep));
    }

    const char* avg_name =
        variant ? "model_comparison_metrics_synonyms.csv" : "model_comparison_metrics.csv";
    const char* ind_name = variant ? "model_comparison_metrics_synonyms_individual.csv"
                                   : "model_comparison_metrics_individual.csv";

    csv::Table averages;
    averages.header = {"Model",         "BLEU Score",    "ROUGE-1 Score",
                       "ROUGE-2 Score", "ROUGE-L Score", "Perplexity Score"};
    for (const auto& rep : reports)
        averages.rows.push_back({rep.model, util::format_double(rep.avg_bleu),
                                 util::format_double(rep.avg_rouge1),
                                 util::format_double(rep.avg_rouge2),
                                 util::format_double(rep.avg_rougeL),
                                 util::format_double(rep.avg_perplexity)});
    csv::write_file(out_dir / avg_name, averages);

    csv::Table individual;
    individual.header = {"Model",         "Prompt",        "BLEU Score",
                         "ROUGE-1 Score", "ROUGE-2 Score", "ROUGE-L Score",
                         "Perplexity Score"};
    for (const auto& rep : reports)
        for (const auto& row : rep.rows)
            individual.rows.push_back(
                {rep.model, row.prompt, util::format_double(row.bleu.value),
                 util::format_double(row.rouge1.value), util::format_double(row.rouge2.value),
                 util::format_double(row.rougeL.value),
                 row.ok ? util::format_double(row.perplexity) : "failed"});
    csv::write_file(out_dir / ind_name, individual);

    return reports;
}

}  // namespace lmlab::metrics
