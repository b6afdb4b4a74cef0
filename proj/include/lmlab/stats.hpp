#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace lmlab::stats {

enum class Alternative { Less, Greater };
enum class Method { Exact, NormalApprox };
enum class TestKind { RankSum, SignedRank };

struct Sample {
    std::vector<double> values;
    std::string label;
};

struct RankTestResult {
    double statistic = 0.0;  // U of x (rank-sum) or W+ (signed-rank)
    double p_value = 1.0;
    Method method = Method::Exact;
    Alternative alternative = Alternative::Less;
    bool tie_corrected = false;
};

// Mann-Whitney U of x over pooled midranks. Exact p-value counts all
// C(n+m, n) rank assignments (computed by dynamic programming, identical to
// exhaustive enumeration) while n+m <= exact_threshold; otherwise a
// tie-corrected normal approximation with 0.5 continuity correction.
RankTestResult rank_sum_test(const Sample& x, const Sample& y, Alternative alternative,
                             int exact_threshold = 16);

// Paired test on d = x - y: zeros dropped, |d| midranked, W+ = rank sum of
// positive differences. Exact p counts all 2^k sign assignments while
// k <= exact_threshold.
RankTestResult signed_rank_test(const Sample& x, const Sample& y, Alternative alternative,
                                int exact_threshold = 16);

const char* to_string(Alternative a);
const char* to_string(Method m);

struct MetricComparison {
    std::string metric;
    RankTestResult result;
};

// Splits the per-prompt metrics CSV by its Model column and tests model_x
// against model_y per metric. Empty model names select the first two labels
// in file order. Rows whose metric cell is not numeric (failed generations)
// are skipped.
std::vector<MetricComparison> compare_reports(
    const std::filesystem::path& individual_csv,
    const std::vector<std::string>& metric_columns,
    const std::map<std::string, Alternative>& directions, Alternative default_direction,
    TestKind kind = TestKind::RankSum, const std::string& model_x = "",
    const std::string& model_y = "", int exact_threshold = 16);

// Aligned text table with Metric / Test statistic / P-value columns.
std::string comparison_table(const std::vector<MetricComparison>& rows);

void write_comparison_csv(const std::filesystem::path& path,
                          const std::vector<MetricComparison>& rows);

}  // namespace lmlab::stats
