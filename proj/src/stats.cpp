#include "lmlab/stats.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "lmlab/csv.hpp"
#include "lmlab/util.hpp"

namespace lmlab::stats {

namespace {

void validate(const Sample& s, const char* which) {
    if (s.values.empty())
        throw std::invalid_argument(std::string("rank test: empty sample ") + which);
    for (double v : s.values)
        if (!std::isfinite(v))
            throw std::invalid_argument(std::string("rank test: non-finite value in ") + which);
}

// midranks over values; ties share the average of the ranks they span
std::vector<double> midranks(const std::vector<double>& values, bool* any_ties) {
    size_t n = values.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return values[a] < values[b]; });

    std::vector<double> ranks(n, 0.0);
    if (any_ties) *any_ties = false;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
        double rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
        if (any_ties && j > i) *any_ties = true;
        i = j + 1;
    }
    return ranks;
}

// sum of (t^3 - t) over tie groups
double tie_term(const std::vector<double>& values) {
    std::vector<double> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    double sum = 0.0;
    size_t i = 0;
    while (i < sorted.size()) {
        size_t j = i;
        while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
        double t = static_cast<double>(j - i + 1);
        sum += t * t * t - t;
        i = j + 1;
    }
    return sum;
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// one-sided p with 0.5 continuity correction; exact-tie-at-mean collapses
// to p = 1 when the variance is zero
double approx_p(double observed, double mean, double variance, Alternative alternative) {
    if (variance <= 0.0) return 1.0;
    double sd = std::sqrt(variance);
    if (alternative == Alternative::Less) return normal_cdf((observed - mean + 0.5) / sd);
    return 1.0 - normal_cdf((observed - mean - 0.5) / sd);
}

// distribution of the sum of `pick` doubled ranks drawn without replacement:
// ways[s] counts the C(N, pick) index subsets with doubled-rank sum s, which
// makes the exact p-value an exhaustive count over all rank assignments
std::vector<std::vector<double>> subset_sum_counts(const std::vector<long>& doubled,
                                                   size_t pick) {
    long max_sum = std::accumulate(doubled.begin(), doubled.end(), 0L);
    std::vector<std::vector<double>> ways(
        pick + 1, std::vector<double>(static_cast<size_t>(max_sum) + 1, 0.0));
    ways[0][0] = 1.0;
    for (long d : doubled) {
        for (size_t k = pick; k >= 1; --k) {
            for (long s = max_sum; s >= d; --s) {
                double from = ways[k - 1][static_cast<size_t>(s - d)];
                if (from != 0.0) ways[k][static_cast<size_t>(s)] += from;
            }
        }
    }
    return ways;
}

double tail_probability(const std::vector<double>& counts, long observed,
                        Alternative alternative) {
    double total = 0.0, tail = 0.0;
    for (size_t s = 0; s < counts.size(); ++s) {
        total += counts[s];
        bool in_tail = alternative == Alternative::Less
                           ? static_cast<long>(s) <= observed
                           : static_cast<long>(s) >= observed;
        if (in_tail) tail += counts[s];
    }
    return tail / total;
}

long doubled_rank_sum(const std::vector<double>& ranks, size_t begin, size_t end) {
    double sum = 0.0;
    for (size_t i = begin; i < end; ++i) sum += ranks[i];
    return std::lround(2.0 * sum);
}

}  // namespace

const char* to_string(Alternative a) {
    return a == Alternative::Less ? "less" : "greater";
}

const char* to_string(Method m) {
    return m == Method::Exact ? "exact" : "normal-approximation";
}

RankTestResult rank_sum_test(const Sample& x, const Sample& y, Alternative alternative,
                             int exact_threshold) {
    validate(x, "x");
    validate(y, "y");
    size_t n = x.values.size(), m = y.values.size(), total = n + m;

    std::vector<double> pooled = x.values;
    pooled.insert(pooled.end(), y.values.begin(), y.values.end());
    bool ties = false;
    std::vector<double> ranks = midranks(pooled, &ties);

    long rank_sum_x2 = doubled_rank_sum(ranks, 0, n);                 // 2 * R_x
    long offset2 = static_cast<long>(n) * static_cast<long>(n + 1);   // 2 * n(n+1)/2
    double u_x = static_cast<double>(rank_sum_x2 - offset2) / 2.0;

    RankTestResult result;
    result.statistic = u_x;
    result.alternative = alternative;
    result.tie_corrected = ties;

    if (total <= static_cast<size_t>(exact_threshold)) {
        result.method = Method::Exact;
        std::vector<long> doubled(total);
        for (size_t i = 0; i < total; ++i) doubled[i] = std::lround(2.0 * ranks[i]);
        auto ways = subset_sum_counts(doubled, n);
        // tail on R_x is the tail on U_x shifted by the constant n(n+1)/2
        result.p_value = tail_probability(ways[n], rank_sum_x2, alternative);
    } else {
        result.method = Method::NormalApprox;
        double nn = static_cast<double>(n), mm = static_cast<double>(m);
        double nt = static_cast<double>(total);
        double mean = nn * mm / 2.0;
        double variance =
            nn * mm / 12.0 * ((nt + 1.0) - tie_term(pooled) / (nt * (nt - 1.0)));
        result.p_value = approx_p(u_x, mean, variance, alternative);
    }
    result.p_value = std::clamp(result.p_value, 0.0, 1.0);
    return result;
}

RankTestResult signed_rank_test(const Sample& x, const Sample& y, Alternative alternative,
                                int exact_threshold) {
    validate(x, "x");
    validate(y, "y");
    if (x.values.size() != y.values.size())
        throw std::invalid_argument("signed-rank test: samples must be paired");

    std::vector<double> abs_diff;
    std::vector<bool> positive;
    for (size_t i = 0; i < x.values.size(); ++i) {
        double d = x.values[i] - y.values[i];
        if (d == 0.0) continue;
        abs_diff.push_back(std::fabs(d));
        positive.push_back(d > 0.0);
    }
    size_t k = abs_diff.size();
    if (k == 0)
        throw std::invalid_argument("signed-rank test: all differences are zero");

    bool ties = false;
    std::vector<double> ranks = midranks(abs_diff, &ties);
    double w_plus = 0.0;
    for (size_t i = 0; i < k; ++i)
        if (positive[i]) w_plus += ranks[i];
    long w_plus2 = std::lround(2.0 * w_plus);

    RankTestResult result;
    result.statistic = w_plus;
    result.alternative = alternative;
    result.tie_corrected = ties;

    if (k <= static_cast<size_t>(exact_threshold)) {
        result.method = Method::Exact;
        // ways[s] counts the 2^k sign vectors whose positive-rank sum is s
        long max_sum = 0;
        std::vector<long> doubled(k);
        for (size_t i = 0; i < k; ++i) {
            doubled[i] = std::lround(2.0 * ranks[i]);
            max_sum += doubled[i];
        }
        std::vector<double> ways(static_cast<size_t>(max_sum) + 1, 0.0);
        ways[0] = 1.0;
        for (long d : doubled)
            for (long s = max_sum; s >= d; --s)
                ways[static_cast<size_t>(s)] += ways[static_cast<size_t>(s - d)];
        result.p_value = tail_probability(ways, w_plus2, alternative);
    } else {
        result.method = Method::NormalApprox;
        double kk = static_cast<double>(k);
        double mean = kk * (kk + 1.0) / 4.0;
        double variance = kk * (kk + 1.0) * (2.0 * kk + 1.0) / 24.0 - tie_term(abs_diff) / 48.0;
        result.p_value = approx_p(w_plus, mean, variance, alternative);
    }
    result.p_value = std::clamp(result.p_value, 0.0, 1.0);
    return result;
}

namespace {

size_t column_index(const std::vector<std::string>& header, const std::string& name) {
    for (size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return i;
    throw std::runtime_error("metrics file: missing column '" + name + "'");
}

bool parse_number(const std::string& cell, double* out) {
    if (cell.empty()) return false;
    char* end = nullptr;
    double v = std::strtod(cell.c_str(), &end);
    if (end != cell.c_str() + cell.size() || !std::isfinite(v)) return false;
    *out = v;
    return true;
}

}  // namespace

std::vector<MetricComparison> compare_reports(
    const std::filesystem::path& individual_csv,
    const std::vector<std::string>& metric_columns,
    const std::map<std::string, Alternative>& directions, Alternative default_direction,
    TestKind kind, const std::string& model_x, const std::string& model_y,
    int exact_threshold) {
    csv::Table table = csv::read_file(individual_csv);
    size_t model_col = column_index(table.header, "Model");

    std::string label_x = model_x, label_y = model_y;
    if (label_x.empty() || label_y.empty()) {
        std::vector<std::string> seen;
        for (const auto& row : table.rows) {
            const std::string& label = row.at(model_col);
            if (std::find(seen.begin(), seen.end(), label) == seen.end())
                seen.push_back(label);
        }
        if (seen.size() < 2)
            throw std::runtime_error("metrics file: need two model labels, found " +
                                     std::to_string(seen.size()));
        if (label_x.empty()) label_x = seen[0];
        if (label_y.empty()) label_y = label_x == seen[0] ? seen[1] : seen[0];
    }

    std::vector<MetricComparison> out;
    for (const std::string& metric : metric_columns) {
        size_t col = column_index(table.header, metric);
        Sample sx{{}, label_x}, sy{{}, label_y};
        for (const auto& row : table.rows) {
            double v = 0.0;
            if (!parse_number(row.at(col), &v)) continue;
            if (row.at(model_col) == label_x) sx.values.push_back(v);
            else if (row.at(model_col) == label_y) sy.values.push_back(v);
        }
        auto dir = directions.count(metric) ? directions.at(metric) : default_direction;
        RankTestResult r = kind == TestKind::RankSum
                               ? rank_sum_test(sx, sy, dir, exact_threshold)
                               : signed_rank_test(sx, sy, dir, exact_threshold);
        out.push_back({metric, r});
    }
    return out;
}

std::string comparison_table(const std::vector<MetricComparison>& rows) {
    std::vector<std::array<std::string, 3>> cells;
    cells.push_back({"Metric", "Test statistic", "P-value"});
    for (const auto& row : rows)
        cells.push_back({row.metric, util::format_double(row.result.statistic),
                         util::format_double(row.result.p_value)});

    size_t width[3] = {0, 0, 0};
    for (const auto& row : cells)
        for (int c = 0; c < 3; ++c) width[c] = std::max(width[c], row[c].size());

    std::ostringstream out;
    for (const auto& row : cells) {
        for (int c = 0; c < 3; ++c) {
            out << row[c];
            if (c < 2) out << std::string(width[c] - row[c].size() + 2, ' ');
        }
        out << '\n';
    }
    return out.str();
}

void write_comparison_csv(const std::filesystem::path& path,
                          const std::vector<MetricComparison>& rows) {
    csv::Table table;
    table.header = {"Metric", "Test Statistic", "P-value", "Method", "Alternative",
                    "Tie Corrected"};
    for (const auto& row : rows)
        table.rows.push_back({row.metric, util::format_double(row.result.statistic),
                              util::format_double(row.result.p_value),
                              to_string(row.result.method), to_string(row.result.alternative),
                              row.result.tie_corrected ? "true" : "false"});
    csv::write_file(path, table);
}

}  // namespace lmlab::stats
