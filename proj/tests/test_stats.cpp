// one-sided rank tests against exhaustive enumeration
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "lmlab/csv.hpp"
#include "lmlab/rng.hpp"
#include "lmlab/stats.hpp"

using namespace lmlab;
namespace fs = std::filesystem;

namespace {

using stats::Alternative;

// counting-formula midrank, written independently of the library's sort
double counted_rank(const std::vector<double>& pool, double v) {
    int below = 0, equal = 0;
    for (double u : pool) {
        if (u < v) ++below;
        if (u == v) ++equal;
    }
    return below + (equal + 1) / 2.0;
}

// literal enumeration over all C(n+m, n) assignments of pooled ranks to x
double oracle_rank_sum_p(const std::vector<double>& x, const std::vector<double>& y,
                         Alternative alt) {
    std::vector<double> pooled = x;
    pooled.insert(pooled.end(), y.begin(), y.end());
    const std::size_t n = x.size(), total = pooled.size();

    std::vector<double> ranks(total);
    for (std::size_t i = 0; i < total; ++i) ranks[i] = counted_rank(pooled, pooled[i]);

    double observed = 0.0;
    for (std::size_t i = 0; i < n; ++i) observed += ranks[i];
    observed -= static_cast<double>(n * (n + 1)) / 2.0;

    std::vector<std::size_t> pick(n);
    for (std::size_t i = 0; i < n; ++i) pick[i] = i;
    long in_tail = 0, assignments = 0;
    while (true) {
        double u = 0.0;
        for (std::size_t i : pick) u += ranks[i];
        u -= static_cast<double>(n * (n + 1)) / 2.0;
        ++assignments;
        if (alt == Alternative::Less ? u <= observed + 1e-9 : u >= observed - 1e-9)
            ++in_tail;

        // advance to the next index combination
        std::size_t slot = n;
        while (slot > 0 && pick[slot - 1] == total - n + slot - 1) --slot;
        if (slot == 0) break;
        ++pick[slot - 1];
        for (std::size_t i = slot; i < n; ++i) pick[i] = pick[i - 1] + 1;
    }
    return static_cast<double>(in_tail) / static_cast<double>(assignments);
}

// literal enumeration over all 2^k sign assignments
double oracle_signed_rank_p(const std::vector<double>& x, const std::vector<double>& y,
                            Alternative alt) {
    std::vector<double> abs_diff;
    std::vector<bool> positive;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double d = x[i] - y[i];
        if (d == 0.0) continue;
        abs_diff.push_back(std::fabs(d));
        positive.push_back(d > 0.0);
    }
    const std::size_t k = abs_diff.size();
    std::vector<double> ranks(k);
    for (std::size_t i = 0; i < k; ++i) ranks[i] = counted_rank(abs_diff, abs_diff[i]);

    double observed = 0.0;
    for (std::size_t i = 0; i < k; ++i)
        if (positive[i]) observed += ranks[i];

    long in_tail = 0;
    const std::size_t assignments = std::size_t{1} << k;
    for (std::size_t mask = 0; mask < assignments; ++mask) {
        double w = 0.0;
        for (std::size_t i = 0; i < k; ++i)
            if (mask & (std::size_t{1} << i)) w += ranks[i];
        if (alt == Alternative::Less ? w <= observed + 1e-9 : w >= observed - 1e-9)
            ++in_tail;
    }
    return static_cast<double>(in_tail) / static_cast<double>(assignments);
}

stats::Sample sample_of(std::vector<double> values, std::string label = "s") {
    return {std::move(values), std::move(label)};
}

}  // namespace

TEST_CASE("separated samples reach the minimal one-sided p") {
    auto r = stats::rank_sum_test(sample_of({1, 2, 3}), sample_of({4, 5, 6}),
                                  Alternative::Less);
    CHECK(r.statistic == 0.0);
    CHECK(r.method == stats::Method::Exact);
    CHECK_FALSE(r.tie_corrected);
    CHECK(r.p_value == doctest::Approx(0.05).epsilon(1e-12));  // 1 / C(6,3)

    auto opposite = stats::rank_sum_test(sample_of({1, 2, 3}), sample_of({4, 5, 6}),
                                         Alternative::Greater);
    CHECK(opposite.p_value == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("all-positive paired differences reach 1 over 2^k") {
    auto r = stats::signed_rank_test(sample_of({5, 7, 9, 12}), sample_of({1, 2, 3, 4}),
                                     Alternative::Greater);
    CHECK(r.statistic == 10.0);  // ranks 1+2+3+4
    CHECK(r.method == stats::Method::Exact);
    CHECK(r.p_value == doctest::Approx(1.0 / 16.0).epsilon(1e-12));

    auto less = stats::signed_rank_test(sample_of({5, 7, 9, 12}), sample_of({1, 2, 3, 4}),
                                        Alternative::Less);
    CHECK(less.p_value == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("a single nonzero pair gives p = 1/2 in its direction") {
    auto r = stats::signed_rank_test(sample_of({2.0}), sample_of({1.0}),
                                     Alternative::Greater);
    CHECK(r.statistic == 1.0);
    CHECK(r.p_value == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("input validation") {
    CHECK_THROWS_WITH_AS(
        stats::rank_sum_test(sample_of({}), sample_of({1.0}), Alternative::Less),
        "rank test: empty sample x", std::invalid_argument);
    CHECK_THROWS_WITH_AS(
        stats::rank_sum_test(sample_of({1.0}), sample_of({}), Alternative::Less),
        "rank test: empty sample y", std::invalid_argument);
    CHECK_THROWS_AS(stats::rank_sum_test(sample_of({std::nan("")}), sample_of({1.0}),
                                         Alternative::Less),
                    std::invalid_argument);
    CHECK_THROWS_AS(stats::signed_rank_test(sample_of({1, 2}), sample_of({1.0}),
                                            Alternative::Less),
                    std::invalid_argument);
    CHECK_THROWS_AS(stats::signed_rank_test(sample_of({1, 2}), sample_of({1, 2}),
                                            Alternative::Less),
                    std::invalid_argument);  // every difference zero
}

TEST_CASE("exact rank-sum p equals literal enumeration") {
    Rng rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        std::size_t n = 1 + rng.below(6), m = 1 + rng.below(6);
        std::vector<double> x(n), y(m);
        // a small integer grid forces heavy ties half the time
        bool gridded = rng.bernoulli(0.5);
        for (auto& v : x) v = gridded ? static_cast<double>(rng.below(4)) : rng.normal();
        for (auto& v : y) v = gridded ? static_cast<double>(rng.below(4)) : rng.normal();

        for (auto alt : {Alternative::Less, Alternative::Greater}) {
            auto r = stats::rank_sum_test(sample_of(x), sample_of(y), alt);
            REQUIRE(r.method == stats::Method::Exact);
            CHECK(r.p_value == doctest::Approx(oracle_rank_sum_p(x, y, alt)).epsilon(1e-12));
        }
    }
}

TEST_CASE("exact signed-rank p equals literal enumeration") {
    Rng rng(29);
    for (int trial = 0; trial < 100; ++trial) {
        std::size_t k = 2 + rng.below(9);
        std::vector<double> x(k), y(k);
        bool gridded = rng.bernoulli(0.5);
        for (std::size_t i = 0; i < k; ++i) {
            y[i] = gridded ? static_cast<double>(rng.below(3)) : rng.normal();
            x[i] = y[i] + (gridded ? static_cast<double>(rng.below(5)) - 2.0 : rng.normal());
        }
        bool all_zero = true;
        for (std::size_t i = 0; i < k; ++i)
            if (x[i] != y[i]) all_zero = false;
        if (all_zero) x[0] += 1.0;

        for (auto alt : {Alternative::Less, Alternative::Greater}) {
            auto r = stats::signed_rank_test(sample_of(x), sample_of(y), alt);
            REQUIRE(r.method == stats::Method::Exact);
            CHECK(r.p_value ==
                  doctest::Approx(oracle_signed_rank_p(x, y, alt)).epsilon(1e-12));
        }
    }
}

TEST_CASE("one-sided tails overlap at the observed statistic") {
    Rng rng(31);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<double> x(3 + rng.below(4)), y(3 + rng.below(4));
        for (auto& v : x) v = static_cast<double>(rng.below(5));
        for (auto& v : y) v = static_cast<double>(rng.below(5));
        double less = stats::rank_sum_test(sample_of(x), sample_of(y),
                                           Alternative::Less).p_value;
        double greater = stats::rank_sum_test(sample_of(x), sample_of(y),
                                              Alternative::Greater).p_value;
        CHECK(less + greater >= 1.0 - 1e-12);
    }
}

TEST_CASE("rank tests see only ranks: order and shifts never matter") {
    std::vector<double> x = {3.2, 1.1, 8.9, 4.4}, y = {2.0, 9.5, 0.3};
    auto baseline = stats::rank_sum_test(sample_of(x), sample_of(y), Alternative::Less);

    std::vector<double> x_shuffled = {8.9, 3.2, 4.4, 1.1};
    auto shuffled = stats::rank_sum_test(sample_of(x_shuffled), sample_of(y),
                                         Alternative::Less);
    CHECK(shuffled.statistic == baseline.statistic);
    CHECK(shuffled.p_value == baseline.p_value);

    std::vector<double> x_up = x, y_up = y;
    for (auto& v : x_up) v += 100.0;
    for (auto& v : y_up) v += 100.0;
    auto shifted = stats::rank_sum_test(sample_of(x_up), sample_of(y_up),
                                        Alternative::Less);
    CHECK(shifted.statistic == baseline.statistic);
    CHECK(shifted.p_value == baseline.p_value);
}

TEST_CASE("swapping the samples flips the alternative") {
    Rng rng(37);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> x(2 + rng.below(5)), y(2 + rng.below(5));
        for (auto& v : x) v = static_cast<double>(rng.below(6));
        for (auto& v : y) v = static_cast<double>(rng.below(6));
        double forward = stats::rank_sum_test(sample_of(x), sample_of(y),
                                              Alternative::Less).p_value;
        double reversed = stats::rank_sum_test(sample_of(y), sample_of(x),
                                               Alternative::Greater).p_value;
        CHECK(forward == doctest::Approx(reversed).epsilon(1e-12));
    }
}

TEST_CASE("the normal approximation tracks the exact tail on clean samples") {
    Rng rng(41);
    for (int trial = 0; trial < 8; ++trial) {
        std::vector<double> x(15), y(15);
        for (auto& v : x) v = rng.normal();
        for (auto& v : y) v = rng.normal(0.4, 1.0);

        auto exact = stats::rank_sum_test(sample_of(x), sample_of(y), Alternative::Less,
                                          30);  // forced exact at n+m = 30
        auto approx = stats::rank_sum_test(sample_of(x), sample_of(y), Alternative::Less);
        REQUIRE(exact.method == stats::Method::Exact);
        REQUIRE(approx.method == stats::Method::NormalApprox);
        CHECK(std::abs(exact.p_value - approx.p_value) < 0.02);
    }
}

namespace {

fs::path write_individual_csv(const std::string& name, bool paired_sweep = false) {
    fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);

    csv::Table table;
    table.header = {"Model", "Prompt", "BLEU Score", "ROUGE-1 Score", "ROUGE-2 Score",
                    "ROUGE-L Score", "Perplexity Score"};
    const std::vector<double> strong_bleu = {0.9, 0.8, 0.85, 0.95};
    const std::vector<double> weak_bleu = {0.2, 0.3, 0.25, 0.15};
    const std::vector<double> strong_ppl = {1.5, 1.6, 1.4, 1.7};
    const std::vector<double> weak_ppl = {9.0, 8.0, 10.0, 11.0};
    for (std::size_t i = 0; i < 4; ++i)
        table.rows.push_back({"strong", "p" + std::to_string(i),
                              std::to_string(strong_bleu[i]), std::to_string(strong_bleu[i]),
                              std::to_string(strong_bleu[i]), std::to_string(strong_bleu[i]),
                              std::to_string(strong_ppl[i])});
    for (std::size_t i = 0; i < 4; ++i)
        table.rows.push_back({"weak", "p" + std::to_string(i),
                              std::to_string(weak_bleu[i]), std::to_string(weak_bleu[i]),
                              std::to_string(weak_bleu[i]), std::to_string(weak_bleu[i]),
                              paired_sweep ? "failed" : std::to_string(weak_ppl[i])});

    fs::path file = dir / "individual.csv";
    csv::write_file(file, table);
    return file;
}

}  // namespace

TEST_CASE("report comparison splits by model and honors per-metric directions") {
    fs::path file = write_individual_csv("lmlab_stats_cmp");
    const std::vector<std::string> metrics = {"BLEU Score", "ROUGE-1 Score",
                                              "ROUGE-L Score", "Perplexity Score"};
    std::map<std::string, Alternative> directions = {
        {"Perplexity Score", Alternative::Less}};

    auto rows = stats::compare_reports(file, metrics, directions, Alternative::Greater);
    REQUIRE(rows.size() == 4);
    CHECK(rows[0].metric == "BLEU Score");
    // strong beats weak everywhere: minimal one-sided p is 1 / C(8,4)
    for (const auto& row : rows) {
        CHECK(row.result.method == stats::Method::Exact);
        CHECK(row.result.p_value == doctest::Approx(1.0 / 70.0).epsilon(1e-12));
    }
    CHECK(rows[3].result.alternative == Alternative::Less);
    CHECK(rows[0].result.alternative == Alternative::Greater);

    // explicit labels reverse the roles
    auto reversed = stats::compare_reports(file, {"BLEU Score"}, {}, Alternative::Greater,
                                           stats::TestKind::RankSum, "weak", "strong");
    CHECK(reversed[0].result.p_value == doctest::Approx(1.0).epsilon(1e-12));

    CHECK_THROWS_WITH_AS(stats::compare_reports(file, {"No Such Score"}, {},
                                                Alternative::Greater),
                         "metrics file: missing column 'No Such Score'",
                         std::runtime_error);
}

TEST_CASE("report comparison supports the paired test and skips failed cells") {
    fs::path file = write_individual_csv("lmlab_stats_paired", true);

    auto paired = stats::compare_reports(file, {"BLEU Score"}, {}, Alternative::Greater,
                                         stats::TestKind::SignedRank);
    REQUIRE(paired.size() == 1);
    CHECK(paired[0].result.statistic == 10.0);
    CHECK(paired[0].result.p_value == doctest::Approx(1.0 / 16.0).epsilon(1e-12));

    // the weak model's perplexity cells all read "failed": its sample is empty
    CHECK_THROWS_WITH_AS(stats::compare_reports(file, {"Perplexity Score"}, {},
                                                Alternative::Less),
                         "rank test: empty sample y", std::invalid_argument);
}

TEST_CASE("identical samples cannot separate") {
    fs::path dir = fs::temp_directory_path() / "lmlab_stats_identical";
    fs::remove_all(dir);
    fs::create_directories(dir);
    csv::Table table;
    table.header = {"Model", "Prompt", "BLEU Score"};
    for (int i = 0; i < 4; ++i) {
        table.rows.push_back({"a", "p" + std::to_string(i), "0.5"});
        table.rows.push_back({"b", "p" + std::to_string(i), "0.5"});
    }
    fs::path file = dir / "individual.csv";
    csv::write_file(file, table);

    auto rows = stats::compare_reports(file, {"BLEU Score"}, {}, Alternative::Greater);
    CHECK(rows[0].result.p_value == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rows[0].result.tie_corrected);
}

TEST_CASE("comparison outputs render as a table and a csv") {
    std::vector<stats::MetricComparison> rows;
    stats::RankTestResult r;
    r.statistic = 244.0;
    r.p_value = 0.60;
    r.alternative = Alternative::Greater;
    rows.push_back({"BLEU Score", r});
    r.statistic = 106.0;
    r.p_value = 0.004;
    r.alternative = Alternative::Less;
    r.method = stats::Method::NormalApprox;
    rows.push_back({"Perplexity Score", r});

    std::string table = stats::comparison_table(rows);
    CHECK(table.find("Metric") != std::string::npos);
    CHECK(table.find("Test statistic") != std::string::npos);
    CHECK(table.find("P-value") != std::string::npos);
    CHECK(table.find("BLEU Score") != std::string::npos);
    CHECK(table.find("244") != std::string::npos);
    CHECK(table.find("0.004") != std::string::npos);

    fs::path dir = fs::temp_directory_path() / "lmlab_stats_csv";
    fs::remove_all(dir);
    fs::create_directories(dir);
    fs::path file = dir / "comparison.csv";
    stats::write_comparison_csv(file, rows);
    csv::Table read = csv::read_file(file);
    REQUIRE(read.header ==
            std::vector<std::string>{"Metric", "Test Statistic", "P-value", "Method",
                                     "Alternative", "Tie Corrected"});
    REQUIRE(read.rows.size() == 2);
    CHECK(read.rows[0][0] == "BLEU Score");
    CHECK(read.rows[0][4] == "greater");
    CHECK(read.rows[1][3] == "normal-approximation");
}
