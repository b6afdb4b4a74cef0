// manifest parsing, TEI extraction, encoding filter, corpus round-trips
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <string>
#include <vector>

#include "lmlab/ingest.hpp"
#include "lmlab/util.hpp"

using namespace lmlab;
namespace fs = std::filesystem;

static const fs::path kDataDir = TEST_DATA_DIR;

static fs::path temp_dir(const std::string& leaf) {
    fs::path dir = fs::temp_directory_path() / ("lmlab_ingest_" + leaf);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

TEST_CASE("manifest parses records and collects diagnostics") {
    std::string jsonl =
        R"({"paperId": "abc123", "openAccessPdf": {"url": "http://host/a.pdf"}})"
        "\n"
        R"({"paperId": "noUrl", "openAccessPdf": null})"
        "\n"
        "\n"
        "{not json\n"
        R"({"openAccessPdf": {"url": "http://host/orphan.pdf"}})"
        "\n"
        R"({"paperId": "plain"})"
        "\n";
    ingest::ManifestParse parsed = ingest::parse_manifest(jsonl);
    REQUIRE(parsed.records.size() == 3);
    CHECK(parsed.records[0].paper_id == "abc123");
    REQUIRE(parsed.records[0].pdf_url.has_value());
    CHECK(*parsed.records[0].pdf_url == "http://host/a.pdf");
    CHECK_FALSE(parsed.records[1].pdf_url.has_value());
    CHECK_FALSE(parsed.records[2].pdf_url.has_value());
    REQUIRE(parsed.diagnostics.size() == 2);
    CHECK(parsed.diagnostics[0].find("line 4") != std::string::npos);
    CHECK(parsed.diagnostics[1].find("line 5") != std::string::npos);
}

TEST_CASE("sanitize_id keeps filesystem-safe characters") {
    CHECK(ingest::sanitize_id("abc123") == "abc123");
    CHECK(ingest::sanitize_id("a/b\\c:d").find('/') == std::string::npos);
    CHECK(ingest::sanitize_id("a/b\\c:d").find('\\') == std::string::npos);
    CHECK_FALSE(ingest::sanitize_id("..").empty());
}

TEST_CASE("tei extraction keeps body paragraphs only") {
    std::string xml = util::read_text_file(kDataDir / "tei_alpha.xml");
    ingest::DocumentText doc = ingest::extract_tei_text(xml, "alpha");
    CHECK(doc.kept);
    CHECK(doc.source_id == "alpha");
    CHECK(doc.text ==
          "The alpha instrument separates ions by their mass-to-charge ratio & records a "
          "spectrum. Collision energy was held at ten volts during each scan. Calibration "
          "used a reference mixture of three peptides.");
    // excluded subtrees never leak
    CHECK(doc.text.find("Reference entry") == std::string::npos);
    CHECK(doc.text.find("Acknowledgements") == std::string::npos);
    CHECK(doc.text.find("catalogue") == std::string::npos);
    CHECK(doc.text.find("boilerplate") == std::string::npos);
    CHECK(doc.text.find("Introduction") == std::string::npos);
}

TEST_CASE("tei extraction decodes references and cdata, collapses whitespace") {
    std::string xml = util::read_text_file(kDataDir / "tei_beta.xml");
    ingest::DocumentText doc = ingest::extract_tei_text(xml, "beta");
    CHECK(doc.kept);
    // hex and decimal references to U+2009 both decode to the same UTF-8
    CHECK(doc.text ==
          "Resolution improved from 10\xE2\x80\x89"
          "000 to 40\xE2\x80\x89"
          "000 over three instrument generations. "
          "Raw fragment <M+H]+ ions & adducts survive quadrupole transfer.");
    CHECK(doc.text.find('\n') == std::string::npos);
    CHECK(doc.text.find('\t') == std::string::npos);
}

TEST_CASE("tei without a body is skipped, not an error") {
    std::string xml = util::read_text_file(kDataDir / "tei_gamma.xml");
    ingest::DocumentText doc = ingest::extract_tei_text(xml, "gamma");
    CHECK_FALSE(doc.kept);
    CHECK(doc.text.empty());
}

TEST_CASE("malformed tei names the source in the error") {
    std::string xml = util::read_text_file(kDataDir / "broken.xml");
    CHECK_THROWS_WITH_AS(ingest::extract_tei_text(xml, "brk42"),
                         doctest::Contains("brk42"), std::runtime_error);
}

TEST_CASE("encoding filter validates utf-8 and strips control bytes") {
    std::string good = "line\nwith\ttabs and \x01 bells\x07";
    CHECK(ingest::encoding_filter(good));
    CHECK(good == "line\nwith\ttabs and  bells");

    std::string bad = "broken \xC0\xAF sequence";
    CHECK_FALSE(ingest::encoding_filter(bad));
}

TEST_CASE("corpus build, split and reload recover documents exactly") {
    std::vector<ingest::DocumentText> docs;
    for (int i = 0; i < 10; ++i) {
        ingest::DocumentText d;
        d.source_id = "doc" + std::to_string(i);
        d.text = "Document number " + std::to_string(i) + " talks about ions.";
        d.kept = true;
        docs.push_back(d);
    }
    docs[4].kept = false;  // skipped documents stay out of the corpus

    fs::path dir = temp_dir("corpus");
    ingest::CorpusStats stats =
        ingest::build_corpus(docs, 0.8, dir / "train.txt", dir / "test.txt");
    CHECK(stats.documents_kept == 9);
    CHECK(stats.documents_skipped == 1);
    CHECK(stats.train_bytes + stats.test_bytes == stats.total_bytes);

    std::vector<std::string> train = ingest::load_corpus_documents(dir / "train.txt");
    std::vector<std::string> test = ingest::load_corpus_documents(dir / "test.txt");
    REQUIRE(train.size() + test.size() == 9);
    std::size_t k = 0;
    for (const auto& d : docs) {
        if (!d.kept) continue;
        const std::string& loaded =
            k < train.size() ? train[k] : test[k - train.size()];
        CHECK(loaded == d.text);
        ++k;
    }

    // both sides get at least one document even at extreme fractions
    ingest::CorpusStats lop =
        ingest::build_corpus(docs, 0.999, dir / "t2.txt", dir / "e2.txt");
    CHECK(lop.train_bytes > 0);
    CHECK(lop.test_bytes > 0);

    std::vector<ingest::DocumentText> one(docs.begin(), docs.begin() + 1);
    CHECK_THROWS(ingest::build_corpus(one, 0.9, dir / "t3.txt", dir / "e3.txt"));
}

TEST_CASE("split_corpus mirrors build_corpus over an existing file") {
    fs::path dir = temp_dir("split");
    std::string corpus = "First document text.\n\nSecond one.\n\nThird body.\n\n";
    util::atomic_write_file(dir / "all.txt", corpus);

    ingest::CorpusStats stats =
        ingest::split_corpus(dir / "all.txt", 0.7, dir / "train.txt", dir / "test.txt");
    CHECK(stats.documents_kept == 3);
    std::vector<std::string> train = ingest::load_corpus_documents(dir / "train.txt");
    std::vector<std::string> test = ingest::load_corpus_documents(dir / "test.txt");
    REQUIRE(train.size() == 2);
    REQUIRE(test.size() == 1);
    CHECK(train[0] == "First document text.");
    CHECK(train[1] == "Second one.");
    CHECK(test[0] == "Third body.");
}

TEST_CASE("extract_directory walks fixtures in name order") {
    fs::path dir = temp_dir("extract");
    fs::copy_file(kDataDir / "tei_alpha.xml", dir / "a_alpha.xml");
    fs::copy_file(kDataDir / "tei_beta.xml", dir / "b_beta.tei");
    fs::copy_file(kDataDir / "tei_gamma.xml", dir / "c_gamma.xml");
    util::atomic_write_file(dir / "ignored.txt", "not xml");

    std::vector<std::string> diagnostics;
    ingest::CorpusStats stats =
        ingest::extract_directory(dir, dir / "corpus.txt", &diagnostics);
    CHECK(stats.documents_kept == 2);
    CHECK(stats.documents_skipped == 1);

    std::vector<std::string> docs = ingest::load_corpus_documents(dir / "corpus.txt");
    REQUIRE(docs.size() == 2);
    CHECK(docs[0].find("alpha instrument") != std::string::npos);
    CHECK(docs[1].find("Resolution improved") != std::string::npos);
}

TEST_CASE("extract_directory reports malformed files and continues") {
    fs::path dir = temp_dir("extract_bad");
    fs::copy_file(kDataDir / "tei_alpha.xml", dir / "good.xml");
    fs::copy_file(kDataDir / "broken.xml", dir / "bad.xml");

    std::vector<std::string> diagnostics;
    ingest::CorpusStats stats =
        ingest::extract_directory(dir, dir / "corpus.txt", &diagnostics);
    CHECK(stats.documents_kept == 1);
    REQUIRE(diagnostics.size() == 1);
    CHECK(diagnostics[0].find("bad") != std::string::npos);
}
