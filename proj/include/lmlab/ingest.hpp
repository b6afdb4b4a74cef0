#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace lmlab::ingest {

struct PaperRecord {
    std::string paper_id;
    std::optional<std::string> pdf_url;  // absent = skippable, not an error
};

struct ManifestParse {
    std::vector<PaperRecord> records;
    std::vector<std::string> diagnostics;  // one per malformed line
};

// One JSON object per line with paperId and openAccessPdf.url. Malformed
// lines become diagnostics; parsing continues.
ManifestParse parse_manifest(std::string_view jsonl);
ManifestParse parse_manifest_file(const std::filesystem::path& path);

struct DownloadResult {
    bool ok = false;
    bool resumed = false;
    std::uint64_t bytes_written = 0;
    int status = 0;
    std::string error;
};

// GET the record's URL into dest. With resume and an existing partial file,
// sends Range: bytes={size}- and appends on 206; a 200 reply rewrites the
// file from scratch.
DownloadResult fetch_document(const PaperRecord& record, const std::filesystem::path& dest,
                              bool resume);

struct FetchSummary {
    std::size_t completed = 0;  // downloaded this run
    std::size_t skipped = 0;    // no URL, or before the resume checkpoint
    std::size_t failed = 0;
    std::vector<std::string> diagnostics;
};

// Downloads every record into out_dir (<paper_id>.pdf, id sanitized to
// filesystem-safe characters). Progress is checkpointed in out_dir/resume.txt
// as the index of the last record with no unfinished predecessor, so a
// rerun with resume=true picks up after it and failed records are retried.
FetchSummary fetch_all(const std::vector<PaperRecord>& records,
                       const std::filesystem::path& out_dir, bool resume, int workers = 1);

std::string sanitize_id(std::string_view paper_id);

struct DocumentText {
    std::string source_id;
    std::string text;
    bool kept = false;
};

// Joins the character content of every paragraph element under the TEI body
// with single spaces, in document order. Paragraphs inside back matter,
// bibliography lists, and notes are excluded; paragraph-internal whitespace
// runs collapse to one space so documents never contain blank lines.
// Malformed XML throws with source_id in the message.
DocumentText extract_tei_text(std::string_view tei_xml, const std::string& source_id);

// True iff text is valid UTF-8; strips C0 control characters other than
// newline and tab in place.
bool encoding_filter(std::string& text);

struct CorpusStats {
    std::size_t documents_kept = 0;
    std::size_t documents_skipped = 0;
    std::uint64_t total_bytes = 0;
    std::uint64_t train_bytes = 0;
    std::uint64_t test_bytes = 0;
};

// Writes kept documents in order, each followed by one blank line, splitting
// whole documents at the train_fraction boundary (clamped so both files get
// at least one document). Fewer than 2 kept documents is an error.
CorpusStats build_corpus(const std::vector<DocumentText>& documents, double train_fraction,
                         const std::filesystem::path& out_train,
                         const std::filesystem::path& out_test);

// Extracts every .xml/.tei file under in_dir (sorted by name) and writes the
// kept texts to out_corpus, one blank line between documents.
CorpusStats extract_directory(const std::filesystem::path& in_dir,
                              const std::filesystem::path& out_corpus,
                              std::vector<std::string>* diagnostics = nullptr);

// Inverse of the corpus format: document texts in order.
std::vector<std::string> load_corpus_documents(const std::filesystem::path& corpus);

CorpusStats split_corpus(const std::filesystem::path& corpus, double train_fraction,
                         const std::filesystem::path& out_train,
                         const std::filesystem::path& out_test);

}  // namespace lmlab::ingest
