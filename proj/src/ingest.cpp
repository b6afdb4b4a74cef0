#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include "lmlab/ingest.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <fstream>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <nlohmann/json.hpp>

#include "lmlab/util.hpp"
#include "lmlab/xml.hpp"

namespace lmlab::ingest {

namespace {

constexpr const char* kCheckpointName = "resume.txt";

}  // namespace

ManifestParse parse_manifest(std::string_view jsonl) {
    ManifestParse out;
    size_t line_no = 0;
    size_t start = 0;
    while (start <= jsonl.size()) {
        size_t end = jsonl.find('\n', start);
        if (end == std::string_view::npos) end = jsonl.size();
        std::string_view line = jsonl.substr(start, end - start);
        start = end + 1;
        ++line_no;
        if (line.empty() || line.find_first_not_of(" \t\r") == std::string_view::npos) {
            if (start > jsonl.size()) break;
            continue;
        }

        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            out.diagnostics.push_back("line " + std::to_string(line_no) +
                                      ": invalid JSON: " + e.what());
            continue;
        }
        if (!obj.is_object() || !obj.contains("paperId") || !obj["paperId"].is_string() ||
            obj["paperId"].get<std::string>().empty()) {
            out.diagnostics.push_back("line " + std::to_string(line_no) +
                                      ": missing or empty paperId");
            continue;
        }
        PaperRecord record;
        record.paper_id = obj["paperId"].get<std::string>();
        if (obj.contains("openAccessPdf") && obj["openAccessPdf"].is_object()) {
            const auto& pdf = obj["openAccessPdf"];
            if (pdf.contains("url") && pdf["url"].is_string() &&
                !pdf["url"].get<std::string>().empty())
                record.pdf_url = pdf["url"].get<std::string>();
        }
        out.records.push_back(std::move(record));
    }
    return out;
}

ManifestParse parse_manifest_file(const std::filesystem::path& path) {
    return parse_manifest(util::read_text_file(path));
}

std::string sanitize_id(std::string_view paper_id) {
    std::string out;
    for (char c : paper_id) {
        bool safe = std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_' ||
                    c == '-';
        out += safe ? c : '_';
    }
    if (out.empty()) out = "_";
    return out;
}

namespace {

struct UrlParts {
    std::string base;  // scheme://host[:port]
    std::string path;  // path + query, at least "/"
};

bool split_url(const std::string& url, UrlParts* parts) {
    size_t scheme_end = url.find("://");
    if (scheme_end == std::string::npos) return false;
    size_t path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) {
        parts->base = url;
        parts->path = "/";
    } else {
        parts->base = url.substr(0, path_start);
        parts->path = url.substr(path_start);
    }
    return true;
}

void append_file(const std::filesystem::path& path, const std::string& bytes, bool truncate) {
    std::ofstream out(path, std::ios::binary | (truncate ? std::ios::trunc : std::ios::app));
    if (!out) throw std::runtime_error("cannot open " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + path.string());
}

}  // namespace

DownloadResult fetch_document(const PaperRecord& record, const std::filesystem::path& dest,
                              bool resume) {
    DownloadResult result;
    if (!record.pdf_url) {
        result.error = "no URL";
        return result;
    }
    UrlParts url;
    if (!split_url(*record.pdf_url, &url)) {
        result.error = "unsupported URL: " + *record.pdf_url;
        return result;
    }

    std::uint64_t offset = 0;
    std::error_code ec;
    if (resume && std::filesystem::exists(dest, ec)) offset = std::filesystem::file_size(dest, ec);

    try {
        httplib::Client client(url.base);
        client.set_follow_location(true);
        client.set_connection_timeout(10, 0);
        client.set_read_timeout(60, 0);

        httplib::Headers headers;
        if (offset > 0) headers.emplace("Range", "bytes=" + std::to_string(offset) + "-");

        httplib::Result res = client.Get(url.path, headers);
        if (!res) {
            result.error = "transport: " + httplib::to_string(res.error());
            return result;
        }
        result.status = res->status;
        if (offset > 0 && res->status == 206) {
            append_file(dest, res->body, false);
            result.resumed = true;
        } else if (res->status == 200) {
            // full body (server ignored the range request, or fresh fetch)
            append_file(dest, res->body, true);
        } else {
            result.error = "HTTP " + std::to_string(res->status);
            return result;
        }
        result.bytes_written = res->body.size();
        result.ok = true;
    } catch (const std::exception& e) {
        result.error = e.what();
    }
    return result;
}

FetchSummary fetch_all(const std::vector<PaperRecord>& records,
                       const std::filesystem::path& out_dir, bool resume, int workers) {
    std::filesystem::create_directories(out_dir);
    const std::filesystem::path checkpoint = out_dir / kCheckpointName;

    FetchSummary summary;
    size_t n = records.size();
    std::vector<char> done(n, 0);
    long long start_after = -1;
    if (resume && std::filesystem::exists(checkpoint)) {
        try {
            start_after = std::stoll(util::read_text_file(checkpoint));
        } catch (const std::exception&) {
            start_after = -1;  // unreadable checkpoint: refetch everything
        }
    }
    for (long long i = 0; i <= start_after && i < static_cast<long long>(n); ++i) {
        done[static_cast<size_t>(i)] = 1;
        ++summary.skipped;
    }

    std::mutex state_mutex;
    long long frontier = start_after;
    auto mark_done = [&](size_t index) {
        // called under state_mutex; checkpoint tracks the longest finished prefix
        done[index] = 1;
        bool moved = false;
        while (frontier + 1 < static_cast<long long>(n) && done[frontier + 1]) {
            ++frontier;
            moved = true;
        }
        if (moved) util::atomic_write_file(checkpoint, std::to_string(frontier));
    };

    std::atomic<size_t> next{static_cast<size_t>(start_after + 1)};
    auto worker = [&] {
        for (size_t i; (i = next.fetch_add(1)) < n;) {
            const PaperRecord& record = records[i];
            if (!record.pdf_url) {
                std::lock_guard lock(state_mutex);
                ++summary.skipped;
                mark_done(i);
                continue;
            }
            auto dest = out_dir / (sanitize_id(record.paper_id) + ".pdf");
            DownloadResult r = fetch_document(record, dest, resume);
            std::lock_guard lock(state_mutex);
            if (r.ok) {
                ++summary.completed;
                mark_done(i);
            } else {
                ++summary.failed;
                summary.diagnostics.push_back("record " + std::to_string(i) + " (" +
                                              record.paper_id + "): " + r.error);
            }
        }
    };

    int pool_size = std::max(1, workers);
    if (pool_size == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < pool_size; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    return summary;
}

namespace {

bool excluded_container(const xml::Node& node) {
    auto local = node.local_name();
    return local == "back" || local == "listBibl" || local == "note";
}

void gather_text(const xml::Node& node, std::string* out) {
    for (const auto& child : node.children) {
        if (child.kind == xml::Node::Kind::Text) {
            *out += child.text;
        } else if (!excluded_container(child)) {
            gather_text(child, out);
        }
    }
}

std::string collapse_whitespace(const std::string& text) {
    std::string out;
    bool in_space = true;  // leading whitespace dropped
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            in_space = true;
        } else {
            if (in_space && !out.empty()) out += ' ';
            out += c;
            in_space = false;
        }
    }
    return out;
}

void collect_paragraphs(const xml::Node& node, std::vector<std::string>* paragraphs) {
    if (node.kind != xml::Node::Kind::Element || excluded_container(node)) return;
    if (node.local_name() == "p") {
        std::string raw;
        gather_text(node, &raw);
        std::string flat = collapse_whitespace(raw);
        if (!flat.empty()) paragraphs->push_back(std::move(flat));
        return;
    }
    for (const auto& child : node.children) collect_paragraphs(child, paragraphs);
}

const xml::Node* find_body(const xml::Node& node) {
    if (node.kind != xml::Node::Kind::Element) return nullptr;
    if (node.local_name() == "body") return &node;
    for (const auto& child : node.children)
        if (const xml::Node* found = find_body(child)) return found;
    return nullptr;
}

}  // namespace

DocumentText extract_tei_text(std::string_view tei_xml, const std::string& source_id) {
    DocumentText doc;
    doc.source_id = source_id;

    xml::Node root;
    try {
        root = xml::parse(tei_xml);
    } catch (const std::exception& e) {
        throw std::runtime_error("extract " + source_id + ": " + e.what());
    }

    const xml::Node* body = find_body(root);
    if (!body) return doc;  // kept stays false

    std::vector<std::string> paragraphs;
    collect_paragraphs(*body, &paragraphs);
    for (size_t i = 0; i < paragraphs.size(); ++i) {
        if (i) doc.text += ' ';
        doc.text += paragraphs[i];
    }
    doc.kept = !doc.text.empty();
    return doc;
}

bool encoding_filter(std::string& text) {
    if (!util::utf8_valid(text)) return false;
    std::erase_if(text, [](char c) {
        unsigned char u = static_cast<unsigned char>(c);
        return u < 0x20 && c != '\n' && c != '\t';
    });
    return true;
}

namespace {

std::uint64_t write_corpus_file(const std::vector<const DocumentText*>& docs,
                                const std::filesystem::path& path) {
    std::string out;
    for (const DocumentText* doc : docs) {
        out += doc->text;
        out += "\n\n";
    }
    util::atomic_write_file(path, out);
    return out.size();
}

}  // namespace

CorpusStats build_corpus(const std::vector<DocumentText>& documents, double train_fraction,
                         const std::filesystem::path& out_train,
                         const std::filesystem::path& out_test) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw std::invalid_argument("train fraction must be in (0, 1)");

    std::vector<const DocumentText*> kept;
    CorpusStats stats;
    for (const auto& doc : documents) {
        if (doc.kept) kept.push_back(&doc);
        else ++stats.documents_skipped;
    }
    stats.documents_kept = kept.size();
    if (kept.size() < 2)
        throw std::runtime_error("corpus too small: need at least 2 kept documents, have " +
                                 std::to_string(kept.size()));

    size_t n_train = static_cast<size_t>(static_cast<double>(kept.size()) * train_fraction);
    n_train = std::clamp<size_t>(n_train, 1, kept.size() - 1);

    std::vector<const DocumentText*> train(kept.begin(), kept.begin() + n_train);
    std::vector<const DocumentText*> test(kept.begin() + n_train, kept.end());
    stats.train_bytes = write_corpus_file(train, out_train);
    stats.test_bytes = write_corpus_file(test, out_test);
    stats.total_bytes = stats.train_bytes + stats.test_bytes;
    return stats;
}

CorpusStats extract_directory(const std::filesystem::path& in_dir,
                              const std::filesystem::path& out_corpus,
                              std::vector<std::string>* diagnostics) {
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(in_dir)) {
        if (!entry.is_regular_file()) continue;
        auto ext = entry.path().extension().string();
        if (ext == ".xml" || ext == ".tei") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());

    CorpusStats stats;
    std::vector<DocumentText> docs;
    for (const auto& file : files) {
        std::string source_id = file.filename().string();
        DocumentText doc;
        try {
            doc = extract_tei_text(util::read_text_file(file), source_id);
        } catch (const std::exception& e) {
            if (diagnostics) diagnostics->push_back(e.what());
            ++stats.documents_skipped;
            continue;
        }
        if (doc.kept && !encoding_filter(doc.text)) {
            doc.kept = false;
            if (diagnostics)
                diagnostics->push_back("skip " + source_id + ": not valid UTF-8");
        } else if (!doc.kept && diagnostics) {
            diagnostics->push_back("skip " + source_id + ": no paragraph text");
        }
        if (doc.kept) docs.push_back(std::move(doc));
        else ++stats.documents_skipped;
    }

    std::vector<const DocumentText*> kept;
    for (const auto& doc : docs) kept.push_back(&doc);
    stats.documents_kept = kept.size();
    stats.total_bytes = write_corpus_file(kept, out_corpus);
    return stats;
}

std::vector<std::string> load_corpus_documents(const std::filesystem::path& corpus) {
    std::string text = util::read_text_file(corpus);
    std::vector<std::string> docs;
    std::string current;
    bool have_line = false;
    size_t start = 0;
    while (start <= text.size()) {
        size_t end = text.find('\n', start);
        bool last = end == std::string::npos;
        std::string_view line =
            last ? std::string_view(text).substr(start)
                 : std::string_view(text).substr(start, end - start);
        if (line.empty()) {
            if (have_line) {
                docs.push_back(std::move(current));
                current.clear();
                have_line = false;
            }
        } else {
            if (have_line) current += '\n';
            current += line;
            have_line = true;
        }
        if (last) break;
        start = end + 1;
    }
    if (have_line) docs.push_back(std::move(current));
    return docs;
}

CorpusStats split_corpus(const std::filesystem::path& corpus, double train_fraction,
                         const std::filesystem::path& out_train,
                         const std::filesystem::path& out_test) {
    std::vector<DocumentText> docs;
    for (auto& text : load_corpus_documents(corpus)) {
        DocumentText doc;
        doc.source_id = corpus.string() + "#" + std::to_string(docs.size());
        doc.text = std::move(text);
        doc.kept = true;
        docs.push_back(std::move(doc));
    }
    return build_corpus(docs, train_fraction, out_train, out_test);
}

}  // namespace lmlab::ingest
