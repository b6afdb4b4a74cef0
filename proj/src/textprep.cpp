#include "lmlab/textprep.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "lmlab/util.hpp"

namespace lmlab::text {

namespace {

bool is_unicode_space(char32_t cp) {
    switch (cp) {
        case U' ': case U'\t': case U'\n': case U'\r':
        case 0x0B: case 0x0C: case 0x85: case 0xA0:
        case 0x1680: case 0x2028: case 0x2029: case 0x202F:
        case 0x205F: case 0x3000:
            return true;
        default:
            return cp >= 0x2000 && cp <= 0x200A;
    }
}

bool is_ascii_punct(char32_t cp) {
    return cp < 128 && std::ispunct(static_cast<int>(cp));
}

// Decodes one UTF-8 code point; malformed bytes are passed through as
// Latin-1 so tokenization never throws (the encoding filter upstream is
// responsible for rejecting invalid documents).
char32_t decode_utf8(std::string_view s, std::size_t& i) {
    unsigned char c = static_cast<unsigned char>(s[i]);
    std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 0;
    if (len == 0 || i + len > s.size()) {
        ++i;
        return c;
    }
    char32_t cp = len == 1 ? c : c & (0x7F >> len);
    for (std::size_t k = 1; k < len; ++k) {
        unsigned char cc = static_cast<unsigned char>(s[i + k]);
        if ((cc & 0xC0) != 0x80) {
            ++i;
            return c;
        }
        cp = (cp << 6) | (cc & 0x3F);
    }
    i += len;
    return cp;
}

void append_lowered(std::string& out, std::string_view src) {
    for (char ch : src) {
        out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
}

// Splits one whitespace-delimited chunk into tokens, detaching leading and
// trailing punctuation characters.
void emit_word(std::string_view word, std::vector<std::string>& out) {
    struct Cp { std::size_t pos, len; char32_t cp; };
    std::vector<Cp> cps;
    std::size_t i = 0;
    while (i < word.size()) {
        std::size_t start = i;
        char32_t cp = decode_utf8(word, i);
        cps.push_back({start, i - start, cp});
    }
    std::size_t lo = 0, hi = cps.size();
    while (lo < hi && is_ascii_punct(cps[lo].cp)) ++lo;
    while (hi > lo && is_ascii_punct(cps[hi - 1].cp)) --hi;
    for (std::size_t k = 0; k < lo; ++k) out.emplace_back(word.substr(cps[k].pos, cps[k].len));
    if (lo < hi) {
        std::string core;
        append_lowered(core, word.substr(cps[lo].pos, cps[hi - 1].pos + cps[hi - 1].len - cps[lo].pos));
        out.push_back(std::move(core));
    }
    for (std::size_t k = hi; k < cps.size(); ++k) out.emplace_back(word.substr(cps[k].pos, cps[k].len));
}

bool attaches_left(const std::string& tok) {
    return tok.size() == 1 && is_ascii_punct(static_cast<unsigned char>(tok[0])) &&
           tok[0] != '(' && tok[0] != '[' && tok[0] != '{';
}

bool is_open_bracket(const std::string& tok) {
    return tok == "(" || tok == "[" || tok == "{";
}

}  // namespace

Vocabulary::Vocabulary(std::vector<std::string> tokens) : id_to_token_(std::move(tokens)) {
    if (id_to_token_.size() < 3 || id_to_token_[0] != kPad || id_to_token_[1] != kUnk ||
        id_to_token_[2] != kEos) {
        throw std::invalid_argument("vocabulary must start with <pad>, <unk>, <eos>");
    }
    for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
        auto [it, inserted] = token_to_id_.emplace(id_to_token_[i], static_cast<TokenId>(i));
        if (!inserted) throw std::invalid_argument("duplicate vocabulary token: " + id_to_token_[i]);
    }
}

TokenId Vocabulary::id_of(std::string_view token) const {
    auto it = token_to_id_.find(std::string(token));
    return it == token_to_id_.end() ? unk_id() : it->second;
}

const std::string& Vocabulary::token_of(TokenId id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("token id out of range");
    return id_to_token_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(std::string_view token) const {
    return token_to_id_.count(std::string(token)) != 0;
}

std::vector<std::string> word_tokens(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    std::size_t word_start = 0;
    bool in_word = false;
    while (i < text.size()) {
        std::size_t start = i;
        char32_t cp = decode_utf8(text, i);
        if (is_unicode_space(cp)) {
            if (in_word) {
                emit_word(text.substr(word_start, start - word_start), out);
                in_word = false;
            }
        } else if (!in_word) {
            word_start = start;
            in_word = true;
        }
    }
    if (in_word) emit_word(text.substr(word_start), out);
    return out;
}

Vocabulary build_vocabulary(std::string_view corpus, std::size_t max_size) {
    if (max_size < 3) throw std::invalid_argument("vocabulary max_size must be at least 3");
    std::vector<std::string> words = word_tokens(corpus);
    if (words.empty()) throw std::invalid_argument("cannot build a vocabulary from an empty corpus");

    std::map<std::string, std::int64_t> counts;
    for (auto& w : words) ++counts[w];

    std::vector<std::pair<std::string, std::int64_t>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    std::vector<std::string> tokens = {Vocabulary::kPad, Vocabulary::kUnk, Vocabulary::kEos};
    for (auto& [tok, n] : ranked) {
        if (tokens.size() >= max_size) break;
        tokens.push_back(tok);
    }
    return Vocabulary(std::move(tokens));
}

TokenSequence tokenize(std::string_view text, const Vocabulary& vocab) {
    TokenSequence ids;
    for (const std::string& w : word_tokens(text)) ids.push_back(vocab.id_of(w));
    return ids;
}

std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab) {
    std::string out;
    bool suppress_space = true;  // no leading space
    for (TokenId id : ids) {
        const std::string& tok = vocab.token_of(id);
        if (!out.empty() && !suppress_space && !attaches_left(tok)) out.push_back(' ');
        out += tok;
        suppress_space = is_open_bracket(tok);
    }
    return out;
}

BlockSet chunk_blocks(std::span<const TokenId> tokens, std::size_t block_size) {
    if (block_size < 2) throw std::invalid_argument("block_size must be at least 2");
    BlockSet result;
    std::size_t full = tokens.size() / block_size;
    result.blocks.reserve(full);
    for (std::size_t b = 0; b < full; ++b) {
        result.blocks.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(b * block_size),
                                   tokens.begin() + static_cast<std::ptrdiff_t>((b + 1) * block_size));
    }
    result.dropped_tokens = tokens.size() - full * block_size;
    return result;
}

Batch collate(const std::vector<TokenSequence>& sequences, TokenId pad_id) {
    if (sequences.empty()) throw std::invalid_argument("cannot collate an empty batch");
    std::size_t max_len = 0;
    for (const auto& s : sequences) max_len = std::max(max_len, s.size());

    Batch batch;
    batch.rows = static_cast<std::int64_t>(sequences.size());
    batch.cols = static_cast<std::int64_t>(max_len);
    batch.ids.assign(sequences.size() * max_len, pad_id);
    batch.mask.assign(sequences.size() * max_len, 0);
    for (std::size_t r = 0; r < sequences.size(); ++r) {
        for (std::size_t c = 0; c < sequences[r].size(); ++c) {
            batch.ids[r * max_len + c] = sequences[r][c];
            batch.mask[r * max_len + c] = 1;
        }
    }
    return batch;
}

void save_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path) {
    std::ostringstream out;
    for (TokenId id = 0; id < vocab.size(); ++id) out << vocab.token_of(id) << '\n';
    util::atomic_write_file(path, out.str());
}

Vocabulary load_vocabulary(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open vocabulary file: " + path.string());
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) tokens.push_back(line);
    return Vocabulary(std::move(tokens));
}

}  // namespace lmlab::text
