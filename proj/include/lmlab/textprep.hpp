#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace lmlab::text {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

// Word-level vocabulary. Ids 0..2 are reserved for <pad>, <unk>, <eos>;
// the remaining slots hold corpus tokens ordered by frequency (ties broken
// lexicographically). Immutable after construction.
class Vocabulary {
  public:
    static constexpr const char* kPad = "<pad>";
    static constexpr const char* kUnk = "<unk>";
    static constexpr const char* kEos = "<eos>";

    explicit Vocabulary(std::vector<std::string> tokens);

    TokenId pad_id() const { return 0; }
    TokenId unk_id() const { return 1; }
    TokenId eos_id() const { return 2; }

    std::int32_t size() const { return static_cast<std::int32_t>(id_to_token_.size()); }

    // unk_id for out-of-vocabulary tokens
    TokenId id_of(std::string_view token) const;
    const std::string& token_of(TokenId id) const;
    bool contains(std::string_view token) const;

  private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, TokenId> token_to_id_;
};

// Tokenization rule shared by training and the word-based metrics:
// lowercase (ASCII), split on Unicode whitespace, then detach leading and
// trailing ASCII punctuation as single-character tokens.
std::vector<std::string> word_tokens(std::string_view text);

// Frequency-ranked vocabulary over word_tokens(corpus); max_size includes
// the three specials. Throws on an empty corpus.
Vocabulary build_vocabulary(std::string_view corpus, std::size_t max_size);

TokenSequence tokenize(std::string_view text, const Vocabulary& vocab);

// Inverse of tokenize up to whitespace normalization, lowercasing and unk
// substitution. Punctuation tokens reattach without a separating space.
std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab);

struct BlockSet {
    std::vector<TokenSequence> blocks;  // each exactly block_size long
    std::size_t dropped_tokens = 0;     // trailing remainder
};

// Consecutive non-overlapping windows of exactly block_size tokens.
BlockSet chunk_blocks(std::span<const TokenId> tokens, std::size_t block_size);

struct Batch {
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    std::vector<TokenId> ids;        // rows x cols, row-major
    std::vector<std::uint8_t> mask;  // 1 = real token, 0 = padding

    TokenId id_at(std::int64_t r, std::int64_t c) const { return ids[static_cast<std::size_t>(r * cols + c)]; }
    bool masked_at(std::int64_t r, std::int64_t c) const { return mask[static_cast<std::size_t>(r * cols + c)] == 0; }
};

// Right-pads every sequence to the batch max length.
Batch collate(const std::vector<TokenSequence>& sequences, TokenId pad_id);

// Vocabulary file: one token per line, line number = id.
void save_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path);
Vocabulary load_vocabulary(const std::filesystem::path& path);

}  // namespace lmlab::text
