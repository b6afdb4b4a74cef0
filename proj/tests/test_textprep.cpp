// tokenization, vocabulary, block cutting, collation
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "lmlab/rng.hpp"
#include "lmlab/textprep.hpp"

using namespace lmlab;
namespace fs = std::filesystem;

TEST_CASE("word tokens lowercase and detach edge punctuation") {
    CHECK(text::word_tokens("The cat is on the mat.") ==
          std::vector<std::string>{"the", "cat", "is", "on", "the", "mat", "."});
    CHECK(text::word_tokens("Hello, world! (test)") ==
          std::vector<std::string>{"hello", ",", "world", "!", "(", "test", ")"});
    CHECK(text::word_tokens("a  b\t c") == std::vector<std::string>{"a", "b", "c"});
    CHECK(text::word_tokens("") == std::vector<std::string>{});
    CHECK(text::word_tokens("   \n\t ") == std::vector<std::string>{});
    // inner punctuation stays attached
    CHECK(text::word_tokens("mass-to-charge") == std::vector<std::string>{"mass-to-charge"});
    CHECK(text::word_tokens("m/z") == std::vector<std::string>{"m/z"});
}

TEST_CASE("vocabulary ranks by frequency with lexicographic ties") {
    text::Vocabulary vocab = text::build_vocabulary("b a a c a b", 16);
    CHECK(vocab.size() == 6);
    CHECK(vocab.id_of("a") == 3);
    CHECK(vocab.id_of("b") == 4);
    CHECK(vocab.id_of("c") == 5);
    CHECK(vocab.token_of(0) == text::Vocabulary::kPad);
    CHECK(vocab.token_of(1) == text::Vocabulary::kUnk);
    CHECK(vocab.token_of(2) == text::Vocabulary::kEos);

    text::Vocabulary ties = text::build_vocabulary("c c b b a a", 16);
    CHECK(ties.id_of("a") == 3);
    CHECK(ties.id_of("b") == 4);
    CHECK(ties.id_of("c") == 5);
}

TEST_CASE("vocabulary cap counts the specials") {
    text::Vocabulary vocab = text::build_vocabulary("a a b b b c", 4);
    CHECK(vocab.size() == 4);
    CHECK(vocab.contains("b"));
    CHECK_FALSE(vocab.contains("a"));
    CHECK_FALSE(vocab.contains("c"));
    CHECK(vocab.id_of("a") == vocab.unk_id());
    CHECK_THROWS(text::build_vocabulary("", 16));
    CHECK_THROWS(text::build_vocabulary("   ", 16));
}

TEST_CASE("vocabulary requires the reserved prefix") {
    CHECK_THROWS_AS(text::Vocabulary({"a", "b", "c"}), std::invalid_argument);
    CHECK_THROWS_AS(text::Vocabulary({"<pad>", "<unk>"}), std::invalid_argument);
}

TEST_CASE("tokenize maps oov to unk and detokenize round-trips") {
    text::Vocabulary vocab = text::build_vocabulary("the cat sat on the mat .", 32);
    text::TokenSequence ids = text::tokenize("The cat xyzzy.", vocab);
    REQUIRE(ids.size() == 4);
    CHECK(ids[0] == vocab.id_of("the"));
    CHECK(ids[1] == vocab.id_of("cat"));
    CHECK(ids[2] == vocab.unk_id());
    CHECK(ids[3] == vocab.id_of("."));
    CHECK(text::detokenize(ids, vocab) == "the cat <unk>.");

    // whitespace-normalized round trip on in-vocabulary text
    std::string original = "the cat sat on the mat.";
    CHECK(text::detokenize(text::tokenize(original, vocab), vocab) == original);
}

TEST_CASE("detokenize respects bracket sides") {
    text::Vocabulary vocab = text::build_vocabulary("( a ) , b", 16);
    text::TokenSequence ids = text::tokenize("(a), b", vocab);
    CHECK(text::detokenize(ids, vocab) == "(a), b");
}

TEST_CASE("chunk_blocks cuts fixed windows and drops the remainder") {
    std::vector<text::TokenId> tokens(10);
    std::iota(tokens.begin(), tokens.end(), 0);

    text::BlockSet set = text::chunk_blocks(tokens, 4);
    REQUIRE(set.blocks.size() == 2);
    CHECK(set.dropped_tokens == 2);
    CHECK(set.blocks[0] == text::TokenSequence{0, 1, 2, 3});
    CHECK(set.blocks[1] == text::TokenSequence{4, 5, 6, 7});

    CHECK(text::chunk_blocks(tokens, 5).dropped_tokens == 0);
    text::BlockSet tiny = text::chunk_blocks(std::vector<text::TokenId>{1, 2, 3}, 4);
    CHECK(tiny.blocks.empty());
    CHECK(tiny.dropped_tokens == 3);
    CHECK_THROWS_AS(text::chunk_blocks(tokens, 1), std::invalid_argument);
}

TEST_CASE("chunk_blocks conserves tokens for random lengths") {
    Rng rng(2024);
    for (int trial = 0; trial < 200; ++trial) {
        std::size_t length = rng.below(500);
        std::size_t block_size = 2 + rng.below(60);
        std::vector<text::TokenId> tokens(length, 1);
        text::BlockSet set = text::chunk_blocks(tokens, block_size);
        CHECK(set.blocks.size() * block_size + set.dropped_tokens == length);
        for (const auto& block : set.blocks) CHECK(block.size() == block_size);
    }
}

TEST_CASE("collate right-pads to the batch maximum") {
    text::Batch batch = text::collate({{5, 6, 7}, {8, 9, 10, 11, 12}}, 0);
    CHECK(batch.rows == 2);
    CHECK(batch.cols == 5);
    CHECK(batch.id_at(0, 2) == 7);
    CHECK(batch.id_at(0, 3) == 0);
    CHECK(batch.id_at(1, 4) == 12);
    CHECK_FALSE(batch.masked_at(0, 2));
    CHECK(batch.masked_at(0, 3));  // padding
    CHECK_FALSE(batch.masked_at(1, 4));

    text::Batch equal = text::collate({{1, 2}, {3, 4}}, 0);
    CHECK(equal.cols == 2);
    for (std::int64_t r = 0; r < 2; ++r)
        for (std::int64_t c = 0; c < 2; ++c) CHECK_FALSE(equal.masked_at(r, c));

    text::Batch ragged = text::collate({{1}, {1, 2}, {1, 2, 3}}, 0);
    int pads = 0;
    for (std::int64_t r = 0; r < ragged.rows; ++r)
        for (std::int64_t c = 0; c < ragged.cols; ++c) pads += ragged.masked_at(r, c) ? 1 : 0;
    CHECK(pads == 3);

    CHECK_THROWS_AS(text::collate({}, 0), std::invalid_argument);
}

TEST_CASE("vocabulary file round-trips ids") {
    fs::path file = fs::temp_directory_path() / "lmlab_vocab_test.txt";
    text::Vocabulary vocab = text::build_vocabulary("alpha beta beta gamma .", 32);
    text::save_vocabulary(vocab, file);
    text::Vocabulary loaded = text::load_vocabulary(file);
    REQUIRE(loaded.size() == vocab.size());
    for (text::TokenId id = 0; id < vocab.size(); ++id)
        CHECK(loaded.token_of(id) == vocab.token_of(id));
}
