// lmlab: one entry point for the corpus -> tokenizer -> gridsearch -> train
// -> generate -> eval -> compare -> repro workflow.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lmlab/config.hpp"
#include "lmlab/csv.hpp"
#include "lmlab/generate.hpp"
#include "lmlab/ingest.hpp"
#include "lmlab/manifest.hpp"
#include "lmlab/metrics.hpp"
#include "lmlab/model.hpp"
#include "lmlab/optim.hpp"
#include "lmlab/stats.hpp"
#include "lmlab/textprep.hpp"
#include "lmlab/train.hpp"
#include "lmlab/util.hpp"

namespace fs = std::filesystem;
using namespace lmlab;

namespace {

struct GlobalFlags {
    std::uint64_t seed = 0;
    int threads = 1;
    double power_watts = train::kDefaultPowerWatts;
    int precision = 32;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* threads_opt = nullptr;
    CLI::Option* power_opt = nullptr;
};

void write_run_manifest(const fs::path& out_dir, const std::string& command,
                        std::uint64_t seed, const fs::path& corpus,
                        nlohmann::ordered_json config) {
    manifest::RunManifest m;
    m.command = command;
    m.seed = seed;
    if (!corpus.empty()) m.corpus_hash = manifest::hex_hash(util::hash_file(corpus));
    m.config = std::move(config);
    manifest::write(out_dir.empty() ? fs::path(".") : out_dir, m);
}

fs::path beside(const fs::path& file) {
    fs::path dir = file.parent_path();
    return dir.empty() ? fs::path(".") : dir;
}

// corpus documents -> token stream with one eos after each document ->
// fixed-size blocks
std::vector<text::TokenSequence> corpus_blocks(const fs::path& corpus,
                                               const text::Vocabulary& vocab,
                                               std::int64_t block_size) {
    text::TokenSequence stream;
    for (const std::string& doc : ingest::load_corpus_documents(corpus)) {
        text::TokenSequence ids = text::tokenize(doc, vocab);
        stream.insert(stream.end(), ids.begin(), ids.end());
        stream.push_back(vocab.eos_id());
    }
    text::BlockSet set = text::chunk_blocks(stream, static_cast<std::size_t>(block_size));
    if (set.blocks.empty())
        throw std::runtime_error("corpus " + corpus.string() + " yields no blocks of size " +
                                 std::to_string(block_size));
    return std::move(set.blocks);
}

// keeps the leading fraction; grid search trains on a deterministic sample
std::vector<text::TokenSequence> sample_blocks(std::vector<text::TokenSequence> blocks,
                                               double fraction) {
    if (fraction <= 0.0 || fraction > 1.0)
        throw std::runtime_error("sample fraction must be in (0, 1]");
    std::size_t keep = static_cast<std::size_t>(fraction * static_cast<double>(blocks.size()));
    blocks.resize(std::max<std::size_t>(1, keep));
    return blocks;
}

// ---------------------------------------------------------------- ingest --

struct IngestFetchOptions {
    fs::path manifest_path;
    fs::path out_dir;
    bool resume = false;
    int workers = 1;
};

int run_ingest_fetch(const IngestFetchOptions& o, const GlobalFlags& g) {
    ingest::ManifestParse parsed = ingest::parse_manifest_file(o.manifest_path);
    for (const std::string& d : parsed.diagnostics) std::cerr << "manifest: " << d << '\n';

    ingest::FetchSummary summary =
        ingest::fetch_all(parsed.records, o.out_dir, o.resume, o.workers);
    for (const std::string& d : summary.diagnostics) std::cerr << d << '\n';
    std::cout << "fetched " << summary.completed << ", skipped " << summary.skipped
              << ", failed " << summary.failed << '\n';

    write_run_manifest(o.out_dir, "ingest fetch", g.seed, o.manifest_path,
                       {{"manifest", o.manifest_path.string()},
                        {"out_dir", o.out_dir.string()},
                        {"resume", o.resume},
                        {"workers", o.workers}});
    return summary.failed == 0 ? 0 : 2;
}

struct IngestExtractOptions {
    fs::path in_dir;
    fs::path out_corpus;
};

int run_ingest_extract(const IngestExtractOptions& o, const GlobalFlags& g) {
    std::vector<std::string> diagnostics;
    ingest::CorpusStats stats = ingest::extract_directory(o.in_dir, o.out_corpus, &diagnostics);
    for (const std::string& d : diagnostics) std::cerr << d << '\n';
    std::cout << "kept " << stats.documents_kept << " documents, skipped "
              << stats.documents_skipped << ", " << stats.total_bytes << " bytes\n";

    write_run_manifest(beside(o.out_corpus), "ingest extract", g.seed, o.out_corpus,
                       {{"in_dir", o.in_dir.string()}, {"out", o.out_corpus.string()}});
    return 0;
}

struct IngestSplitOptions {
    fs::path corpus;
    double train_fraction = 0.9;
    fs::path out_train;
    fs::path out_test;
};

int run_ingest_split(const IngestSplitOptions& o, const GlobalFlags& g) {
    ingest::CorpusStats stats =
        ingest::split_corpus(o.corpus, o.train_fraction, o.out_train, o.out_test);
    std::cout << "train " << stats.train_bytes << " bytes, test " << stats.test_bytes
              << " bytes over " << stats.documents_kept << " documents\n";

    write_run_manifest(beside(o.out_train), "ingest split", g.seed, o.corpus,
                       {{"corpus", o.corpus.string()},
                        {"train_frac", o.train_fraction},
                        {"out_train", o.out_train.string()},
                        {"out_test", o.out_test.string()}});
    return 0;
}

// ------------------------------------------------------------- tokenizer --

struct TokenizerOptions {
    fs::path corpus;
    std::int64_t max_size = 4096;
    fs::path out;
};

int run_tokenizer_build(const TokenizerOptions& o, const GlobalFlags& g) {
    text::Vocabulary vocab = text::build_vocabulary(util::read_text_file(o.corpus),
                                                    static_cast<std::size_t>(o.max_size));
    text::save_vocabulary(vocab, o.out);
    std::cout << "vocabulary of " << vocab.size() << " tokens written to " << o.out.string()
              << '\n';

    write_run_manifest(beside(o.out), "tokenizer build", g.seed, o.corpus,
                       {{"corpus", o.corpus.string()},
                        {"max_size", o.max_size},
                        {"out", o.out.string()}});
    return 0;
}

// ----------------------------------------------------------- run configs --

// paths in config files resolve relative to the file's directory
fs::path resolve(const fs::path& base_dir, const std::string& p) {
    fs::path q = p;
    return q.is_absolute() ? q : base_dir / q;
}

opt::OptimizerSpec optimizer_from(const config::Table& root) {
    const config::Table& o = root.section("optimizer");
    opt::OptimizerSpec spec;
    spec.kind = opt::kind_from_string(o.get_string("kind", "sgd"));
    spec.eta = o.get_double("lr", spec.eta);
    spec.beta = o.get_double("beta", spec.beta);
    spec.beta1 = o.get_double("beta1", spec.beta1);
    spec.beta2 = o.get_double("beta2", spec.beta2);
    spec.epsilon = o.get_double("epsilon", spec.epsilon);
    spec.weight_decay = o.get_double("weight_decay", spec.weight_decay);
    spec.adam_bias_correction = o.get_boolean("bias_correction", spec.adam_bias_correction);
    return spec;
}

train::ModelSetup setup_from(const config::Table& root, std::uint64_t seed) {
    train::ModelSetup setup;
    const config::Table& m = root.section("model");
    setup.model.d_model = m.get_integer("d_model", setup.model.d_model);
    setup.model.n_heads = m.get_integer("n_heads", setup.model.n_heads);
    setup.model.n_layers = m.get_integer("n_layers", setup.model.n_layers);
    setup.model.d_ff = m.get_integer("d_ff", setup.model.d_ff);
    setup.model.max_seq_len = m.get_integer("max_seq_len", setup.model.max_seq_len);
    setup.model.seed = seed;

    const config::Table& l = root.section("lora");
    setup.lora_r = l.get_integer("r", setup.lora_r);
    setup.lora_dropout = l.get_double("dropout", setup.lora_dropout);
    setup.lora_scale = l.get_double("scale", setup.lora_scale);
    setup.lora_targets = l.get_strings("targets");
    return setup;
}

train::TrainConfig train_config_from(const config::Table& root, std::uint64_t seed,
                                     const fs::path& base_dir) {
    const config::Table& t = root.section("train");
    train::TrainConfig c;
    c.max_steps = t.get_integer("max_steps", c.max_steps);
    c.batch_size = t.get_integer("batch_size", c.batch_size);
    c.grad_accum = t.get_integer("grad_accum", c.grad_accum);
    c.block_size = t.get_integer("block_size", c.block_size);
    c.eval_steps = t.get_integer("eval_steps", c.eval_steps);
    c.logging_steps = t.get_integer("logging_steps", c.logging_steps);
    c.save_steps = t.get_integer("save_steps", c.save_steps);
    c.shuffle = t.get_boolean("shuffle", c.shuffle);
    c.seed = seed;
    c.optimizer = optimizer_from(root);
    std::string out = t.get_string("output_dir", "");
    if (!out.empty()) c.output_dir = resolve(base_dir, out);
    return c;
}

struct DataPaths {
    fs::path train_corpus;
    fs::path eval_corpus;
    fs::path vocab;
};

DataPaths data_from(const config::Table& root, const fs::path& base_dir) {
    const config::Table& d = root.section("data");
    DataPaths paths;
    paths.train_corpus = resolve(base_dir, d.require("train").as_string());
    paths.eval_corpus = resolve(base_dir, d.require("eval").as_string());
    paths.vocab = resolve(base_dir, d.require("vocab").as_string());
    return paths;
}

nlohmann::ordered_json config_json(const train::TrainConfig& c,
                                   const train::ModelSetup& setup, const DataPaths& data) {
    nlohmann::ordered_json j;
    j["data"] = {{"train", data.train_corpus.string()},
                 {"eval", data.eval_corpus.string()},
                 {"vocab", data.vocab.string()}};
    j["model"] = {{"vocab_size", setup.model.vocab_size},
                  {"d_model", setup.model.d_model},
                  {"n_heads", setup.model.n_heads},
                  {"n_layers", setup.model.n_layers},
                  {"d_ff", setup.model.d_ff},
                  {"max_seq_len", setup.model.max_seq_len}};
    j["lora"] = {{"r", setup.lora_r},
                 {"dropout", setup.lora_dropout},
                 {"scale", setup.lora_scale},
                 {"targets", setup.lora_targets}};
    j["train"] = {{"max_steps", c.max_steps},
                  {"batch_size", c.batch_size},
                  {"grad_accum", c.grad_accum},
                  {"block_size", c.block_size},
                  {"eval_steps", c.eval_steps},
                  {"logging_steps", c.logging_steps},
                  {"save_steps", c.save_steps},
                  {"shuffle", c.shuffle},
                  {"output_dir", c.output_dir.string()}};
    j["optimizer"] = {{"kind", opt::to_string(c.optimizer.kind)},
                      {"lr", c.optimizer.eta},
                      {"beta", c.optimizer.beta},
                      {"beta1", c.optimizer.beta1},
                      {"beta2", c.optimizer.beta2},
                      {"epsilon", c.optimizer.epsilon},
                      {"weight_decay", c.optimizer.weight_decay},
                      {"bias_correction", c.optimizer.adam_bias_correction}};
    return j;
}

void write_training_log_csv(const train::TrainingLog& log, const fs::path& path) {
    csv::Table table;
    table.header = {"phase", "step", "loss"};
    for (const train::LogPoint& p : log.train_points)
        table.rows.push_back({"train", std::to_string(p.step), util::format_double(p.loss)});
    for (const train::LogPoint& p : log.eval_points)
        table.rows.push_back({"eval", std::to_string(p.step), util::format_double(p.loss)});
    csv::write_file(path, table);
}

// ------------------------------------------------------------------ train --

struct TrainOptions {
    fs::path config_path;
    std::string optimizer;
    double lr = 0.0;
    double weight_decay = 0.0;
    std::int64_t grad_accum = 0;
    std::int64_t max_steps = -1;
    std::string output_dir;
    CLI::Option* optimizer_opt = nullptr;
    CLI::Option* lr_opt = nullptr;
    CLI::Option* weight_decay_opt = nullptr;
    CLI::Option* grad_accum_opt = nullptr;
    CLI::Option* max_steps_opt = nullptr;
    CLI::Option* output_dir_opt = nullptr;
};

template <typename T>
int run_train_typed(const TrainOptions& o, const GlobalFlags& g) {
    config::Table root = config::parse_file(o.config_path);
    fs::path base_dir = o.config_path.parent_path();

    std::uint64_t seed = g.seed_opt->count()
                             ? g.seed
                             : static_cast<std::uint64_t>(
                                   root.section("train").get_integer("seed", 0));
    DataPaths data = data_from(root, base_dir);
    train::TrainConfig config = train_config_from(root, seed, base_dir);
    train::ModelSetup setup = setup_from(root, seed);

    // flags win over the config file
    if (o.optimizer_opt->count()) config.optimizer.kind = opt::kind_from_string(o.optimizer);
    if (o.lr_opt->count()) config.optimizer.eta = o.lr;
    if (o.weight_decay_opt->count()) config.optimizer.weight_decay = o.weight_decay;
    if (o.grad_accum_opt->count()) config.grad_accum = o.grad_accum;
    if (o.max_steps_opt->count()) config.max_steps = o.max_steps;
    if (o.output_dir_opt->count()) config.output_dir = o.output_dir;

    text::Vocabulary vocab = text::load_vocabulary(data.vocab);
    setup.model.vocab_size = vocab.size();

    std::vector<text::TokenSequence> train_blocks =
        corpus_blocks(data.train_corpus, vocab, config.block_size);
    std::vector<text::TokenSequence> eval_blocks =
        corpus_blocks(data.eval_corpus, vocab, config.block_size);
    std::cout << "training on " << train_blocks.size() << " blocks, evaluating on "
              << eval_blocks.size() << '\n';

    nn::Model<T> model = train::make_model<T>(setup);
    train::TrainingLog log = train::train(config, model, train_blocks, eval_blocks);

    for (std::size_t i = 0; i < log.train_points.size(); ++i)
        std::cout << "step " << log.train_points[i].step << "  loss "
                  << util::format_double(log.train_points[i].loss) << '\n';
    for (const train::LogPoint& p : log.eval_points)
        std::cout << "eval at step " << p.step << "  loss " << util::format_double(p.loss)
                  << '\n';

    if (!config.output_dir.empty()) {
        write_training_log_csv(log, config.output_dir / "training_log.csv");
        write_run_manifest(config.output_dir, "train", seed, data.train_corpus,
                           config_json(config, setup, data));
    }
    if (log.aborted) {
        std::cerr << "error: training aborted: " << log.abort_reason << '\n';
        return 2;
    }
    if (!log.final_checkpoint.empty())
        std::cout << "checkpoint " << log.final_checkpoint.string() << '\n';
    return 0;
}

int run_train(const TrainOptions& o, const GlobalFlags& g) {
    return g.precision == 64 ? run_train_typed<double>(o, g) : run_train_typed<float>(o, g);
}

// ------------------------------------------------------------- gridsearch --

struct GridOptions {
    fs::path config_path;
    double sample_frac = 1.0;
    CLI::Option* sample_frac_opt = nullptr;
};

template <typename T>
int run_grid_typed(const GridOptions& o, const GlobalFlags& g) {
    config::Table root = config::parse_file(o.config_path);
    fs::path base_dir = o.config_path.parent_path();

    const config::Table& grid = root.section("grid");
    std::uint64_t seed = g.seed_opt->count()
                             ? g.seed
                             : static_cast<std::uint64_t>(
                                   root.section("train").get_integer("seed", 0));

    DataPaths data = data_from(root, base_dir);
    train::GridPlan plan;
    plan.base = train_config_from(root, seed, base_dir);
    plan.setup = setup_from(root, seed);
    plan.policy.delta_val = grid.get_double("delta_val", plan.policy.delta_val);
    plan.power_watts = g.power_opt->count() ? g.power_watts
                                            : grid.get_double("power_watts", g.power_watts);
    plan.threads = g.threads_opt->count()
                       ? g.threads
                       : static_cast<int>(grid.get_integer("threads", 1));

    std::vector<std::string> names = grid.get_strings("optimizers");
    if (names.empty()) names = {"sgd", "adagrad", "rmsprop", "adam"};
    opt::OptimizerSpec shared = optimizer_from(root);
    for (const std::string& name : names) {
        opt::OptimizerSpec spec = shared;
        spec.kind = opt::kind_from_string(name);
        plan.optimizers.push_back(spec);
    }

    plan.rates = grid.get_doubles("rates");
    if (plan.rates.empty()) plan.rates = {shared.eta};
    std::vector<double> steps = grid.get_doubles("steps");  // aligned with rates
    if (!steps.empty() && steps.size() != plan.rates.size())
        throw std::runtime_error("grid: steps list must match rates list");
    for (std::size_t i = 0; i < steps.size(); ++i)
        plan.steps_per_rate[plan.rates[i]] = static_cast<std::int64_t>(steps[i]);

    double fraction = o.sample_frac_opt->count()
                          ? o.sample_frac
                          : grid.get_double("sample_frac", o.sample_frac);

    text::Vocabulary vocab = text::load_vocabulary(data.vocab);
    plan.setup.model.vocab_size = vocab.size();

    std::vector<text::TokenSequence> train_blocks = sample_blocks(
        corpus_blocks(data.train_corpus, vocab, plan.base.block_size), fraction);
    std::vector<text::TokenSequence> eval_blocks = sample_blocks(
        corpus_blocks(data.eval_corpus, vocab, plan.base.block_size), fraction);
    std::cout << "grid of " << plan.optimizers.size() << " optimizers x "
              << plan.rates.size() << " rates on " << train_blocks.size() << " blocks\n";

    train::GridResult result = train::grid_search<T>(plan, train_blocks, eval_blocks);
    std::cout << train::grid_table(result);

    if (!plan.base.output_dir.empty()) {
        train::write_grid_csv(result, plan.base.output_dir / "grid_results.csv");
        nlohmann::ordered_json j = config_json(plan.base, plan.setup, data);
        j["grid"] = {{"optimizers", names},
                     {"rates", plan.rates},
                     {"steps", steps},
                     {"sample_frac", fraction},
                     {"delta_val", plan.policy.delta_val},
                     {"power_watts", plan.power_watts},
                     {"threads", plan.threads}};
        write_run_manifest(plan.base.output_dir, "gridsearch", seed, data.train_corpus, j);
    }
    if (!result.has_chosen) {
        std::cerr << "error: every grid cell failed\n";
        return 2;
    }
    return 0;
}

int run_gridsearch(const GridOptions& o, const GlobalFlags& g) {
    return g.precision == 64 ? run_grid_typed<double>(o, g) : run_grid_typed<float>(o, g);
}

// -------------------------------------------------------------- generate --

struct GenerateOptions {
    fs::path model_path;
    fs::path vocab_path;
    std::string prompt;
    nn::GenerateOptions gen;
};

template <typename T>
int run_generate_typed(const GenerateOptions& o) {
    nn::Model<T> model = nn::load_checkpoint<T>(o.model_path);
    text::Vocabulary vocab = text::load_vocabulary(o.vocab_path);
    std::cout << nn::generate_sentence(model, vocab, o.prompt, o.gen) << '\n';
    return 0;
}

int run_generate(const GenerateOptions& o) {
    return nn::checkpoint_precision(o.model_path) == 8 ? run_generate_typed<double>(o)
                                                       : run_generate_typed<float>(o);
}

// ------------------------------------------------------------------ eval --

// type-erased handle so float and double checkpoints mix in one run
struct LoadedModel {
    std::string name;
    std::function<std::string(const std::string&)> generate;
    std::function<double(const std::string&)> perplexity;
    std::function<std::vector<double>(const std::string&)> embed;
};

template <typename T>
LoadedModel wrap_model(const fs::path& ckpt, std::shared_ptr<const text::Vocabulary> vocab,
                       const nn::GenerateOptions& gen) {
    auto model = std::make_shared<nn::Model<T>>(nn::load_checkpoint<T>(ckpt));
    LoadedModel out;
    out.name = ckpt.stem().string();
    out.generate = [model, vocab, gen](const std::string& prompt) {
        return nn::generate_sentence(*model, *vocab, prompt, gen);
    };
    out.perplexity = [model, vocab](const std::string& text) {
        return model->perplexity(text::tokenize(text, *vocab));
    };
    out.embed = [model, vocab](const std::string& text) {
        return model->embed(text::tokenize(text, *vocab));
    };
    return out;
}

LoadedModel load_model(const fs::path& ckpt, std::shared_ptr<const text::Vocabulary> vocab,
                       const nn::GenerateOptions& gen = {}) {
    return nn::checkpoint_precision(ckpt) == 8 ? wrap_model<double>(ckpt, vocab, gen)
                                               : wrap_model<float>(ckpt, vocab, gen);
}

struct EvalOptions {
    std::vector<fs::path> models;
    fs::path vocab_path;
    fs::path prompts;
    fs::path variant_prompts;  // optional second run with _synonyms outputs
    fs::path out_dir;
    nn::GenerateOptions gen;
};

void print_reports(const std::vector<metrics::ModelReport>& reports) {
    for (const metrics::ModelReport& r : reports)
        std::cout << r.model << ": BLEU " << util::format_double(r.avg_bleu) << ", ROUGE-1 "
                  << util::format_double(r.avg_rouge1) << ", ROUGE-2 "
                  << util::format_double(r.avg_rouge2) << ", ROUGE-L "
                  << util::format_double(r.avg_rougeL) << ", perplexity "
                  << util::format_double(r.avg_perplexity) << '\n';
}

int run_eval(const EvalOptions& o, const GlobalFlags& g) {
    auto vocab = std::make_shared<const text::Vocabulary>(text::load_vocabulary(o.vocab_path));

    std::vector<metrics::EvalModel> models;
    for (const fs::path& path : o.models) {
        LoadedModel loaded = load_model(path, vocab, o.gen);
        for (const metrics::EvalModel& seen : models)
            if (seen.name == loaded.name)
                throw std::runtime_error("duplicate model name '" + loaded.name +
                                         "': report files would collide");
        models.push_back({loaded.name, loaded.generate, loaded.perplexity});
    }

    std::vector<metrics::PromptPair> pairs = metrics::load_prompt_pairs(o.prompts);
    print_reports(metrics::evaluate_models(models, pairs, o.out_dir, false, g.threads));

    if (!o.variant_prompts.empty()) {
        std::vector<metrics::PromptPair> variant_pairs =
            metrics::load_prompt_pairs(o.variant_prompts);
        std::cout << "variant prompts:\n";
        print_reports(
            metrics::evaluate_models(models, variant_pairs, o.out_dir, true, g.threads));
    }

    std::vector<std::string> model_names;
    for (const fs::path& p : o.models) model_names.push_back(p.string());
    write_run_manifest(o.out_dir, "eval", g.seed, o.prompts,
                       {{"models", model_names},
                        {"vocab", o.vocab_path.string()},
                        {"prompts", o.prompts.string()},
                        {"variant_prompts", o.variant_prompts.string()},
                        {"out_dir", o.out_dir.string()},
                        {"max_length", o.gen.max_length},
                        {"beams", o.gen.num_beams},
                        {"no_repeat_ngram", o.gen.no_repeat_ngram}});
    return 0;
}

// ------------------------------------------------------------------ repro --

struct ReproOptions {
    fs::path base;
    fs::path variant;
    fs::path embed_model;
    fs::path vocab_path;
    fs::path out;  // default <model>_reproducibility_scores.csv beside base
};

std::vector<std::string> read_lines(const fs::path& path) {
    std::string content = util::read_text_file(path);
    std::vector<std::string> lines;
    std::string current;
    for (char c : content) {
        if (c == '\n') {
            lines.push_back(current);
            current.clear();
        } else {
            current += c;
        }
    }
    if (!current.empty()) lines.push_back(current);
    return lines;
}

int run_repro(const ReproOptions& o, const GlobalFlags& g) {
    auto vocab =
        std::make_shared<const text::Vocabulary>(text::load_vocabulary(o.vocab_path));
    LoadedModel embedder = load_model(o.embed_model, vocab);

    std::vector<std::string> base_lines = read_lines(o.base);
    std::vector<std::string> variant_lines = read_lines(o.variant);
    metrics::ReproScores scores = metrics::reproducibility(
        base_lines, variant_lines, [&](const std::string& text) -> std::vector<double> {
            if (text::tokenize(text, *vocab).empty()) return {};
            return embedder.embed(text);
        });

    fs::path out = o.out.empty()
                       ? beside(o.base) / (embedder.name + "_reproducibility_scores.csv")
                       : o.out;
    metrics::write_repro_csv(out, scores);
    std::cout << scores.pairs.size() << " pairs, mean cosine similarity "
              << util::format_double(scores.mean) << '\n';
    std::cout << "scores written to " << out.string() << '\n';

    write_run_manifest(beside(out), "repro", g.seed, o.base,
                       {{"base", o.base.string()},
                        {"variant", o.variant.string()},
                        {"embed_model", o.embed_model.string()},
                        {"vocab", o.vocab_path.string()},
                        {"out", out.string()}});
    return 0;
}

// ---------------------------------------------------------------- compare --

stats::Alternative alternative_from(const std::string& name) {
    if (name == "less") return stats::Alternative::Less;
    if (name == "greater") return stats::Alternative::Greater;
    throw std::runtime_error("unknown alternative '" + name + "' (use less or greater)");
}

std::string metric_column(const std::string& key) {
    std::string k;
    for (char c : key)
        k += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    std::erase_if(k, [](char c) { return c == ' ' || c == '-' || c == '_'; });
    if (k == "bleu" || k == "bleuscore") return "BLEU Score";
    if (k == "rouge1" || k == "rouge1score") return "ROUGE-1 Score";
    if (k == "rouge2" || k == "rouge2score") return "ROUGE-2 Score";
    if (k == "rougel" || k == "rougelscore") return "ROUGE-L Score";
    if (k == "perplexity" || k == "perplexityscore") return "Perplexity Score";
    return key;  // literal column name
}

// "perplexity=less,default=greater" -> per-column directions + fallback
void parse_alternatives(const std::string& text,
                        std::map<std::string, stats::Alternative>* directions,
                        stats::Alternative* fallback) {
    std::size_t start = 0;
    while (start < text.size()) {
        std::size_t comma = text.find(',', start);
        if (comma == std::string::npos) comma = text.size();
        std::string entry = text.substr(start, comma - start);
        start = comma + 1;
        if (entry.empty()) continue;
        std::size_t eq = entry.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("bad --alternatives entry '" + entry +
                                     "' (expected metric=less|greater)");
        std::string key = entry.substr(0, eq);
        stats::Alternative dir = alternative_from(entry.substr(eq + 1));
        if (key == "default")
            *fallback = dir;
        else
            (*directions)[metric_column(key)] = dir;
    }
}

struct CompareOptions {
    fs::path individual;
    std::string test = "ranksum";
    bool paired = false;
    std::string alternatives;
    std::vector<std::string> metrics = {"bleu", "rouge1", "rougel", "perplexity"};
    std::string model_x;
    std::string model_y;
    fs::path out;
};

int run_compare(const CompareOptions& o, const GlobalFlags& g) {
    // similarity metrics test greater (variant at least as similar), error
    // metrics test less; both overridable through --alternatives
    std::map<std::string, stats::Alternative> directions = {
        {"Perplexity Score", stats::Alternative::Less}};
    stats::Alternative fallback = stats::Alternative::Greater;
    parse_alternatives(o.alternatives, &directions, &fallback);

    std::vector<std::string> columns;
    for (const std::string& m : o.metrics) columns.push_back(metric_column(m));

    stats::TestKind kind = (o.paired || o.test == "signedrank") ? stats::TestKind::SignedRank
                                                                : stats::TestKind::RankSum;
    std::vector<stats::MetricComparison> rows = stats::compare_reports(
        o.individual, columns, directions, fallback, kind, o.model_x, o.model_y);
    std::cout << stats::comparison_table(rows);

    if (!o.out.empty()) {
        stats::write_comparison_csv(o.out, rows);
        write_run_manifest(beside(o.out), "compare", g.seed, o.individual,
                           {{"individual", o.individual.string()},
                            {"test", kind == stats::TestKind::SignedRank ? "signedrank"
                                                                         : "ranksum"},
                            {"alternatives", o.alternatives},
                            {"out", o.out.string()}});
    }
    return 0;
}

struct CompareReproOptions {
    fs::path a;
    fs::path b;
    std::string alternative = "greater";
    bool paired = false;
    fs::path out;
};

stats::Sample repro_sample(const fs::path& path) {
    csv::Table table = csv::read_file(path);
    std::size_t col = 0;
    bool found = false;
    for (std::size_t i = 0; i < table.header.size(); ++i)
        if (table.header[i] == "Cosine Similarity") {
            col = i;
            found = true;
        }
    if (!found)
        throw std::runtime_error(path.string() + ": no 'Cosine Similarity' column");
    stats::Sample sample;
    sample.label = path.stem().string();
    for (const std::vector<std::string>& row : table.rows) {
        if (col >= row.size()) continue;
        try {
            sample.values.push_back(std::stod(row[col]));
        } catch (...) {
            // undefined pairs are skipped
        }
    }
    if (sample.values.empty())
        throw std::runtime_error(path.string() + ": no numeric similarity values");
    return sample;
}

int run_compare_repro(const CompareReproOptions& o, const GlobalFlags& g) {
    stats::Sample a = repro_sample(o.a);
    stats::Sample b = repro_sample(o.b);
    stats::Alternative alternative = alternative_from(o.alternative);

    stats::RankTestResult result = o.paired
                                       ? stats::signed_rank_test(a, b, alternative)
                                       : stats::rank_sum_test(a, b, alternative);
    std::cout << (o.paired ? "signed-rank" : "rank-sum") << " test: statistic "
              << util::format_double(result.statistic) << ", p-value "
              << util::format_double(result.p_value) << " ("
              << stats::to_string(result.method) << ", alternative "
              << stats::to_string(result.alternative) << ")\n";

    if (!o.out.empty()) {
        csv::Table table;
        table.header = {"A", "B", "Test statistic", "P-value", "Method", "Alternative"};
        table.rows.push_back({a.label, b.label, util::format_double(result.statistic),
                              util::format_double(result.p_value),
                              stats::to_string(result.method),
                              stats::to_string(result.alternative)});
        csv::write_file(o.out, table);
        write_run_manifest(beside(o.out), "compare-repro", g.seed, o.a,
                           {{"a", o.a.string()},
                            {"b", o.b.string()},
                            {"alternative", o.alternative},
                            {"paired", o.paired},
                            {"out", o.out.string()}});
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale language-model laboratory"};
    app.require_subcommand(1);

    GlobalFlags g;
    g.seed_opt = app.add_option("--seed", g.seed, "run seed (default 0)");
    g.threads_opt = app.add_option("--threads", g.threads, "worker threads (default 1)");
    g.power_opt = app.add_option("--power-watts", g.power_watts,
                                 "assumed device power for energy reporting");
    app.add_option("--precision", g.precision, "float width for new models")
        ->check(CLI::IsMember({32, 64}));

    // ingest
    auto* ingest_cmd = app.add_subcommand("ingest", "fetch, extract and split the corpus");
    ingest_cmd->require_subcommand(1);
    ingest_cmd->fallthrough();

    IngestFetchOptions fetch_opts;
    auto* fetch_cmd = ingest_cmd->add_subcommand("fetch", "download manifest documents");
    fetch_cmd->fallthrough();
    fetch_cmd->add_option("--manifest", fetch_opts.manifest_path, "JSONL manifest")
        ->required()
        ->check(CLI::ExistingFile);
    fetch_cmd->add_option("--out-dir", fetch_opts.out_dir, "download directory")->required();
    fetch_cmd->add_flag("--resume", fetch_opts.resume, "resume partial downloads");
    fetch_cmd->add_option("--workers", fetch_opts.workers, "parallel downloads");

    IngestExtractOptions extract_opts;
    auto* extract_cmd =
        ingest_cmd->add_subcommand("extract", "extract text from XML documents");
    extract_cmd->fallthrough();
    extract_cmd->add_option("--in-dir", extract_opts.in_dir, "directory of .xml/.tei files")
        ->required()
        ->check(CLI::ExistingDirectory);
    extract_cmd->add_option("--out", extract_opts.out_corpus, "corpus output file")
        ->required();

    IngestSplitOptions split_opts;
    auto* split_cmd = ingest_cmd->add_subcommand("split", "split corpus into train/test");
    split_cmd->fallthrough();
    split_cmd->add_option("--corpus", split_opts.corpus, "corpus file")
        ->required()
        ->check(CLI::ExistingFile);
    split_cmd->add_option("--train-frac", split_opts.train_fraction, "train fraction");
    split_cmd->add_option("--out-train", split_opts.out_train, "train output")->required();
    split_cmd->add_option("--out-test", split_opts.out_test, "test output")->required();

    // tokenizer
    auto* tokenizer_cmd = app.add_subcommand("tokenizer", "vocabulary tools");
    tokenizer_cmd->require_subcommand(1);
    tokenizer_cmd->fallthrough();
    TokenizerOptions tok_opts;
    auto* tok_build_cmd =
        tokenizer_cmd->add_subcommand("build", "build a frequency-ranked vocabulary");
    tok_build_cmd->fallthrough();
    tok_build_cmd->add_option("--corpus", tok_opts.corpus, "corpus file")
        ->required()
        ->check(CLI::ExistingFile);
    tok_build_cmd->add_option("--max-size", tok_opts.max_size, "vocabulary cap");
    tok_build_cmd->add_option("--out", tok_opts.out, "vocabulary output")->required();

    // train
    TrainOptions train_opts;
    auto* train_cmd = app.add_subcommand("train", "train a model from a run config");
    train_cmd->fallthrough();
    train_cmd->add_option("--config", train_opts.config_path, "run config file")
        ->required()
        ->check(CLI::ExistingFile);
    train_opts.optimizer_opt = train_cmd->add_option(
        "--optimizer", train_opts.optimizer, "sgd|adagrad|rmsprop|adam");
    train_opts.lr_opt = train_cmd->add_option("--lr", train_opts.lr, "learning rate");
    train_opts.weight_decay_opt =
        train_cmd->add_option("--weight-decay", train_opts.weight_decay, "decoupled decay");
    train_opts.grad_accum_opt =
        train_cmd->add_option("--grad-accum", train_opts.grad_accum, "micro-batches per step");
    train_opts.max_steps_opt =
        train_cmd->add_option("--max-steps", train_opts.max_steps, "optimizer steps");
    train_opts.output_dir_opt =
        train_cmd->add_option("--output-dir", train_opts.output_dir, "artifact directory");

    // gridsearch
    GridOptions grid_opts;
    auto* grid_cmd =
        app.add_subcommand("gridsearch", "optimizer x learning-rate grid search");
    grid_cmd->fallthrough();
    grid_cmd->add_option("--config", grid_opts.config_path, "grid config file")
        ->required()
        ->check(CLI::ExistingFile);
    grid_opts.sample_frac_opt = grid_cmd->add_option(
        "--sample-frac", grid_opts.sample_frac, "leading fraction of blocks to use");

    // generate
    GenerateOptions gen_opts;
    auto* gen_cmd = app.add_subcommand("generate", "generate one sentence from a prompt");
    gen_cmd->fallthrough();
    gen_cmd->add_option("--model", gen_opts.model_path, "checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    gen_cmd->add_option("--vocab", gen_opts.vocab_path, "vocabulary file")
        ->required()
        ->check(CLI::ExistingFile);
    gen_cmd->add_option("--prompt", gen_opts.prompt, "prompt text")->required();
    gen_cmd->add_option("--max-length", gen_opts.gen.max_length, "prompt + continuation cap");
    gen_cmd->add_option("--beams", gen_opts.gen.num_beams, "beam count");
    gen_cmd->add_option("--no-repeat-ngram", gen_opts.gen.no_repeat_ngram,
                        "ban repeated n-grams (0 disables)");

    // eval
    EvalOptions eval_opts;
    auto* eval_cmd = app.add_subcommand("eval", "score models on a prompt set");
    eval_cmd->fallthrough();
    eval_cmd->add_option("--models", eval_opts.models, "checkpoints to compare")
        ->required()
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("--vocab", eval_opts.vocab_path, "vocabulary file")
        ->required()
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("--prompts", eval_opts.prompts, "prompt/reference pairs")
        ->required()
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("--variant-prompts", eval_opts.variant_prompts,
                         "second prompt set written with _synonyms suffixes")
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("--out-dir", eval_opts.out_dir, "report directory")->required();
    eval_cmd->add_option("--max-length", eval_opts.gen.max_length, "generation cap");
    eval_cmd->add_option("--beams", eval_opts.gen.num_beams, "beam count");
    eval_cmd->add_option("--no-repeat-ngram", eval_opts.gen.no_repeat_ngram,
                         "ban repeated n-grams");

    // repro
    ReproOptions repro_opts;
    auto* repro_cmd =
        app.add_subcommand("repro", "pairwise embedding cosine of two generation files");
    repro_cmd->fallthrough();
    repro_cmd->add_option("--base", repro_opts.base, "base generations, one per line")
        ->required()
        ->check(CLI::ExistingFile);
    repro_cmd->add_option("--variant", repro_opts.variant, "variant generations")
        ->required()
        ->check(CLI::ExistingFile);
    repro_cmd->add_option("--embed-model", repro_opts.embed_model, "embedding checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    repro_cmd->add_option("--vocab", repro_opts.vocab_path, "vocabulary file")
        ->required()
        ->check(CLI::ExistingFile);
    repro_cmd->add_option("--out", repro_opts.out, "scores CSV path");

    // compare
    CompareOptions cmp_opts;
    auto* cmp_cmd = app.add_subcommand("compare", "rank tests over per-prompt metrics");
    cmp_cmd->fallthrough();
    cmp_cmd->add_option("--individual", cmp_opts.individual, "per-prompt metrics CSV")
        ->required()
        ->check(CLI::ExistingFile);
    cmp_cmd->add_option("--test", cmp_opts.test, "ranksum|signedrank")
        ->check(CLI::IsMember({"ranksum", "signedrank"}));
    cmp_cmd->add_flag("--paired", cmp_opts.paired, "shorthand for --test signedrank");
    cmp_cmd->add_option("--alternatives", cmp_opts.alternatives,
                        "per-metric directions, e.g. perplexity=less,default=greater");
    cmp_cmd->add_option("--metrics", cmp_opts.metrics, "metric columns to test");
    cmp_cmd->add_option("--model-x", cmp_opts.model_x, "first model label");
    cmp_cmd->add_option("--model-y", cmp_opts.model_y, "second model label");
    cmp_cmd->add_option("--out", cmp_opts.out, "results CSV path");

    // compare-repro
    CompareReproOptions cr_opts;
    auto* cr_cmd =
        app.add_subcommand("compare-repro", "rank test between two reproducibility CSVs");
    cr_cmd->fallthrough();
    cr_cmd->add_option("--a", cr_opts.a, "first scores CSV")
        ->required()
        ->check(CLI::ExistingFile);
    cr_cmd->add_option("--b", cr_opts.b, "second scores CSV")
        ->required()
        ->check(CLI::ExistingFile);
    cr_cmd->add_option("--alternative", cr_opts.alternative, "less|greater")
        ->check(CLI::IsMember({"less", "greater"}));
    cr_cmd->add_flag("--paired", cr_opts.paired, "signed-rank instead of rank-sum");
    cr_cmd->add_option("--out", cr_opts.out, "results CSV path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (fetch_cmd->parsed()) return run_ingest_fetch(fetch_opts, g);
        if (extract_cmd->parsed()) return run_ingest_extract(extract_opts, g);
        if (split_cmd->parsed()) return run_ingest_split(split_opts, g);
        if (tok_build_cmd->parsed()) return run_tokenizer_build(tok_opts, g);
        if (train_cmd->parsed()) return run_train(train_opts, g);
        if (grid_cmd->parsed()) return run_gridsearch(grid_opts, g);
        if (gen_cmd->parsed()) return run_generate(gen_opts);
        if (eval_cmd->parsed()) return run_eval(eval_opts, g);
        if (repro_cmd->parsed()) return run_repro(repro_opts, g);
        if (cmp_cmd->parsed()) return run_compare(cmp_opts, g);
        if (cr_cmd->parsed()) return run_compare_repro(cr_opts, g);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
