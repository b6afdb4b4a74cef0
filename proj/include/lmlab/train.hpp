#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "lmlab/model.hpp"
#include "lmlab/optim.hpp"
#include "lmlab/textprep.hpp"

namespace lmlab::train {

constexpr double kDefaultPowerWatts = 250.0;

struct TrainConfig {
    std::int64_t max_steps = 0;
    std::int64_t batch_size = 4;
    std::int64_t grad_accum = 16;
    std::int64_t block_size = 128;
    std::int64_t eval_steps = 0;     // 0: evaluate only at the start and end
    std::int64_t logging_steps = 1;
    std::int64_t save_steps = 0;     // 0: checkpoint only at completion
    bool shuffle = false;            // default keeps block order sequential
    std::uint64_t seed = 0;
    opt::OptimizerSpec optimizer;
    std::filesystem::path output_dir;  // empty: no checkpoints written

    void validate() const;  // throws std::invalid_argument
};

struct LogPoint {
    std::int64_t step = 0;
    double loss = 0.0;
};

struct TrainingLog {
    std::vector<LogPoint> train_points;
    std::vector<LogPoint> eval_points;
    // wall-clock per logged interval, aligned with train_points; timing is
    // the one field outside the bit-reproducibility guarantee
    std::vector<double> interval_seconds;
    bool aborted = false;
    std::string abort_reason;
    std::filesystem::path final_checkpoint;  // empty when aborted or unsaved
};

struct ResourceReport {
    double run_time_s = 0.0;
    double ram_mb = 0.0;        // peak tracked tensor bytes in the window
    double energy_kwh = 0.0;    // power_watts * run_time_s / 3.6e6
    double power_watts = 0.0;
};

// Runs the closure under a wall-clock timer and a thread-local allocation
// window; energy is the declared-power proxy.
ResourceReport meter(double power_watts, const std::function<void()>& run);

// mean NLL over the eval blocks, dropout off, no parameter updates
template <typename T>
double evaluate(const nn::Model<T>& model,
                const std::vector<text::TokenSequence>& eval_blocks);

// Runs exactly max_steps optimizer steps of grad_accum micro-batches each,
// batches drawn in sequential block order with wraparound (or reshuffled
// per pass when shuffle is set). Evaluates at step 0, every eval_steps and
// at max_steps; checkpoints every save_steps and at completion. A non-
// finite loss or gradient aborts the run, retaining the last checkpoint
// already on disk. Deterministic given (seed, config, corpus).
template <typename T>
TrainingLog train(const TrainConfig& config, nn::Model<T>& model,
                  const std::vector<text::TokenSequence>& train_blocks,
                  const std::vector<text::TokenSequence>& eval_blocks);

// Model family trained in every grid cell: fresh base weights from the
// config seed, plus adapters unless lora_r is 0 (full fine-tune).
struct ModelSetup {
    nn::ModelConfig model;
    std::int64_t lora_r = 4;
    double lora_dropout = 0.05;
    double lora_scale = 1.0;
    std::vector<std::string> lora_targets;  // empty: attention + output head
};

template <typename T>
nn::Model<T> make_model(const ModelSetup& setup);

struct GridCell {
    opt::Kind optimizer = opt::Kind::SGD;
    double lr = 0.0;
    std::int64_t steps = 0;
    bool ok = false;
    double val_error = 0.0;
    ResourceReport resources;
    std::string error;
};

struct SelectionPolicy {
    double delta_val = 0.02;  // validation-error ties, in nats
};

struct GridResult {
    std::vector<GridCell> rows;
    std::size_t chosen = 0;
    bool has_chosen = false;
};

struct GridPlan {
    std::vector<opt::OptimizerSpec> optimizers;     // eta is set per cell
    std::vector<double> rates;
    std::map<double, std::int64_t> steps_per_rate;  // missing rate: base.max_steps
    TrainConfig base;
    ModelSetup setup;
    double power_watts = kDefaultPowerWatts;
    int threads = 1;
    SelectionPolicy policy;
};

// One independent, metered training run per (rate, optimizer) cell, every
// cell reinitialized from the same seed. Failed cells are recorded, not
// fatal; selection is skipped when no cell succeeded.
template <typename T>
GridResult grid_search(const GridPlan& plan,
                       const std::vector<text::TokenSequence>& train_blocks,
                       const std::vector<text::TokenSequence>& eval_blocks);

// Lexicographic choice: smallest validation error wins, but rows within
// delta_val of the best stay in play and are split by energy, then RAM,
// then runtime. Throws when no row succeeded.
std::size_t select_best(const std::vector<GridCell>& rows, const SelectionPolicy& policy);

// report table grouped by learning-rate block, one optimizer per row
std::string grid_table(const GridResult& result);

// columns: optimizer, lr, steps, val_error, run_time_s, ram_mb, energy_kwh
void write_grid_csv(const GridResult& result, const std::filesystem::path& path);

}  // namespace lmlab::train
