#include "lmlab/train.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "lmlab/csv.hpp"
#include "lmlab/rng.hpp"
#include "lmlab/util.hpp"

namespace lmlab::train {

void TrainConfig::validate() const {
    if (max_steps < 0) throw std::invalid_argument("train config: max_steps must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (grad_accum < 1) throw std::invalid_argument("train config: grad_accum must be >= 1");
    if (block_size < 2) throw std::invalid_argument("train config: block_size must be >= 2");
    if (logging_steps < 1)
        throw std::invalid_argument("train config: logging_steps must be >= 1");
    if (eval_steps < 0) throw std::invalid_argument("train config: eval_steps must be >= 0");
    if (save_steps < 0) throw std::invalid_argument("train config: save_steps must be >= 0");
    optimizer.validate();
}

ResourceReport meter(double power_watts, const std::function<void()>& run) {
    if (!(power_watts > 0.0)) throw std::invalid_argument("meter: power must be > 0 watts");
    mem::MeterWindow window;
    const auto start = std::chrono::steady_clock::now();
    run();
    const auto stop = std::chrono::steady_clock::now();

    ResourceReport report;
    report.run_time_s = std::chrono::duration<double>(stop - start).count();
    report.ram_mb = static_cast<double>(window.peak_bytes()) / (1024.0 * 1024.0);
    report.energy_kwh = power_watts * report.run_time_s / 3.6e6;
    report.power_watts = power_watts;
    return report;
}

template <typename T>
double evaluate(const nn::Model<T>& model,
                const std::vector<text::TokenSequence>& eval_blocks) {
    if (eval_blocks.empty()) throw std::invalid_argument("evaluate: no eval blocks");
    double total = 0.0;
    for (const auto& block : eval_blocks) total += model.sequence_nll(block);
    return total / static_cast<double>(eval_blocks.size());
}

namespace {

// sequential block order with wraparound; an optional reshuffle per pass
class BlockCursor {
  public:
    BlockCursor(std::size_t count, bool shuffle, std::uint64_t seed)
        : order_(count), shuffle_(shuffle), rng_(seed) {
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        position_ = count;  // first fetch starts a fresh pass
    }

    std::size_t next() {
        if (position_ == order_.size()) {
            position_ = 0;
            if (shuffle_)
                for (std::size_t i = order_.size(); i > 1; --i)
                    std::swap(order_[i - 1], order_[static_cast<std::size_t>(rng_.below(i))]);
        }
        return order_[position_++];
    }

  private:
    std::vector<std::size_t> order_;
    std::size_t position_ = 0;
    bool shuffle_ = false;
    Rng rng_;
};

}  // namespace

template <typename T>
TrainingLog train(const TrainConfig& config, nn::Model<T>& model,
                  const std::vector<text::TokenSequence>& train_blocks,
                  const std::vector<text::TokenSequence>& eval_blocks) {
    config.validate();
    if (train_blocks.empty()) throw std::invalid_argument("train: no training blocks");
    if (eval_blocks.empty()) throw std::invalid_argument("train: no eval blocks");

    TrainingLog log;
    const bool save = !config.output_dir.empty();
    auto save_as = [&](const std::string& name) -> std::filesystem::path {
        if (!save) return {};
        const std::filesystem::path path = config.output_dir / name;
        nn::save_checkpoint(model, path);
        return path;
    };

    if (config.max_steps == 0) {
        log.final_checkpoint = save_as("model.bin");
        return log;
    }

    auto params = model.trainable_tensors();
    if (params.empty()) throw std::invalid_argument("train: model has no trainable tensors");
    auto state = opt::make_state<T>(config.optimizer, params);
    opt::AccumulationBuffer<T> accum(params, static_cast<int>(config.grad_accum));

    Rng dropout_rng(Rng::mix(config.seed, "dropout"));
    BlockCursor cursor(train_blocks.size(), config.shuffle, Rng::mix(config.seed, "batch_order"));

    log.eval_points.push_back({0, evaluate(model, eval_blocks)});

    auto interval_start = std::chrono::steady_clock::now();
    for (std::int64_t step = 1; step <= config.max_steps; ++step) {
        double step_loss = 0.0;
        for (std::int64_t micro = 0; micro < config.grad_accum; ++micro) {
            std::vector<text::TokenSequence> drawn;
            drawn.reserve(static_cast<std::size_t>(config.batch_size));
            for (std::int64_t b = 0; b < config.batch_size; ++b)
                drawn.push_back(train_blocks[cursor.next()]);
            text::Batch batch = text::collate(drawn, 0);

            typename nn::Model<T>::BackwardResult result;
            try {
                result = model.backward(batch, &dropout_rng);
            } catch (const std::exception& e) {
                log.aborted = true;
                log.abort_reason = e.what();
                return log;
            }
            if (!std::isfinite(result.loss)) {
                log.aborted = true;
                log.abort_reason = "non-finite loss at step " + std::to_string(step);
                return log;
            }
            step_loss += result.loss;

            if (auto mean = accum.add(result.grads)) {
                try {
                    opt::step(config.optimizer, state, params, *mean);
                } catch (const std::exception& e) {
                    log.aborted = true;
                    log.abort_reason = e.what();
                    return log;
                }
            }
        }
        step_loss /= static_cast<double>(config.grad_accum);

        if (step % config.logging_steps == 0 || step == config.max_steps) {
            const auto now = std::chrono::steady_clock::now();
            log.train_points.push_back({step, step_loss});
            log.interval_seconds.push_back(
                std::chrono::duration<double>(now - interval_start).count());
            interval_start = now;
        }
        const bool last = step == config.max_steps;
        if (last || (config.eval_steps > 0 && step % config.eval_steps == 0))
            log.eval_points.push_back({step, evaluate(model, eval_blocks)});
        if (!last && config.save_steps > 0 && step % config.save_steps == 0)
            save_as("checkpoint-" + std::to_string(step) + ".bin");
    }

    log.final_checkpoint = save_as("model.bin");
    return log;
}

template <typename T>
nn::Model<T> make_model(const ModelSetup& setup) {
    nn::Model<T> model(setup.model);
    if (setup.lora_r > 0) {
        const auto targets =
            setup.lora_targets.empty() ? model.default_lora_targets() : setup.lora_targets;
        model.attach_lora(setup.lora_r, targets, setup.lora_dropout, setup.lora_scale);
    }
    return model;
}

std::size_t select_best(const std::vector<GridCell>& rows, const SelectionPolicy& policy) {
    double best_val = std::numeric_limits<double>::infinity();
    bool any = false;
    for (const GridCell& row : rows) {
        if (!row.ok) continue;
        any = true;
        best_val = std::min(best_val, row.val_error);
    }
    if (!any) throw std::runtime_error("select_best: no successful grid cells");

    std::size_t best = rows.size();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const GridCell& row = rows[i];
        if (!row.ok || row.val_error > best_val + policy.delta_val) continue;
        if (best == rows.size()) {
            best = i;
            continue;
        }
        const GridCell& lead = rows[best];
        const auto key = [](const GridCell& c) {
            return std::make_tuple(c.resources.energy_kwh, c.resources.ram_mb,
                                   c.resources.run_time_s);
        };
        if (key(row) < key(lead)) best = i;
    }
    return best;
}

template <typename T>
GridResult grid_search(const GridPlan& plan,
                       const std::vector<text::TokenSequence>& train_blocks,
                       const std::vector<text::TokenSequence>& eval_blocks) {
    if (plan.optimizers.empty()) throw std::invalid_argument("grid: no optimizers");
    if (plan.rates.empty()) throw std::invalid_argument("grid: no learning rates");

    struct Job {
        opt::OptimizerSpec spec;
        std::int64_t steps = 0;
    };
    std::vector<Job> jobs;
    for (double rate : plan.rates) {
        for (opt::OptimizerSpec spec : plan.optimizers) {
            spec.eta = rate;
            auto it = plan.steps_per_rate.find(rate);
            jobs.push_back({spec, it == plan.steps_per_rate.end() ? plan.base.max_steps
                                                                  : it->second});
        }
    }

    GridResult result;
    result.rows.resize(jobs.size());
    std::atomic<std::size_t> next{0};

    auto worker = [&]() {
        for (std::size_t i = next.fetch_add(1); i < jobs.size(); i = next.fetch_add(1)) {
            const Job& job = jobs[i];
            GridCell cell;
            cell.optimizer = job.spec.kind;
            cell.lr = job.spec.eta;
            cell.steps = job.steps;
            try {
                TrainConfig config = plan.base;
                config.optimizer = job.spec;
                config.max_steps = job.steps;
                if (!plan.base.output_dir.empty()) {
                    std::string dir = opt::to_string(job.spec.kind) + "_lr" +
                                      util::format_double(job.spec.eta) + "_s" +
                                      std::to_string(job.steps);
                    config.output_dir = plan.base.output_dir / dir;
                }
                TrainingLog log;
                cell.resources = meter(plan.power_watts, [&]() {
                    nn::Model<T> model = make_model<T>(plan.setup);
                    log = train(config, model, train_blocks, eval_blocks);
                });
                if (log.aborted) {
                    cell.error = log.abort_reason;
                } else {
                    cell.ok = true;
                    cell.val_error = log.eval_points.back().loss;
                }
            } catch (const std::exception& e) {
                cell.error = e.what();
            }
            result.rows[i] = std::move(cell);
        }
    };

    const std::size_t n_workers =
        std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(
                                                           std::max(1, plan.threads)),
                                                       jobs.size()));
    if (n_workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
        for (auto& thread : pool) thread.join();
    }

    try {
        result.chosen = select_best(result.rows, plan.policy);
        result.has_chosen = true;
    } catch (const std::runtime_error&) {
        result.has_chosen = false;
    }
    return result;
}

namespace {

std::string fixed(double value, int places) {
    std::ostringstream out;
    out.setf(std::ios::fixed);
    out.precision(places);
    out << value;
    return out.str();
}

}  // namespace

std::string grid_table(const GridResult& result) {
    static const char* kHeader[5] = {"Optimizer", "Validation Error", "Run time (sec)",
                                     "RAM usage (MB)", "Electricity usage (kWh)"};
    std::ostringstream out;

    // rows arrive grouped by learning-rate block already; render per block
    std::size_t i = 0;
    while (i < result.rows.size()) {
        const double lr = result.rows[i].lr;
        const std::int64_t steps = result.rows[i].steps;
        std::size_t j = i;
        while (j < result.rows.size() && result.rows[j].lr == lr &&
               result.rows[j].steps == steps)
            ++j;

        out << "Learning rate = " << util::format_double(lr) << ", Steps = " << steps << "\n";
        std::vector<std::array<std::string, 5>> lines;
        for (std::size_t r = i; r < j; ++r) {
            const GridCell& cell = result.rows[r];
            lines.push_back({opt::to_string(cell.optimizer),
                             cell.ok ? fixed(cell.val_error, 4) : "failed",
                             fixed(cell.resources.run_time_s, 2),
                             fixed(cell.resources.ram_mb, 2),
                             fixed(cell.resources.energy_kwh, 6)});
        }
        std::array<std::size_t, 5> width{};
        for (int c = 0; c < 5; ++c) width[static_cast<std::size_t>(c)] = std::string(kHeader[c]).size();
        for (const auto& line : lines)
            for (std::size_t c = 0; c < 5; ++c) width[c] = std::max(width[c], line[c].size());

        for (std::size_t c = 0; c < 5; ++c) {
            out << kHeader[c];
            if (c + 1 < 5) out << std::string(width[c] - std::string(kHeader[c]).size() + 2, ' ');
        }
        out << "\n";
        for (const auto& line : lines) {
            for (std::size_t c = 0; c < 5; ++c) {
                out << line[c];
                if (c + 1 < 5) out << std::string(width[c] - line[c].size() + 2, ' ');
            }
            out << "\n";
        }
        out << "\n";
        i = j;
    }

    if (result.has_chosen) {
        const GridCell& chosen = result.rows[result.chosen];
        out << "chosen: " << opt::to_string(chosen.optimizer) << " at lr "
            << util::format_double(chosen.lr) << ", steps " << chosen.steps << "\n";
    } else {
        out << "chosen: none (no successful cells)\n";
    }
    return out.str();
}

void write_grid_csv(const GridResult& result, const std::filesystem::path& path) {
    csv::Table table;
    table.header = {"optimizer", "lr", "steps", "val_error", "run_time_s", "ram_mb",
                    "energy_kwh"};
    for (const GridCell& cell : result.rows) {
        table.rows.push_back({opt::to_string(cell.optimizer), util::format_double(cell.lr),
                              std::to_string(cell.steps),
                              cell.ok ? util::format_double(cell.val_error) : "failed",
                              util::format_double(cell.resources.run_time_s),
                              util::format_double(cell.resources.ram_mb),
                              util::format_double(cell.resources.energy_kwh)});
    }
    csv::write_file(path, table);
}

template double evaluate(const nn::Model<float>&, const std::vector<text::TokenSequence>&);
template double evaluate(const nn::Model<double>&, const std::vector<text::TokenSequence>&);
template TrainingLog train(const TrainConfig&, nn::Model<float>&,
                           const std::vector<text::TokenSequence>&,
                           const std::vector<text::TokenSequence>&);
template TrainingLog train(const TrainConfig&, nn::Model<double>&,
                           const std::vector<text::TokenSequence>&,
                           const std::vector<text::TokenSequence>&);
template nn::Model<float> make_model(const ModelSetup&);
template nn::Model<double> make_model(const ModelSetup&);
template GridResult grid_search<float>(const GridPlan&,
                                       const std::vector<text::TokenSequence>&,
                                       const std::vector<text::TokenSequence>&);
template GridResult grid_search<double>(const GridPlan&,
                                        const std::vector<text::TokenSequence>&,
                                        const std::vector<text::TokenSequence>&);

}  // namespace lmlab::train
