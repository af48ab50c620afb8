#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>

#include "cvattn/checkpoint.hpp"
#include "cvattn/data.hpp"
#include "cvattn/loss.hpp"
#include "cvattn/metrics.hpp"
#include "cvattn/optim.hpp"
#include "cvattn/unet.hpp"

namespace cvattn {

struct TrainConfig {
    int epochs = 30;
    int batch_size = 8;
    std::uint64_t seed = 0;
    double lr = 5e-4;
    double weight_decay = 1e-2;
    double dice_weight = 1.0;
    double bce_weight = 1.0;
    AugmentToggles aug;
    int checkpoint_cadence = 10;  // checkpoints at epoch 1, every cadence, and last
    std::string out_dir;          // empty: no files written

    void validate() const {
        if (epochs < 1) throw ConfigError("TrainConfig: epochs >= 1 required");
        if (batch_size < 1) throw ConfigError("TrainConfig: batch_size >= 1 required");
        if (checkpoint_cadence < 1) throw ConfigError("TrainConfig: checkpoint_cadence >= 1 required");
    }
};

/// Raised when a training step produces a non-finite loss or gradient; the
/// offending batch index and the emergency checkpoint path are attached.
class TrainAbort : public Error {
public:
    TrainAbort(const std::string& msg, int epoch, int batch, std::string checkpoint)
        : Error(msg), epoch_(epoch), batch_(batch), checkpoint_(std::move(checkpoint)) {}
    int epoch() const { return epoch_; }
    int batch() const { return batch_; }
    const std::string& checkpoint() const { return checkpoint_; }

private:
    int epoch_;
    int batch_;
    std::string checkpoint_;
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0;
    MetricsReport val;
    double sec_per_batch = 0;
};

struct TrainResult {
    std::vector<EpochStats> history;
    std::vector<std::pair<int, std::string>> checkpoints;  // (epoch, path)
};

namespace detail {

template <typename S>
std::pair<Tensor<S>, Tensor<S>> assemble_batch(const std::vector<Sample<S>>& samples,
                                               const std::vector<std::size_t>& order,
                                               std::size_t begin, std::size_t end) {
    const Index n = static_cast<Index>(end - begin);
    const Index h = samples[order[begin]].image.extent(1);
    const Index w = samples[order[begin]].image.extent(2);
    Tensor<S> x = Tensor<S>::zeros({n, 1, h, w});
    Tensor<S> y = Tensor<S>::zeros({n, 1, h, w});
    for (std::size_t k = begin; k < end; ++k) {
        const Sample<S>& s = samples[order[k]];
        if (s.image.extent(1) != h || s.image.extent(2) != w) {
            throw ShapeError("assemble_batch: inconsistent sample extents");
        }
        const Index off = static_cast<Index>(k - begin) * h * w;
        std::copy(s.image.data(), s.image.data() + h * w, x.mutable_data() + off);
        std::copy(s.mask.data(), s.mask.data() + h * w, y.mutable_data() + off);
    }
    return {x, y};
}

}  // namespace detail

/// Per-sample evaluation at sigmoid(logits) > threshold.
template <typename S>
std::vector<SampleMetrics> evaluate_samples(const Model<S>& model, const std::vector<Sample<S>>& data,
                                            double threshold = 0.5, int batch_size = 8) {
    if (data.empty()) throw ConfigError("evaluate: dataset is empty");
    std::vector<SampleMetrics> rows;
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) order[i] = i;
    for (std::size_t begin = 0; begin < data.size(); begin += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(data.size(), begin + static_cast<std::size_t>(batch_size));
        auto [x, y] = detail::assemble_batch(data, order, begin, end);
        ForwardResult<S> fwd = forward(model, x);
        const Index hw = x.extent(2) * x.extent(3);
        for (std::size_t k = begin; k < end; ++k) {
            const Index off = static_cast<Index>(k - begin) * hw;
            Tensor<S> pred = Tensor<S>::zeros({1, x.extent(2), x.extent(3)});
            for (Index i = 0; i < hw; ++i) {
                pred.raw()[i] =
                    stable_sigmoid(fwd.logits.at(off + i)) > static_cast<S>(threshold) ? S(1) : S(0);
            }
            rows.push_back(sample_metrics(pred, data[k].mask, data[k].spacing_mm));
        }
    }
    return rows;
}

template <typename S>
MetricsReport evaluate(const Model<S>& model, const std::vector<Sample<S>>& data,
                       double threshold = 0.5) {
    return aggregate(evaluate_samples(model, data, threshold));
}

// --- CSV writers ------------------------------------------------------------

inline std::string csv_num(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

/// Schema: epoch,train_loss,val_dice,val_iou,val_hd_mm,val_fpr,val_fnr,sec_per_batch
inline void detail_write_history_csv(const std::string& path, const std::vector<EpochStats>& history);

inline void write_history_csv(const std::string& path, const std::vector<EpochStats>& history) {
    atomic_write(path, [&](const std::string& tmp) { detail_write_history_csv(tmp, history); });
}

inline void detail_write_history_csv(const std::string& path, const std::vector<EpochStats>& history) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "epoch,train_loss,val_dice,val_iou,val_hd_mm,val_fpr,val_fnr,sec_per_batch\n";
    for (const auto& e : history) {
        os << e.epoch << ',' << csv_num(e.train_loss) << ',' << csv_num(e.val.dice.mean) << ','
           << csv_num(e.val.iou.mean) << ',' << csv_num(e.val.hausdorff_mm.mean) << ','
           << csv_num(e.val.fpr.mean) << ',' << csv_num(e.val.fnr.mean) << ','
           << csv_num(e.sec_per_batch) << "\n";
    }
}

/// Schema: sample,dice,iou,hausdorff_mm,fpr,fnr; one row per sample
/// (hausdorff blank when undefined), then mean and sd footer rows over the
/// defined values, then a hausdorff_excluded count row.
inline void detail_write_eval_csv(const std::string& path, const std::vector<SampleMetrics>& rows);

inline void write_eval_csv(const std::string& path, const std::vector<SampleMetrics>& rows) {
    atomic_write(path, [&](const std::string& tmp) { detail_write_eval_csv(tmp, rows); });
}

inline void detail_write_eval_csv(const std::string& path, const std::vector<SampleMetrics>& rows) {
    const MetricsReport r = aggregate(rows);
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "sample,dice,iou,hausdorff_mm,fpr,fnr\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& m = rows[i];
        os << i << ',' << csv_num(m.dice) << ',' << csv_num(m.iou) << ',';
        if (m.hausdorff_mm) os << csv_num(*m.hausdorff_mm);
        os << ',' << csv_num(m.fpr) << ',' << csv_num(m.fnr) << "\n";
    }
    os << "mean," << csv_num(r.dice.mean) << ',' << csv_num(r.iou.mean) << ','
       << csv_num(r.hausdorff_mm.mean) << ',' << csv_num(r.fpr.mean) << ',' << csv_num(r.fnr.mean)
       << "\n";
    os << "sd," << csv_num(r.dice.sd) << ',' << csv_num(r.iou.sd) << ',' << csv_num(r.hausdorff_mm.sd)
       << ',' << csv_num(r.fpr.sd) << ',' << csv_num(r.fnr.sd) << "\n";
    os << "hausdorff_excluded," << r.hausdorff_excluded << ",,,,\n";
}

// --- training loop ----------------------------------------------------------

inline std::string epoch_tag(int epoch) {
    char buf[8];
    std::snprintf(buf, sizeof(buf), "%03d", epoch);
    return buf;
}

/// Seeded shuffling and augmentation, Dice+BCE loss, decoupled-weight-decay
/// updates, per-epoch validation metrics and wall-clock seconds per batch.
/// Checkpoints land in out_dir at epoch 1, every checkpoint_cadence epochs
/// and the final epoch. A non-finite loss or gradient aborts with a dumped
/// checkpoint and the offending batch index.
template <typename S>
TrainResult train(Model<S>& model, const std::vector<Sample<S>>& train_set,
                  const std::vector<Sample<S>>& val_set, const TrainConfig& cfg) {
    cfg.validate();
    if (train_set.empty() || val_set.empty()) throw ConfigError("train: datasets must be nonempty");
    namespace fs = std::filesystem;
    const bool writing = !cfg.out_dir.empty();
    if (writing) fs::create_directories(cfg.out_dir);

    AdamW<S> opt;
    opt.lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;

    TrainResult result;
    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch), 0x5eed));
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j =
                static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(order[i - 1], order[j]);
        }

        double loss_sum = 0;
        double seconds = 0;
        std::size_t n_seen = 0;
        int n_batches = 0;
        for (std::size_t begin = 0; begin < train_set.size();
             begin += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(train_set.size(), begin + static_cast<std::size_t>(cfg.batch_size));
            std::vector<Sample<S>> batch_samples;
            batch_samples.reserve(end - begin);
            for (std::size_t k = begin; k < end; ++k) {
                Rng aug_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch),
                                        0xA06 ^ static_cast<std::uint64_t>(order[k])));
                batch_samples.push_back(augment(train_set[order[k]], aug_rng, cfg.aug));
            }
            std::vector<std::size_t> ident(batch_samples.size());
            for (std::size_t i = 0; i < ident.size(); ++i) ident[i] = i;
            auto [x, y] = detail::assemble_batch(batch_samples, ident, 0, batch_samples.size());

            const auto t0 = std::chrono::steady_clock::now();
            double loss_value = 0;
            try {
                Tape<S> tape;
                Tensor<S> loss;
                {
                    TapeScope<S> scope(tape);
                    ForwardResult<S> fwd = forward(model, x);
                    loss = add(scalar_mul(dice_loss(fwd.logits, y), static_cast<S>(cfg.dice_weight)),
                               scalar_mul(bce_loss(fwd.logits, y), static_cast<S>(cfg.bce_weight)));
                    backward(loss, tape);
                }
                loss_value = static_cast<double>(loss.value());
                if (!std::isfinite(loss_value)) throw NumericError("train: non-finite loss");
                opt.step(model.params, gradients(tape, model.params));
            } catch (const NumericError& e) {
                std::string ckpt;
                if (writing) {
                    ckpt = (fs::path(cfg.out_dir) /
                            ("crash_epoch" + std::to_string(epoch) + "_batch" +
                             std::to_string(n_batches) + ".ckpt"))
                               .string();
                    save_checkpoint(model, ckpt);
                }
                throw TrainAbort(std::string("training aborted at epoch ") + std::to_string(epoch) +
                                     " batch " + std::to_string(n_batches) + ": " + e.what(),
                                 epoch, n_batches, ckpt);
            }
            seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            loss_sum += loss_value * static_cast<double>(end - begin);
            n_seen += end - begin;
            ++n_batches;
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = loss_sum / static_cast<double>(n_seen);
        stats.sec_per_batch = seconds / static_cast<double>(n_batches);
        try {
            stats.val = evaluate(model, val_set);
        } catch (const NumericError& e) {
            // batch index -1 marks a blow-up caught in the validation pass
            std::string ckpt;
            if (writing) {
                ckpt = (fs::path(cfg.out_dir) /
                        ("crash_epoch" + std::to_string(epoch) + "_validation.ckpt"))
                           .string();
                save_checkpoint(model, ckpt);
            }
            throw TrainAbort(std::string("training aborted during validation after epoch ") +
                                 std::to_string(epoch) + ": " + e.what(),
                             epoch, -1, ckpt);
        }
        result.history.push_back(stats);

        const bool at_cadence =
            epoch == 1 || epoch == cfg.epochs || epoch % cfg.checkpoint_cadence == 0;
        if (writing && at_cadence) {
            const std::string path =
                (fs::path(cfg.out_dir) / ("checkpoint_epoch" + epoch_tag(epoch) + ".ckpt")).string();
            save_checkpoint(model, path);
            result.checkpoints.emplace_back(epoch, path);
        }
    }
    if (writing) {
        write_history_csv((fs::path(cfg.out_dir) / "history.csv").string(), result.history);
    }
    return result;
}

}  // namespace cvattn
