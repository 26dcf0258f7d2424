#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lefm/data/augment.hpp"
#include "lefm/data/dataset.hpp"
#include "lefm/data/patches.hpp"
#include "lefm/data/split.hpp"
#include "lefm/error.hpp"
#include "lefm/exponent_table.hpp"
#include "lefm/metrics/classification.hpp"
#include "lefm/metrics/report.hpp"
#include "lefm/nn/fp_env.hpp"
#include "lefm/nn/mini_unet.hpp"
#include "lefm/nn/optim.hpp"
#include "lefm/rng.hpp"
#include "lefm/train/checkpoint.hpp"
#include "lefm/train/config.hpp"
#include "lefm/version.hpp"

namespace lefm::train {

using Net = nn::SegmentationNet<float>;

/// Training patches and held-out test images for one split.
struct PreparedData {
    std::vector<data::Patch> train_pool;
    std::vector<data::AnnotatedSample> test;
    std::size_t channels = 3;
};

inline PreparedData prepare_data(std::span<const data::AnnotatedSample> samples, const data::SplitSpec& split,
                                 const TrainConfig& cfg)
{
    data::validate_split(split, samples);
    PreparedData out;
    if (samples.empty())
        throw DataError("dataset is empty");
    out.channels = samples.front().image.channels();
    auto find = [&](const std::string& id) -> const data::AnnotatedSample& {
        for (const auto& s : samples)
            if (s.id == id)
                return s;
        throw DataError("split references unknown sample " + id);
    };
    for (const auto& id : split.train) {
        const auto& s = find(id);
        if (s.image.channels() != out.channels)
            throw DataError("sample " + id + " has " + std::to_string(s.image.channels()) + " channels, expected " +
                            std::to_string(out.channels));
        for (auto& p : data::make_patches(s.image, s.majority_label, static_cast<std::size_t>(cfg.patch_size),
                                          static_cast<std::size_t>(cfg.stride)))
            out.train_pool.push_back(std::move(p));
    }
    for (const auto& id : split.test)
        out.test.push_back(find(id));
    if (out.train_pool.size() < 2)
        throw DataError("training split yields fewer than two patches");
    if (out.test.empty())
        throw DataError("test split is empty");
    return out;
}

/// Stacks HWC patches into a B x C x H x W tensor and a flat target vector.
inline std::pair<nn::Tensor<float>, std::vector<float>> make_batch(const std::vector<const Image<float>*>& images,
                                                                    const std::vector<const Mask*>& labels)
{
    const std::size_t b = images.size(), h = images[0]->height(), w = images[0]->width(), c = images[0]->channels();
    std::vector<float> x(b * c * h * w), t(labels.empty() ? 0 : b * h * w);
    for (std::size_t n = 0; n < b; ++n) {
        const auto& img = *images[n];
        for (std::size_t k = 0; k < c; ++k)
            for (std::size_t p = 0; p < h * w; ++p)
                x[(n * c + k) * h * w + p] = img.storage()[p * c + k];
        if (!labels.empty())
            for (std::size_t p = 0; p < h * w; ++p)
                t[n * h * w + p] = static_cast<float>(labels[n]->storage()[p]);
    }
    return {nn::Tensor<float>::from_values({b, c, h, w}, std::move(x)), std::move(t)};
}

/// Full-image probability map: edge-aligned tiles, overlaps averaged.
inline Image<float> predict_image(Net& net, const Image<float>& image, std::size_t patch, std::size_t stride,
                                  std::size_t batch_size)
{
    nn::NoGradGuard guard;
    const auto tiles = data::make_patches(image, Mask(image.height(), image.width(), 1), patch, stride);
    std::vector<std::pair<std::pair<std::size_t, std::size_t>, Image<float>>> probs;
    for (std::size_t start = 0; start < tiles.size(); start += batch_size) {
        const std::size_t end = std::min(tiles.size(), start + batch_size);
        std::vector<const Image<float>*> imgs;
        for (std::size_t i = start; i < end; ++i)
            imgs.push_back(&tiles[i].image);
        auto [x, unused] = make_batch(imgs, {});
        auto y = net.forward(x, false);
        for (std::size_t i = start; i < end; ++i) {
            const std::size_t off = (i - start) * patch * patch;
            std::vector<float> v(y.values().begin() + static_cast<std::ptrdiff_t>(off),
                                 y.values().begin() + static_cast<std::ptrdiff_t>(off + patch * patch));
            probs.push_back({{tiles[i].row, tiles[i].col}, Image<float>(patch, patch, 1, std::move(v))});
        }
    }
    return data::reassemble(probs, image.height(), image.width());
}

/// Pooled confusion counts of thresholded (p >= 0.5) predictions against the
/// majority labels.
inline metrics::ConfusionCounts evaluate(Net& net, std::span<const data::AnnotatedSample> samples, std::size_t patch,
                                         std::size_t stride, std::size_t batch_size)
{
    nn::FlushDenormalsGuard ftz;
    metrics::ConfusionCounts total;
    for (const auto& s : samples) {
        const auto prob = predict_image(net, s.image, patch, stride, batch_size);
        std::vector<std::uint8_t> pred(prob.size());
        for (std::size_t i = 0; i < prob.size(); ++i)
            pred[i] = prob.storage()[i] >= 0.5f ? 1 : 0;
        total += metrics::confusion(pred, s.majority_label.storage());
    }
    return total;
}

struct TrainResult {
    metrics::RunReport report;
    Checkpoint checkpoint; // best-validation weights as the current parameters
};

/// One seeded run. Epochs are numbered from 1. Every random stream is derived
/// from (seed, purpose, epoch, patch), so results do not depend on scheduling
/// and a run resumed from a checkpoint continues identically.
class Trainer {
public:
    /// Replaces the measured validation loss of an epoch (testing hook).
    std::function<double(int epoch, double measured)> val_loss_hook;
    /// Called after every completed epoch.
    std::function<void(int epoch, const Trainer&)> on_epoch;

    Trainer(const TrainConfig& cfg, const PreparedData& data, int m, std::uint64_t seed)
        : cfg_(cfg), data_(&data), m_(m), seed_(seed), lr_(cfg.lr0),
          net_(static_cast<int>(data.channels), m, cfg.use_batch_norm, seed)
    {
        validate(cfg_);
        val_idx_ = data::draw_validation(data.train_pool.size(), cfg.val_fraction, seed);
        std::vector<bool> is_val(data.train_pool.size(), false);
        for (auto i : val_idx_)
            is_val[i] = true;
        for (std::size_t i = 0; i < data.train_pool.size(); ++i)
            if (!is_val[i])
                train_idx_.push_back(i);
        if (val_idx_.empty() || train_idx_.empty())
            throw DataError("too few patches for a train/validation partition");
        params_ = tensors();
    }

    int epoch() const noexcept { return epoch_; }
    double lr() const noexcept { return lr_; }
    int best_epoch() const noexcept { return best_epoch_; }
    double best_val_loss() const noexcept { return best_loss_; }
    const std::vector<double>& history() const noexcept { return history_; }
    const std::vector<std::size_t>& validation_indices() const noexcept { return val_idx_; }
    Net& net() noexcept { return net_; }
    const Net& net() const noexcept { return net_; }

    bool finished() const
    {
        return epoch_ >= cfg_.max_epochs || nn::epochs_since_improvement(history_) >= cfg_.early_stop_patience;
    }

    /// Trains one epoch, validates, updates schedule and best snapshot.
    double run_epoch()
    {
        nn::FlushDenormalsGuard ftz;
        ++epoch_;
        std::vector<std::size_t> order = train_idx_;
        Rng shuffle_rng = make_rng(seed_, {0x5f1e, static_cast<std::uint64_t>(epoch_)});
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        const auto bs = static_cast<std::size_t>(cfg_.batch_size);
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t end = std::min(order.size(), start + bs);
            std::vector<data::AugmentedPair> aug;
            aug.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) {
                const auto& p = data_->train_pool[order[i]];
                Rng rng = make_rng(seed_, {0xa06, static_cast<std::uint64_t>(epoch_), order[i]});
                aug.push_back(data::augment(p.image, p.label, cfg_.augmentation, rng));
            }
            std::vector<const Image<float>*> imgs;
            std::vector<const Mask*> labs;
            for (const auto& a : aug) {
                imgs.push_back(&a.image);
                labs.push_back(&a.label);
            }
            auto [x, t] = make_batch(imgs, labs);
            for (auto& p : params_)
                p.zero_grad();
            auto loss = nn::dice_loss<float>(net_.forward(x, true), t);
            nn::backward(loss);
            nn::adam_step(params_, adam_, lr_, cfg_.weight_decay);
        }

        double val = validation_loss();
        if (val_loss_hook)
            val = val_loss_hook(epoch_, val);
        if (!std::isfinite(val))
            throw NumericError("validation loss is not finite at epoch " + std::to_string(epoch_));
        history_.push_back(val);
        if (val < best_loss_) {
            best_loss_ = val;
            best_epoch_ = epoch_;
            best_params_ = snapshot();
            best_buffers_ = buffer_snapshot();
        }
        lr_ = nn::plateau_scheduler(history_, lr_, {cfg_.plateau_patience, cfg_.lr_factor, cfg_.lr_min});
        if (on_epoch)
            on_epoch(epoch_, *this);
        return val;
    }

    /// Pooled soft Dice over the validation patches, without augmentation.
    double validation_loss()
    {
        nn::NoGradGuard guard;
        double inter = 0, sum_p = 0, sum_t = 0;
        const auto bs = static_cast<std::size_t>(cfg_.batch_size);
        for (std::size_t start = 0; start < val_idx_.size(); start += bs) {
            const std::size_t end = std::min(val_idx_.size(), start + bs);
            std::vector<const Image<float>*> imgs;
            std::vector<const Mask*> labs;
            for (std::size_t i = start; i < end; ++i) {
                imgs.push_back(&data_->train_pool[val_idx_[i]].image);
                labs.push_back(&data_->train_pool[val_idx_[i]].label);
            }
            auto [x, t] = make_batch(imgs, labs);
            auto y = net_.forward(x, false);
            for (std::size_t i = 0; i < t.size(); ++i) {
                inter += static_cast<double>(y.values()[i]) * t[i];
                sum_p += y.values()[i];
                sum_t += t[i];
            }
        }
        return 1 - (2 * inter + 1) / (sum_p + sum_t + 1);
    }

    /// Loads the best-validation parameters into the network.
    void restore_best()
    {
        if (best_params_.empty())
            throw NumericError("no completed epoch to restore");
        load_values(best_params_, best_buffers_);
    }

    metrics::ConfusionCounts evaluate_test()
    {
        return evaluate(net_, data_->test, static_cast<std::size_t>(cfg_.patch_size),
                        static_cast<std::size_t>(cfg_.eval_stride), static_cast<std::size_t>(cfg_.batch_size));
    }

    Checkpoint checkpoint() const
    {
        Checkpoint ck;
        auto& meta = ck.meta;
        meta["kind"] = "lefm-train";
        meta["version"] = kVersion;
        meta["config_hash"] = config_hash(cfg_);
        meta["config"] = to_kv(cfg_);
        meta["seed"] = seed_;
        meta["m"] = m_;
        meta["d"] = data_->channels;
        meta["use_batch_norm"] = cfg_.use_batch_norm;
        meta["epoch"] = epoch_;
        meta["lr"] = lr_;
        meta["history"] = history_;
        meta["best_epoch"] = best_epoch_;
        meta["best_val_loss"] = std::isfinite(best_loss_) ? nlohmann::json(best_loss_) : nlohmann::json(nullptr);
        meta["adam_step"] = adam_.step;
        meta["precision"] = "float32";
        if (net_.has_lefm())
            meta["table"] = net_.lefm().table;
        const auto named = net_.parameters();
        for (std::size_t k = 0; k < named.size(); ++k) {
            const auto& t = named[k].tensor;
            ck.add("param/" + named[k].name, t.shape(), t.values());
            if (!adam_.first_moment.empty()) {
                ck.add("adam.m/" + named[k].name, t.shape(), adam_.first_moment[k]);
                ck.add("adam.v/" + named[k].name, t.shape(), adam_.second_moment[k]);
            }
            if (!best_params_.empty())
                ck.add("best/" + named[k].name, t.shape(), best_params_[k]);
        }
        auto bufs = const_cast<Net&>(net_).buffers();
        for (std::size_t k = 0; k < bufs.size(); ++k) {
            ck.add("buffer/" + bufs[k].first, {bufs[k].second->size()}, *bufs[k].second);
            if (!best_buffers_.empty())
                ck.add("best_buffer/" + bufs[k].first, {bufs[k].second->size()}, best_buffers_[k]);
        }
        return ck;
    }

    /// Continues from a checkpoint written by the same configuration and seed.
    void resume(const Checkpoint& ck)
    {
        const auto& meta = ck.meta;
        if (meta.value("config_hash", "") != config_hash(cfg_))
            throw ConfigError("checkpoint was written with a different configuration");
        if (meta.value("seed", std::uint64_t{0}) != seed_ || meta.value("m", -1) != m_)
            throw ConfigError("checkpoint seed or order does not match this run");
        epoch_ = meta.at("epoch").get<int>();
        lr_ = meta.at("lr").get<double>();
        history_ = meta.at("history").get<std::vector<double>>();
        best_epoch_ = meta.at("best_epoch").get<int>();
        best_loss_ = meta.at("best_val_loss").is_null() ? std::numeric_limits<double>::infinity()
                                                         : meta.at("best_val_loss").get<double>();
        adam_ = {};
        adam_.step = meta.at("adam_step").get<std::int64_t>();
        const auto named = net_.parameters();
        best_params_.clear();
        for (const auto& p : named) {
            if (adam_.step > 0) {
                adam_.first_moment.push_back(as<float>(ck.at("adam.m/" + p.name), p.tensor.numel()));
                adam_.second_moment.push_back(as<float>(ck.at("adam.v/" + p.name), p.tensor.numel()));
            }
            if (ck.find("best/" + p.name))
                best_params_.push_back(as<float>(ck.at("best/" + p.name), p.tensor.numel()));
        }
        best_buffers_.clear();
        for (const auto& [name, buf] : net_.buffers())
            if (ck.find("best_buffer/" + name))
                best_buffers_.push_back(as<float>(ck.at("best_buffer/" + name), buf->size()));
        load_parameters(net_, ck, "param/", "buffer/");
    }

    /// Copies arrays `<prefix><name>` into the network.
    static void load_parameters(Net& net, const Checkpoint& ck, const std::string& prefix, const std::string& buffer_prefix)
    {
        for (auto& p : net.parameters()) {
            auto v = as<float>(ck.at(prefix + p.name), p.tensor.numel());
            std::copy(v.begin(), v.end(), p.tensor.values().begin());
        }
        for (auto& [name, buf] : net.buffers())
            *buf = as<float>(ck.at(buffer_prefix + name), buf->size());
    }

private:
    template <typename T>
    static std::vector<T> as(const NamedArray& a, std::size_t expected)
    {
        if (a.values.size() != expected)
            throw DataError("checkpoint array " + a.name + " has " + std::to_string(a.values.size()) +
                            " values, expected " + std::to_string(expected));
        return std::vector<T>(a.values.begin(), a.values.end());
    }

    std::vector<nn::Tensor<float>> tensors() const
    {
        std::vector<nn::Tensor<float>> out;
        for (auto& p : net_.parameters())
            out.push_back(p.tensor);
        return out;
    }

    std::vector<std::vector<float>> snapshot() const
    {
        std::vector<std::vector<float>> out;
        for (const auto& p : params_)
            out.emplace_back(p.values().begin(), p.values().end());
        return out;
    }

    std::vector<std::vector<float>> buffer_snapshot()
    {
        std::vector<std::vector<float>> out;
        for (auto& [name, buf] : net_.buffers())
            out.push_back(*buf);
        return out;
    }

    void load_values(const std::vector<std::vector<float>>& values, const std::vector<std::vector<float>>& buffers)
    {
        for (std::size_t k = 0; k < params_.size(); ++k)
            std::copy(values[k].begin(), values[k].end(), params_[k].values().begin());
        auto bufs = net_.buffers();
        for (std::size_t k = 0; k < bufs.size() && k < buffers.size(); ++k)
            *bufs[k].second = buffers[k];
    }

    TrainConfig cfg_;
    const PreparedData* data_;
    int m_;
    std::uint64_t seed_;
    double lr_;
    Net net_;
    std::vector<nn::Tensor<float>> params_;
    nn::AdamState<float> adam_;
    std::vector<std::size_t> val_idx_, train_idx_;
    int epoch_ = 0;
    std::vector<double> history_;
    double best_loss_ = std::numeric_limits<double>::infinity();
    int best_epoch_ = 0;
    std::vector<std::vector<float>> best_params_, best_buffers_;
};

/// Trains to early stop or the epoch cap, restores the best-validation
/// weights and evaluates on the test images. Numeric failures are reported as
/// a failed run rather than thrown.
inline TrainResult train_one(const TrainConfig& cfg, const PreparedData& data, int m, std::uint64_t seed,
                             const std::function<void(Trainer&)>& setup = {})
{
    const auto start = std::chrono::steady_clock::now();
    TrainResult result;
    auto& r = result.report;
    r.model = metrics::model_name(m);
    r.m = m;
    r.seed = seed;
    r.config_hash = config_hash(cfg);
    r.version = kVersion;
    r.prenormalized = cfg.prenormalized;
    Trainer trainer(cfg, data, m, seed);
    if (setup)
        setup(trainer);
    try {
        while (!trainer.finished())
            trainer.run_epoch();
        trainer.restore_best();
        r.set_counts(trainer.evaluate_test());
        r.best_epoch = trainer.best_epoch();
        r.best_val_loss = trainer.best_val_loss();
    } catch (const NumericError& e) {
        r.status = "failed";
        r.message = e.what();
        r.set_counts({});
    }
    r.epochs = trainer.epoch();
    result.checkpoint = trainer.checkpoint();
    result.checkpoint.meta["status"] = r.status;
    r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

/// Rebuilds the network stored in a checkpoint (current parameters).
inline Net load_network(const Checkpoint& ck)
{
    const auto& meta = ck.meta;
    if (meta.value("kind", "") != "lefm-train")
        throw DataError("checkpoint is not a training checkpoint");
    Net net(meta.at("d").get<int>(), meta.at("m").get<int>(), meta.at("use_batch_norm").get<bool>(),
            meta.at("seed").get<std::uint64_t>());
    Trainer::load_parameters(net, ck, "param/", "buffer/");
    return net;
}

} // namespace lefm::train
