#include "flat/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include <json.hpp>

namespace flat {

void TrainConfig::validate() const {
  require(batch_size >= 1, "train config: batch_size must be positive");
  require(lr >= 0.0, "train config: lr must be >= 0");
  require(lr_decay >= 0.0, "train config: lr_decay must be >= 0");
  require(momentum >= 0.0 && momentum < 1.0,
          "train config: momentum must be in [0,1)");
  require(warmup_epochs >= 1, "train config: warmup_epochs must be >= 1");
  require(max_epochs >= 0, "train config: max_epochs must be >= 0");
  require(grad_clip >= 0.0, "train config: grad_clip must be >= 0");
}

double lr_schedule(const TrainConfig& config, int epoch) {
  require(epoch >= 0, "lr_schedule: epoch must be >= 0");
  if (epoch < config.warmup_epochs)
    return config.lr * (epoch + 1) / config.warmup_epochs;
  return config.lr / (1.0 + config.lr_decay * (epoch - config.warmup_epochs));
}

SgdMomentum::SgdMomentum(nn::ParameterStore& params, double momentum,
                         double grad_clip)
    : params_(params), momentum_(momentum), grad_clip_(grad_clip) {
  for (const std::string& name : params_.names())
    velocity_.emplace_back(params_.get(name).size(), 0.0);
}

void SgdMomentum::step(double lr) {
  double clip_scale = 1.0;
  if (grad_clip_ > 0.0) {
    double sq = 0.0;
    for (const std::string& name : params_.names())
      for (double g : params_.get(name).grad()) sq += g * g;
    double norm = std::sqrt(sq);
    if (norm > grad_clip_) clip_scale = grad_clip_ / norm;
  }
  size_t k = 0;
  for (const std::string& name : params_.names()) {
    nn::Tensor t = params_.get(name);
    std::vector<double>& v = velocity_[k++];
    std::vector<double>& theta = t.values();
    const std::vector<double>& g = t.grad();
    for (size_t i = 0; i < theta.size(); ++i) {
      v[i] = momentum_ * v[i] - lr * clip_scale * g[i];
      theta[i] += v[i];
    }
  }
}

EntityCounts evaluate_counts(const FlatModel& model,
                             const EncodedCorpus& corpus, const Vocab& vocab,
                             TagScheme scheme) {
  EntityCounts counts;
  for (size_t s = 0; s < corpus.lattices.size(); ++s) {
    std::vector<int> pred = model.predict(corpus.lattices[s]);
    std::vector<std::string> tag_names;
    tag_names.reserve(pred.size());
    for (int id : pred) tag_names.push_back(vocab.tag_name(id));
    counts.add(corpus.entities[s], tags_to_entities(tag_names, scheme));
  }
  return counts;
}

double evaluate_f1(const FlatModel& model, const EncodedCorpus& corpus,
                   const Vocab& vocab, TagScheme scheme) {
  return evaluate_counts(model, corpus, vocab, scheme).exact().f1;
}

namespace {

void log_record(std::ostream* log, const EpochRecord& r) {
  if (!log) return;
  nlohmann::json j = {{"epoch", r.epoch}, {"lr", r.lr}, {"loss", r.loss}};
  if (r.has_dev) j["dev_f1"] = r.dev_f1;
  (*log) << j.dump() << "\n";
}

}  // namespace

TrainResult train_model(FlatModel& model, const EncodedCorpus& train,
                        const EncodedCorpus* dev, const Vocab& vocab,
                        TagScheme scheme, const TrainConfig& config,
                        const std::string& checkpoint_path,
                        std::ostream* log) {
  config.validate();
  require(!train.lattices.empty(), "train_model: empty training set");

  Rng rng(config.seed);
  nn::ParameterStore& params = model.params();
  SgdMomentum optimizer(params, config.momentum, config.grad_clip);

  TrainResult result;
  auto best_snapshot = params.snapshot();
  auto last_good = best_snapshot;
  double best_key = -std::numeric_limits<double>::infinity();

  std::vector<size_t> order(train.lattices.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    double lr = lr_schedule(config, epoch);
    // Fisher-Yates shuffle with the run's rng.
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_int(static_cast<int>(i))]);

    double epoch_loss = 0.0;
    bool diverged = false;
    for (size_t b = 0; b < order.size(); b += config.batch_size) {
      size_t end = std::min(order.size(), b + config.batch_size);
      params.zero_grad();
      nn::Tensor sum;
      for (size_t k = b; k < end; ++k) {
        size_t s = order[k];
        nn::Tensor li =
            model.nll(train.lattices[s], train.tag_ids[s], nn::Mode::train(rng));
        sum = sum.defined() ? nn::add(sum, li) : li;
      }
      nn::Tensor loss = nn::scale(sum, 1.0 / static_cast<double>(end - b));
      if (!std::isfinite(loss.item())) {
        diverged = true;
        break;
      }
      nn::backward(loss);
      optimizer.step(lr);
      epoch_loss += loss.item() * static_cast<double>(end - b);
    }

    if (diverged) {
      params.restore(last_good);
      result.diverged = true;
      if (log)
        (*log) << nlohmann::json(
                      {{"epoch", epoch},
                       {"error",
                        "loss is not finite; restored last good parameters"}})
                      .dump()
               << "\n";
      break;
    }

    EpochRecord record;
    record.epoch = epoch;
    record.lr = lr;
    record.loss = epoch_loss / static_cast<double>(train.lattices.size());
    double key = -record.loss;
    if (dev) {
      record.has_dev = true;
      record.dev_f1 = evaluate_f1(model, *dev, vocab, scheme);
      key = record.dev_f1;
    }
    result.history.push_back(record);
    result.epochs_run = epoch + 1;
    log_record(log, record);

    last_good = params.snapshot();
    if (key > best_key) {
      best_key = key;
      best_snapshot = last_good;
      result.best_epoch = epoch;
      result.best_dev_f1 = record.dev_f1;
    }
    if (dev && config.stop_at_dev_f1 >= 0.0 &&
        record.dev_f1 >= config.stop_at_dev_f1)
      break;
  }

  params.restore(best_snapshot);
  if (!checkpoint_path.empty()) {
    params.save(checkpoint_path);
    // Reload so the reported score is exactly the checkpoint's, including
    // the 32-bit storage rounding.
    params.load(checkpoint_path);
  }
  if (dev) {
    result.best_dev_f1 = evaluate_f1(model, *dev, vocab, scheme);
    if (log)
      (*log) << nlohmann::json({{"best_epoch", result.best_epoch},
                                {"best_dev_f1", result.best_dev_f1}})
                    .dump()
             << "\n";
  }
  return result;
}

}  // namespace flat
