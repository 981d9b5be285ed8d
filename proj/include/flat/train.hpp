#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "flat/data.hpp"
#include "flat/metrics.hpp"
#include "flat/model.hpp"

namespace flat {

struct TrainConfig {
  int batch_size = 10;
  double lr = 1e-3;
  double lr_decay = 0.05;
  double momentum = 0.9;
  int warmup_epochs = 10;
  int max_epochs = 100;
  uint64_t seed = 1;
  double grad_clip = 0.0;     // 0 disables clipping
  double stop_at_dev_f1 = -1.0;  // stop early once dev F1 reaches this

  void validate() const;
};

// Linear warmup to lr over warmup_epochs (the first epoch already trains at
// lr/warmup), then inverse-time decay lr / (1 + decay * epochs_past_warmup).
double lr_schedule(const TrainConfig& config, int epoch);

// Textbook SGD with momentum: v <- mu*v - lr*g; theta <- theta + v.
class SgdMomentum {
 public:
  SgdMomentum(nn::ParameterStore& params, double momentum, double grad_clip);
  void step(double lr);

 private:
  nn::ParameterStore& params_;
  double momentum_;
  double grad_clip_;
  std::vector<std::vector<double>> velocity_;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double dev_f1 = 0.0;
  bool has_dev = false;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  double best_dev_f1 = 0.0;
  int best_epoch = -1;
  bool diverged = false;
  int epochs_run = 0;
};

// Computes entity F1 of the model's predictions against the encoded corpus.
double evaluate_f1(const FlatModel& model, const EncodedCorpus& corpus,
                   const Vocab& vocab, TagScheme scheme);

EntityCounts evaluate_counts(const FlatModel& model,
                             const EncodedCorpus& corpus, const Vocab& vocab,
                             TagScheme scheme);

// Full loop: shuffled mini-batches, NLL loss, SGD with momentum under the
// warmup/decay schedule, per-epoch dev scoring and best-checkpoint
// retention. When checkpoint_path is non-empty the best parameters are
// saved there and reloaded at the end, so the logged final score is the
// checkpoint's. A NaN loss aborts, restoring the last good parameters.
TrainResult train_model(FlatModel& model, const EncodedCorpus& train,
                        const EncodedCorpus* dev, const Vocab& vocab,
                        TagScheme scheme, const TrainConfig& config,
                        const std::string& checkpoint_path,
                        std::ostream* log);

}  // namespace flat
