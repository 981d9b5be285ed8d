#include "flat/bench.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <thread>

namespace flat {

FlatLattice pad_lattice(const FlatLattice& flat, int target_spans) {
  require(target_spans >= flat.size(), "pad_lattice: target below span count");
  FlatLattice padded = flat;
  padded.spans.reserve(target_spans);
  // Padding spans carry the PAD token id and are fully masked out.
  for (int k = flat.size(); k < target_spans; ++k)
    padded.spans.push_back(Span{0, SpanKind::Word, 0, 0});
  return padded;
}

std::vector<std::vector<int>> predict_batch(
    const FlatModel& model, const std::vector<FlatLattice>& sentences,
    int batch_size, int workers) {
  require(batch_size >= 1, "predict_batch: batch_size must be positive");
  require(workers >= 1, "predict_batch: workers must be positive");
  std::vector<std::vector<int>> results(sentences.size());

  for (size_t b = 0; b < sentences.size(); b += batch_size) {
    size_t end = std::min(sentences.size(), b + batch_size);
    int max_spans = 0;
    for (size_t k = b; k < end; ++k)
      max_spans = std::max(max_spans, sentences[k].size());

    auto run_one = [&](size_t k) {
      const FlatLattice& flat = sentences[k];
      if (flat.size() == max_spans) {
        results[k] = model.predict(flat);
      } else {
        FlatLattice padded = pad_lattice(flat, max_spans);
        results[k] = model.predict(padded, flat.size());
      }
    };

    int n_workers = std::min<int>(workers, static_cast<int>(end - b));
    if (n_workers <= 1) {
      for (size_t k = b; k < end; ++k) run_one(k);
    } else {
      std::atomic<size_t> next(b);
      std::vector<std::thread> pool;
      pool.reserve(n_workers);
      for (int w = 0; w < n_workers; ++w)
        pool.emplace_back([&]() {
          for (size_t k = next.fetch_add(1); k < end; k = next.fetch_add(1))
            run_one(k);
        });
      for (auto& t : pool) t.join();
    }
  }
  return results;
}

namespace {

double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace

BenchReport run_bench(FlatModel& model,
                      const std::vector<FlatLattice>& sentences,
                      const BenchConfig& config) {
  require(!sentences.empty(), "run_bench: no sentences");
  require(config.trials >= 1, "run_bench: need at least one trial");

  BenchReport report;
  report.workers = config.workers;
  report.sentences = static_cast<int>(sentences.size());
  report.trials = config.trials;

  uint64_t checksum_before = model.params().checksum();
  double sps_1 = 0.0, sps_16 = 0.0;

  for (int bs : config.batch_sizes) {
    for (int w = 0; w < config.warmup; ++w)
      predict_batch(model, sentences, bs, config.workers);

    std::vector<double> times;
    times.reserve(config.trials);
    for (int t = 0; t < config.trials; ++t) {
      auto start = std::chrono::steady_clock::now();
      predict_batch(model, sentences, bs, config.workers);
      auto stop = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double>(stop - start).count());
    }
    BenchRow row;
    row.batch_size = bs;
    row.median_seconds = median(times);
    row.sentences_per_sec =
        static_cast<double>(sentences.size()) / row.median_seconds;
    if (bs == 1) sps_1 = row.sentences_per_sec;
    if (bs == 16) sps_16 = row.sentences_per_sec;
    report.rows.push_back(row);
  }

  if (sps_1 > 0.0 && sps_16 > 0.0) report.speedup_16_vs_1 = sps_16 / sps_1;
  report.checksum_ok = model.params().checksum() == checksum_before;
  return report;
}

}  // namespace flat
