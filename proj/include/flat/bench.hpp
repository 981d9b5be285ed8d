#pragma once

#include <vector>

#include "flat/model.hpp"

namespace flat {

// Pads a lattice with masked-out word spans so that it has target_spans
// spans in total. Padding never changes the character rows.
FlatLattice pad_lattice(const FlatLattice& flat, int target_spans);

// Batched inference: sentences are grouped into batches, padded to the
// batch's maximum span count, and fanned out across workers. Results are
// position-stable and must equal one-by-one prediction exactly.
std::vector<std::vector<int>> predict_batch(
    const FlatModel& model, const std::vector<FlatLattice>& sentences,
    int batch_size, int workers = 1);

struct BenchConfig {
  std::vector<int> batch_sizes{1, 16};
  int trials = 5;
  int warmup = 1;
  int workers = 1;
};

struct BenchRow {
  int batch_size = 0;
  double sentences_per_sec = 0.0;
  double median_seconds = 0.0;
};

// Batch-16 over batch-1 speedup reported in the original evaluation, kept
// in the report for comparison only; it is hardware-dependent and never a
// pass/fail threshold.
constexpr double kReferenceBatch16Speedup = 4.97;

struct BenchReport {
  std::vector<BenchRow> rows;
  double speedup_16_vs_1 = 0.0;  // 0 when either batch size is missing
  int workers = 1;
  int sentences = 0;
  int trials = 0;
  bool checksum_ok = false;
  double reference_ratio = kReferenceBatch16Speedup;
};

BenchReport run_bench(FlatModel& model,
                      const std::vector<FlatLattice>& sentences,
                      const BenchConfig& config);

}  // namespace flat
