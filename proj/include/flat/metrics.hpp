#pragma once

#include <vector>

#include "flat/data.hpp"

namespace flat {

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Aggregated entity-match counts across sentences. Predicted duplicates are
// deduplicated before counting.
struct EntityCounts {
  long gold = 0;
  long pred = 0;
  long exact_match = 0;
  long span_gold = 0;
  long span_pred = 0;
  long span_match = 0;
  long span_correct_preds = 0;  // predictions whose span matches some gold span
  long full_correct_preds = 0;  // predictions matching span and type

  void add(const std::vector<Entity>& gold_set,
           const std::vector<Entity>& pred_set);

  Prf exact() const;
  Prf span() const;
  double type_acc() const;  // 1.0 when no prediction is span-correct
};

// Exact-match micro-averaged precision/recall/F1 for one sentence pair.
// Both sets empty scores 1.0 by convention.
Prf f1_score(const std::vector<Entity>& gold, const std::vector<Entity>& pred);

// F1 over (start, end) only, ignoring the entity type.
Prf span_f(const std::vector<Entity>& gold, const std::vector<Entity>& pred);

// Fraction of span-correct predictions whose type is also correct.
double type_acc(const std::vector<Entity>& gold,
                const std::vector<Entity>& pred);

}  // namespace flat
