#include "flat/metrics.hpp"

#include <algorithm>
#include <set>

namespace flat {

namespace {

std::vector<Entity> dedupe(const std::vector<Entity>& in) {
  std::vector<Entity> out = in;
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

Prf prf_from_counts(long gold, long pred, long match) {
  Prf m;
  if (pred == 0 && gold == 0) {
    m.precision = m.recall = m.f1 = 1.0;
    return m;
  }
  m.precision = pred == 0 ? 0.0 : static_cast<double>(match) / pred;
  m.recall = gold == 0 ? 0.0 : static_cast<double>(match) / gold;
  m.f1 = (m.precision + m.recall) > 0.0
             ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
             : 0.0;
  return m;
}

}  // namespace

void EntityCounts::add(const std::vector<Entity>& gold_set,
                       const std::vector<Entity>& pred_set) {
  std::vector<Entity> g = dedupe(gold_set);
  std::vector<Entity> p = dedupe(pred_set);
  gold += static_cast<long>(g.size());
  pred += static_cast<long>(p.size());

  std::set<Entity> gset(g.begin(), g.end());
  std::set<std::pair<int, int>> gspans;
  for (const Entity& e : g) gspans.emplace(e.start, e.end);
  std::set<std::pair<int, int>> pspans;
  for (const Entity& e : p) pspans.emplace(e.start, e.end);

  span_gold += static_cast<long>(gspans.size());
  span_pred += static_cast<long>(pspans.size());
  for (const auto& s : pspans)
    if (gspans.count(s)) ++span_match;

  for (const Entity& e : p) {
    if (gset.count(e)) {
      ++exact_match;
      ++full_correct_preds;
    }
    if (gspans.count({e.start, e.end})) ++span_correct_preds;
  }
}

Prf EntityCounts::exact() const { return prf_from_counts(gold, pred, exact_match); }

Prf EntityCounts::span() const {
  return prf_from_counts(span_gold, span_pred, span_match);
}

double EntityCounts::type_acc() const {
  if (span_correct_preds == 0) return 1.0;
  return static_cast<double>(full_correct_preds) / span_correct_preds;
}

Prf f1_score(const std::vector<Entity>& gold,
             const std::vector<Entity>& pred) {
  EntityCounts c;
  c.add(gold, pred);
  return c.exact();
}

Prf span_f(const std::vector<Entity>& gold, const std::vector<Entity>& pred) {
  EntityCounts c;
  c.add(gold, pred);
  return c.span();
}

double type_acc(const std::vector<Entity>& gold,
                const std::vector<Entity>& pred) {
  EntityCounts c;
  c.add(gold, pred);
  return c.type_acc();
}

}  // namespace flat
