#include "flat/position.hpp"

#include <cmath>

namespace flat {

DistanceMatrices distances(const FlatLattice& flat) {
  int s = flat.size();
  DistanceMatrices dm;
  dm.size = s;
  dm.hh.resize(static_cast<size_t>(s) * s);
  dm.ht.resize(static_cast<size_t>(s) * s);
  dm.th.resize(static_cast<size_t>(s) * s);
  dm.tt.resize(static_cast<size_t>(s) * s);
  for (int i = 0; i < s; ++i) {
    const Span& a = flat.spans[i];
    for (int j = 0; j < s; ++j) {
      const Span& b = flat.spans[j];
      size_t k = static_cast<size_t>(i) * s + j;
      dm.hh[k] = a.head - b.head;
      dm.ht[k] = a.head - b.tail;
      dm.th[k] = a.tail - b.head;
      dm.tt[k] = a.tail - b.tail;
    }
  }
  return dm;
}

std::vector<double> sinusoid(int d, int d_model) {
  require(d_model >= 2 && d_model % 2 == 0,
          "sinusoid: d_model must be even and >= 2, got " +
              std::to_string(d_model));
  std::vector<double> p(d_model);
  for (int k = 0; 2 * k < d_model; ++k) {
    double arg = d / std::pow(10000.0, (2.0 * k) / d_model);
    p[2 * k] = std::sin(arg);
    p[2 * k + 1] = std::cos(arg);
  }
  return p;
}

SinusoidTable::SinusoidTable(int d_model) : d_model_(d_model) {
  require(d_model >= 2 && d_model % 2 == 0,
          "SinusoidTable: d_model must be even and >= 2");
}

const std::vector<double>& SinusoidTable::get(int d) {
  auto it = cache_.find(d);
  if (it != cache_.end()) return it->second;
  return cache_.emplace(d, sinusoid(d, d_model_)).first->second;
}

std::vector<double> fused_position_input(const DistanceMatrices& dm,
                                         SinusoidTable& table) {
  int s = dm.size;
  int d_model = table.d_model();
  std::vector<double> out(static_cast<size_t>(s) * s * 4 * d_model);
  const std::vector<int>* blocks[4] = {&dm.hh, &dm.th, &dm.ht, &dm.tt};
  for (int i = 0; i < s; ++i) {
    for (int j = 0; j < s; ++j) {
      size_t pair = static_cast<size_t>(i) * s + j;
      double* row = out.data() + pair * 4 * d_model;
      for (int b = 0; b < 4; ++b) {
        const std::vector<double>& p = table.get((*blocks[b])[pair]);
        std::copy(p.begin(), p.end(), row + b * d_model);
      }
    }
  }
  return out;
}

std::vector<double> fused_position_input(const DistanceMatrices& dm,
                                         int d_model) {
  SinusoidTable table(d_model);
  return fused_position_input(dm, table);
}

RelPosEncoding fuse(const DistanceMatrices& dm, const std::vector<double>& w_r,
                    int d_model) {
  int s = dm.size;
  size_t in_dim = 4 * static_cast<size_t>(d_model);
  require(w_r.size() == static_cast<size_t>(d_model) * in_dim,
          "fuse: w_r must be d_model x 4*d_model");

  std::vector<double> input = fused_position_input(dm, d_model);
  RelPosEncoding enc;
  enc.size = s;
  enc.d_model = d_model;
  enc.values.assign(static_cast<size_t>(s) * s * d_model, 0.0);
  for (size_t pair = 0; pair < static_cast<size_t>(s) * s; ++pair) {
    const double* x = input.data() + pair * in_dim;
    double* r = enc.values.data() + pair * d_model;
    for (int row = 0; row < d_model; ++row) {
      const double* w = w_r.data() + static_cast<size_t>(row) * in_dim;
      double acc = 0.0;
      for (size_t k = 0; k < in_dim; ++k) acc += w[k] * x[k];
      r[row] = acc > 0.0 ? acc : 0.0;
    }
  }
  return enc;
}

}  // namespace flat
