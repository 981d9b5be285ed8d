#pragma once

#include <unordered_map>
#include <vector>

#include "flat/lattice.hpp"

namespace flat {

// The four relative distances between span pairs, S x S row-major.
struct DistanceMatrices {
  int size = 0;
  std::vector<int> hh, ht, th, tt;

  int at(const std::vector<int>& m, int i, int j) const {
    return m[static_cast<size_t>(i) * size + j];
  }
};

DistanceMatrices distances(const FlatLattice& flat);

// Sinusoidal embedding of a signed distance: even components
// sin(d / 10000^(2k/d_model)), odd components cos of the same argument.
// d_model must be even.
std::vector<double> sinusoid(int d, int d_model);

// Lazily grown memo of sinusoid vectors keyed by distance. Not thread-safe;
// use one per call site or per worker.
class SinusoidTable {
 public:
  explicit SinusoidTable(int d_model);
  const std::vector<double>& get(int d);
  int d_model() const { return d_model_; }

 private:
  int d_model_;
  std::unordered_map<int, std::vector<double>> cache_;
};

// Per-pair concatenation (p_hh, p_th, p_ht, p_tt), S*S x 4*d_model
// row-major: the input of the fusion map. Sinusoids are computed once per
// distinct distance value.
std::vector<double> fused_position_input(const DistanceMatrices& dm,
                                         int d_model);
std::vector<double> fused_position_input(const DistanceMatrices& dm,
                                         SinusoidTable& table);

struct RelPosEncoding {
  int size = 0;
  int d_model = 0;
  std::vector<double> values;  // S*S*d_model row-major

  const double* at(int i, int j) const {
    return values.data() +
           (static_cast<size_t>(i) * size + j) * d_model;
  }
};

// R[i][j] = relu(W_r * concat(p_hh, p_th, p_ht, p_tt)), with w_r given
// row-major as d_model x 4*d_model.
RelPosEncoding fuse(const DistanceMatrices& dm, const std::vector<double>& w_r,
                    int d_model);

}  // namespace flat
