#include "mic/tensor_ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace mic {

namespace {

void require_hidden(const Tensor& h, const SequenceMask& m) {
  h.require_rank(3, "hidden states");
  m.require_matches(h);
  m.require_nonempty();
}

}  // namespace

Tensor slice_features(const Tensor& t, std::size_t begin, std::size_t end) {
  if (t.rank() < 1) throw ContractError("slice_features on a scalar");
  const std::size_t width = t.shape().back();
  if (begin >= end || end > width) {
    throw InvalidDimension("feature slice [" + std::to_string(begin) + ", " +
                           std::to_string(end) + ") invalid for width " +
                           std::to_string(width));
  }
  Shape shape = t.shape();
  shape.back() = end - begin;
  Tensor out(shape);
  const std::size_t rows = t.numel() / width;
  const std::size_t w = end - begin;
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(t.data().begin() + r * width + begin, w,
                out.data().begin() + r * w);
  }
  return out;
}

std::pair<Tensor, Tensor> split_prefix_residual(const Tensor& h, std::size_t d) {
  h.require_rank(3, "split_prefix_residual");
  const std::size_t full = h.dim(2);
  if (d == 0 || d >= full) {
    throw InvalidDimension("split dimension " + std::to_string(d) +
                           " must satisfy 0 < d < " + std::to_string(full));
  }
  return {slice_features(h, 0, d), slice_features(h, d, full)};
}

Tensor concat_features(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || a.rank() == 0 ||
      !std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin())) {
    throw ContractError("concat_features: incompatible shapes " +
                        shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t wa = a.shape().back();
  const std::size_t wb = b.shape().back();
  Shape shape = a.shape();
  shape.back() = wa + wb;
  Tensor out(shape);
  const std::size_t rows = wa ? a.numel() / wa : 0;
  for (std::size_t r = 0; r < rows; ++r) {
    auto dst = out.data().begin() + r * (wa + wb);
    std::copy_n(a.data().begin() + r * wa, wa, dst);
    std::copy_n(b.data().begin() + r * wb, wb, dst + wa);
  }
  return out;
}

MaskedMoments masked_moments(const Tensor& h, const SequenceMask& m) {
  require_hidden(h, m);
  const std::size_t B = h.dim(0), L = h.dim(1), D = h.dim(2);
  Tensor means({B, D}), vars({B, D});
  for (std::size_t i = 0; i < B; ++i) {
    const double inv_n = 1.0 / static_cast<double>(m.count(i));
    // Offsets from the first valid token.
    std::size_t first = 0;
    while (!m.active(i, first)) ++first;
    for (std::size_t l = 0; l < L; ++l) {
      if (!m.active(i, l)) continue;
      for (std::size_t j = 0; j < D; ++j) means.at(i, j) += h.at(i, l, j) - h.at(i, first, j);
    }
    for (std::size_t j = 0; j < D; ++j) means.at(i, j) = h.at(i, first, j) + means.at(i, j) * inv_n;
    for (std::size_t l = 0; l < L; ++l) {
      if (!m.active(i, l)) continue;
      for (std::size_t j = 0; j < D; ++j) {
        const double c = h.at(i, l, j) - means.at(i, j);
        vars.at(i, j) += c * c;
      }
    }
    for (std::size_t j = 0; j < D; ++j) vars.at(i, j) *= inv_n;
  }
  return {std::move(means), std::move(vars)};
}

Tensor masked_std(const Tensor& h, const SequenceMask& m) {
  Tensor sd = masked_moments(h, m).vars;
  for (double& v : sd.vec()) v = std::sqrt(v);
  return sd;
}

Tensor masked_standardize(const Tensor& h, const SequenceMask& m,
                          EpsilonPolicy eps) {
  auto [means, vars] = masked_moments(h, m);
  const std::size_t B = h.dim(0), L = h.dim(1), D = h.dim(2);
  Tensor out(h.shape());
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t l = 0; l < L; ++l) {
      if (!m.active(i, l)) continue;
      for (std::size_t j = 0; j < D; ++j) {
        out.at(i, l, j) = (h.at(i, l, j) - means.at(i, j)) /
                          (std::sqrt(vars.at(i, j)) + eps.value());
      }
    }
  }
  return out;
}

Tensor masked_mean_pool(const Tensor& h, const SequenceMask& m) {
  require_hidden(h, m);
  const std::size_t B = h.dim(0), L = h.dim(1), D = h.dim(2);
  Tensor out({B, D});
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t l = 0; l < L; ++l) {
      if (!m.active(i, l)) continue;
      for (std::size_t j = 0; j < D; ++j) out.at(i, j) += h.at(i, l, j);
    }
    const double inv_n = 1.0 / static_cast<double>(m.count(i));
    for (std::size_t j = 0; j < D; ++j) out.at(i, j) *= inv_n;
  }
  return out;
}

RowNormalized row_normalize(const Tensor& z, EpsilonPolicy eps) {
  z.require_rank(2, "row_normalize");
  const std::size_t R = z.dim(0), C = z.dim(1);
  RowNormalized result{Tensor(z.shape()), {}};
  for (std::size_t i = 0; i < R; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < C; ++j) sq += z.at(i, j) * z.at(i, j);
    double norm = std::sqrt(sq);
    if (norm < eps.value()) {
      norm = eps.value();
      result.degenerate.push_back(i);
    }
    for (std::size_t j = 0; j < C; ++j) result.rows.at(i, j) = z.at(i, j) / norm;
  }
  return result;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  a.require_rank(2, "matmul lhs");
  b.require_rank(2, "matmul rhs");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) {
    throw ContractError("matmul: inner dimensions differ " +
                        shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.at(i, p);
      const double* brow = b.data().data() + p * m;
      double* orow = out.data().data() + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  a.require_rank(2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
  }
  return out;
}

}  // namespace mic
