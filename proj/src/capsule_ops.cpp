#include "gcaps/capsule_ops.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "gcaps/ops.hpp"
#include "gemm.hpp"
#include "grad_sink.hpp"

namespace gcaps {

using detail::grad_sink;

TypePartition TypePartition::uniform(std::size_t num_types, std::size_t caps_per_type) {
  std::vector<Group> groups;
  groups.reserve(num_types);
  for (std::size_t t = 0; t < num_types; ++t) groups.push_back({t * caps_per_type, (t + 1) * caps_per_type});
  return TypePartition(std::move(groups));
}

void TypePartition::validate(std::size_t num_lower) const {
  std::size_t cursor = 0;
  for (const auto& g : groups_) {
    if (g.begin != cursor || g.end <= g.begin) {
      std::ostringstream os;
      os << "type partition does not tile [0, " << num_lower << "): group [" << g.begin << ", " << g.end
         << ") found where " << cursor << " was expected";
      throw std::invalid_argument(os.str());
    }
    cursor = g.end;
  }
  if (cursor != num_lower) {
    throw std::invalid_argument("type partition covers [0, " + std::to_string(cursor) + ") but the layer has " +
                                std::to_string(num_lower) + " lower capsules");
  }
}

void CapsLayerSpec::validate() const {
  if (num_lower == 0 || num_upper == 0 || dim_lower == 0 || dim_upper == 0 || num_types == 0 || caps_per_type == 0) {
    throw std::invalid_argument("capsule layer dimensions must all be positive");
  }
  if (num_types * caps_per_type != num_lower) {
    throw std::invalid_argument("num_types x caps_per_type = " + std::to_string(num_types * caps_per_type) +
                                " differs from num_lower = " + std::to_string(num_lower));
  }
}

Tensor squash(const Tensor& s, int axis) {
  const std::size_t ax = normalize_axis(axis, s.rank(), s.shape());
  if (!all_finite(s)) throw NonFiniteError("squash: non-finite input of shape " + to_string(s.shape()));
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= s.shape()[d];
  for (std::size_t d = ax + 1; d < s.rank(); ++d) inner *= s.shape()[d];
  const std::size_t extent = s.shape()[ax];
  const auto& x = s.impl()->values;

  std::vector<double> out(x.size());
  std::vector<double> norms(outer * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * extent * inner + i;
      double sq = 0.0;
      for (std::size_t e = 0; e < extent; ++e) sq += x[base + e * inner] * x[base + e * inner];
      const double n = std::sqrt(sq);
      norms[o * inner + i] = n;
      const double f = sq / ((1.0 + sq) * (n + kSquashEpsilon));
      for (std::size_t e = 0; e < extent; ++e) out[base + e * inner] = f * x[base + e * inner];
    }
  }

  auto is = s.impl();
  return detail::make_result(
      s.shape(), std::move(out), {s}, "squash",
      [is, outer, inner, extent, norms = std::move(norms)](const TensorImpl& res) {
        auto gs = grad_sink(is);
        if (gs.empty()) return;
        const auto& x = is->values;
        const auto& g = res.pending;
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < inner; ++i) {
            const double n = norms[o * inner + i];
            if (n == 0.0) continue;
            const std::size_t base = o * extent * inner + i;
            const double sq = n * n;
            const double den = (1.0 + sq) * (n + kSquashEpsilon);
            const double f = sq / den;
            const double dden = 2.0 * n * (n + kSquashEpsilon) + (1.0 + sq);
            const double df = (2.0 * n * den - sq * dden) / (den * den);
            double dot = 0.0;
            for (std::size_t e = 0; e < extent; ++e) dot += x[base + e * inner] * g[base + e * inner];
            const double radial = df * dot / n;
            for (std::size_t e = 0; e < extent; ++e) {
              const std::size_t k = base + e * inner;
              gs[k] += f * g[k] + radial * x[k];
            }
          }
        }
      });
}

PredictionTensor predict(const Tensor& u, const Tensor& weights) {
  if (u.rank() != 3 || weights.rank() != 4 || u.shape()[1] != weights.shape()[0] ||
      u.shape()[2] != weights.shape()[3]) {
    throw ShapeError("predict expects u [batch, lower, dim_lower] and W [lower, upper, dim_upper, dim_lower], got " +
                     to_string(u.shape()) + " and " + to_string(weights.shape()));
  }
  const std::size_t batch = u.shape()[0];
  const std::size_t lower = u.shape()[1];
  const std::size_t dl = u.shape()[2];
  const std::size_t upper = weights.shape()[1];
  const std::size_t du = weights.shape()[2];
  const std::size_t row = upper * du;  // outputs per lower capsule

  std::vector<double> out(batch * lower * row);
  const double* uv = u.values().data();
  const double* wv = weights.values().data();
  for (std::size_t i = 0; i < lower; ++i) {
    // [batch, dl] x W_i^T [dl, upper*du]
    detail::gemm(false, true, batch, row, dl, 1.0, uv + i * dl, lower * dl, wv + i * row * dl, dl, 0.0,
                 out.data() + i * row, lower * row);
  }

  auto iu = u.impl();
  auto iw = weights.impl();
  auto t = detail::make_result({batch, lower, upper, du}, std::move(out), {u, weights}, "predict",
                               [iu, iw, batch, lower, dl, row](const TensorImpl& res) {
                                 auto gu = grad_sink(iu);
                                 auto gw = grad_sink(iw);
                                 const double* g = res.pending.data();
                                 for (std::size_t i = 0; i < lower; ++i) {
                                   if (!gu.empty()) {
                                     detail::gemm(false, false, batch, dl, row, 1.0, g + i * row, lower * row,
                                                  iw->values.data() + i * row * dl, dl, 1.0, gu.data() + i * dl,
                                                  lower * dl);
                                   }
                                   if (!gw.empty()) {
                                     detail::gemm(true, false, row, dl, batch, 1.0, g + i * row, lower * row,
                                                  iu->values.data() + i * dl, lower * dl, 1.0,
                                                  gw.data() + i * row * dl, dl);
                                   }
                                 }
                               });
  return {std::move(t)};
}

LogitMatrix zero_logits(std::size_t batch, std::size_t num_lower, std::size_t num_upper) {
  return {Tensor::zeros({batch, num_lower, num_upper})};
}

namespace {

void require_logit_shape(const Tensor& b) {
  if (b.rank() != 3) throw ShapeError("routing logits must be [batch, lower, upper], got " + to_string(b.shape()));
}

void require_prediction_match(const Tensor& c, const Tensor& u_hat) {
  if (u_hat.rank() != 4 || c.rank() != 3 || u_hat.shape()[0] != c.shape()[0] || u_hat.shape()[1] != c.shape()[1] ||
      u_hat.shape()[2] != c.shape()[2]) {
    throw ShapeError("couplings " + to_string(c.shape()) + " do not match predictions " + to_string(u_hat.shape()));
  }
}

}  // namespace

CouplingMatrix coupling_from_logits(const LogitMatrix& logits, AxisMode mode,
                                    const std::optional<TypePartition>& partition) {
  const Tensor& b = logits.b;
  require_logit_shape(b);
  const std::size_t lower = b.shape()[1];
  if (partition) partition->validate(lower);
  if (mode == AxisMode::UpperPerLower) return {softmax_along(b, 2), mode};
  if (!partition) return {softmax_along(b, 1), mode};

  if (!all_finite(b)) throw NonFiniteError("routing logits contain non-finite values");
  const std::size_t batch = b.shape()[0];
  const std::size_t upper = b.shape()[2];
  const auto& x = b.impl()->values;
  std::vector<double> out(x.size());
  const auto groups = partition->groups();
  for (std::size_t n = 0; n < batch; ++n) {
    for (const auto& grp : groups) {
      for (std::size_t j = 0; j < upper; ++j) {
        auto at = [&](std::size_t i) { return (n * lower + i) * upper + j; };
        double top = x[at(grp.begin)];
        for (std::size_t i = grp.begin + 1; i < grp.end; ++i) top = std::max(top, x[at(i)]);
        double total = 0.0;
        for (std::size_t i = grp.begin; i < grp.end; ++i) {
          out[at(i)] = std::exp(x[at(i)] - top);
          total += out[at(i)];
        }
        for (std::size_t i = grp.begin; i < grp.end; ++i) out[at(i)] /= total;
      }
    }
  }
  auto ib = b.impl();
  auto c = detail::make_result(b.shape(), std::move(out), {b}, "group_softmax",
                               [ib, groups, batch, lower, upper](const TensorImpl& res) {
                                 auto gb = grad_sink(ib);
                                 if (gb.empty()) return;
                                 const auto& y = res.values;
                                 const auto& g = res.pending;
                                 for (std::size_t n = 0; n < batch; ++n) {
                                   for (const auto& grp : groups) {
                                     for (std::size_t j = 0; j < upper; ++j) {
                                       auto at = [&](std::size_t i) { return (n * lower + i) * upper + j; };
                                       double dot = 0.0;
                                       for (std::size_t i = grp.begin; i < grp.end; ++i) dot += y[at(i)] * g[at(i)];
                                       for (std::size_t i = grp.begin; i < grp.end; ++i) {
                                         gb[at(i)] += y[at(i)] * (g[at(i)] - dot);
                                       }
                                     }
                                   }
                                 }
                               });
  return {std::move(c), mode};
}

namespace {

// Shared kernel of weighted_sum / grouped_weighted_sum: every group in
// `groups` produces one [upper, dim] slab of the output.
Tensor weighted_sum_groups(const Tensor& c, const Tensor& u_hat, std::vector<TypePartition::Group> groups,
                           Shape out_shape, const char* op) {
  const std::size_t batch = u_hat.shape()[0];
  const std::size_t lower = u_hat.shape()[1];
  const std::size_t upper = u_hat.shape()[2];
  const std::size_t dim = u_hat.shape()[3];
  const std::size_t slab = upper * dim;
  const auto& cv = c.impl()->values;
  const auto& uv = u_hat.impl()->values;
  std::vector<double> out(batch * groups.size() * slab, 0.0);
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t m = 0; m < groups.size(); ++m) {
      double* dst = out.data() + (n * groups.size() + m) * slab;
      for (std::size_t i = groups[m].begin; i < groups[m].end; ++i) {
        const double* ci = cv.data() + (n * lower + i) * upper;
        const double* ui = uv.data() + (n * lower + i) * slab;
        for (std::size_t j = 0; j < upper; ++j) {
          const double w = ci[j];
          for (std::size_t d = 0; d < dim; ++d) dst[j * dim + d] += w * ui[j * dim + d];
        }
      }
    }
  }
  auto ic = c.impl();
  auto iu = u_hat.impl();
  return detail::make_result(std::move(out_shape), std::move(out), {c, u_hat}, op,
                             [ic, iu, groups = std::move(groups), batch, lower, upper, dim](const TensorImpl& res) {
                               auto gc = grad_sink(ic);
                               auto gu = grad_sink(iu);
                               const std::size_t slab = upper * dim;
                               const auto& cv = ic->values;
                               const auto& uv = iu->values;
                               for (std::size_t n = 0; n < batch; ++n) {
                                 for (std::size_t m = 0; m < groups.size(); ++m) {
                                   const double* g = res.pending.data() + (n * groups.size() + m) * slab;
                                   for (std::size_t i = groups[m].begin; i < groups[m].end; ++i) {
                                     const std::size_t ci = (n * lower + i) * upper;
                                     const std::size_t ui = (n * lower + i) * slab;
                                     for (std::size_t j = 0; j < upper; ++j) {
                                       if (!gc.empty()) {
                                         double dot = 0.0;
                                         for (std::size_t d = 0; d < dim; ++d) dot += g[j * dim + d] * uv[ui + j * dim + d];
                                         gc[ci + j] += dot;
                                       }
                                       if (!gu.empty()) {
                                         const double w = cv[ci + j];
                                         for (std::size_t d = 0; d < dim; ++d) gu[ui + j * dim + d] += w * g[j * dim + d];
                                       }
                                     }
                                   }
                                 }
                               }
                             });
}

}  // namespace

Tensor weighted_sum(const CouplingMatrix& coupling, const PredictionTensor& prediction,
                    std::optional<TypePartition::Group> subset) {
  require_prediction_match(coupling.c, prediction.u_hat);
  const auto& shape = prediction.u_hat.shape();
  TypePartition::Group group{0, shape[1]};
  if (subset) {
    if (subset->end <= subset->begin || subset->end > shape[1]) {
      throw std::out_of_range("lower-capsule subset [" + std::to_string(subset->begin) + ", " +
                              std::to_string(subset->end) + ") outside [0, " + std::to_string(shape[1]) + ")");
    }
    group = *subset;
  }
  return weighted_sum_groups(coupling.c, prediction.u_hat, {group}, {shape[0], shape[2], shape[3]}, "weighted_sum");
}

Tensor grouped_weighted_sum(const CouplingMatrix& coupling, const PredictionTensor& prediction,
                            const TypePartition& partition) {
  require_prediction_match(coupling.c, prediction.u_hat);
  const auto& shape = prediction.u_hat.shape();
  partition.validate(shape[1]);
  return weighted_sum_groups(coupling.c, prediction.u_hat, partition.groups(),
                             {shape[0], partition.size(), shape[2], shape[3]}, "grouped_weighted_sum");
}

LogitMatrix agreement_update(const LogitMatrix& logits, const PredictionTensor& prediction, const Tensor& v) {
  const Tensor& b = logits.b;
  const Tensor& u_hat = prediction.u_hat;
  require_logit_shape(b);
  require_prediction_match(b, u_hat);
  const std::size_t batch = u_hat.shape()[0];
  const std::size_t lower = u_hat.shape()[1];
  const std::size_t upper = u_hat.shape()[2];
  const std::size_t dim = u_hat.shape()[3];
  if (v.shape() != Shape{batch, upper, dim}) {
    throw ShapeError("agreement_update: v " + to_string(v.shape()) + " does not match predictions " +
                     to_string(u_hat.shape()));
  }
  const auto& uv = u_hat.impl()->values;
  const auto& vv = v.impl()->values;
  std::vector<double> out(b.values().begin(), b.values().end());
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t i = 0; i < lower; ++i) {
      for (std::size_t j = 0; j < upper; ++j) {
        const double* ui = uv.data() + ((n * lower + i) * upper + j) * dim;
        const double* vj = vv.data() + (n * upper + j) * dim;
        double dot = 0.0;
        for (std::size_t d = 0; d < dim; ++d) dot += ui[d] * vj[d];
        out[(n * lower + i) * upper + j] += dot;
      }
    }
  }
  auto ib = b.impl();
  auto iu = u_hat.impl();
  auto iv = v.impl();
  auto t = detail::make_result(
      b.shape(), std::move(out), {b, u_hat, v}, "agreement_update",
      [ib, iu, iv, batch, lower, upper, dim](const TensorImpl& res) {
        auto gb = grad_sink(ib);
        auto gu = grad_sink(iu);
        auto gv = grad_sink(iv);
        const auto& g = res.pending;
        for (std::size_t k = 0; k < gb.size(); ++k) gb[k] += g[k];
        if (gu.empty() && gv.empty()) return;
        const auto& uv = iu->values;
        const auto& vv = iv->values;
        for (std::size_t n = 0; n < batch; ++n) {
          for (std::size_t i = 0; i < lower; ++i) {
            for (std::size_t j = 0; j < upper; ++j) {
              const double gij = g[(n * lower + i) * upper + j];
              const std::size_t ui = ((n * lower + i) * upper + j) * dim;
              const std::size_t vj = (n * upper + j) * dim;
              for (std::size_t d = 0; d < dim; ++d) {
                if (!gu.empty()) gu[ui + d] += gij * vv[vj + d];
                if (!gv.empty()) gv[vj + d] += gij * uv[ui + d];
              }
            }
          }
        }
      });
  return {std::move(t)};
}

void require_one_hot(const Tensor& labels) {
  if (labels.rank() != 2) throw std::invalid_argument("labels must be one-hot [batch, classes], got " + to_string(labels.shape()));
  const std::size_t classes = labels.shape()[1];
  const auto v = labels.values();
  for (std::size_t n = 0; n < labels.shape()[0]; ++n) {
    int ones = 0;
    for (std::size_t k = 0; k < classes; ++k) {
      const double x = v[n * classes + k];
      if (x == 1.0) {
        ++ones;
      } else if (x != 0.0) {
        ones = -1;
        break;
      }
    }
    if (ones != 1) throw std::invalid_argument("labels row " + std::to_string(n) + " is not one-hot");
  }
}

Tensor one_hot(std::span<const int> labels, std::size_t num_classes) {
  std::vector<double> v(labels.size() * num_classes, 0.0);
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= num_classes) {
      throw std::out_of_range("label " + std::to_string(labels[n]) + " outside [0, " + std::to_string(num_classes) + ")");
    }
    v[n * num_classes + static_cast<std::size_t>(labels[n])] = 1.0;
  }
  return Tensor::from({labels.size(), num_classes}, std::move(v));
}

Tensor margin_loss(const Tensor& lengths, const Tensor& one_hot_labels, MarginParams params) {
  require_one_hot(one_hot_labels);
  if (lengths.shape() != one_hot_labels.shape()) {
    throw ShapeError("margin_loss: lengths " + to_string(lengths.shape()) + " vs labels " +
                     to_string(one_hot_labels.shape()));
  }
  const auto L = lengths.values();
  const auto T = one_hot_labels.values();
  const double batch = static_cast<double>(lengths.shape()[0]);
  double total = 0.0;
  for (std::size_t k = 0; k < L.size(); ++k) {
    const double present = std::max(0.0, params.m_plus - L[k]);
    const double absent = std::max(0.0, L[k] - params.m_minus);
    total += T[k] * present * present + params.lambda * (1.0 - T[k]) * absent * absent;
  }
  auto il = lengths.impl();
  auto it = one_hot_labels.impl();
  return detail::make_result({1}, {total / batch}, {lengths}, "margin_loss",
                             [il, it, params, batch](const TensorImpl& res) {
                               auto gl = grad_sink(il);
                               if (gl.empty()) return;
                               const double g = res.pending[0] / batch;
                               const auto& L = il->values;
                               const auto& T = it->values;
                               for (std::size_t k = 0; k < L.size(); ++k) {
                                 const double present = std::max(0.0, params.m_plus - L[k]);
                                 const double absent = std::max(0.0, L[k] - params.m_minus);
                                 gl[k] += g * (-2.0 * T[k] * present + 2.0 * params.lambda * (1.0 - T[k]) * absent);
                               }
                             });
}

Tensor reconstruction_loss(const Tensor& decoded, const Tensor& target) {
  if (decoded.shape() != target.shape() || decoded.rank() != 2) {
    throw ShapeError("reconstruction_loss: decoded " + to_string(decoded.shape()) + " vs target " +
                     to_string(target.shape()));
  }
  const auto d = decoded.values();
  const auto t = target.values();
  const double batch = static_cast<double>(decoded.shape()[0]);
  double total = 0.0;
  for (std::size_t k = 0; k < d.size(); ++k) total += (d[k] - t[k]) * (d[k] - t[k]);
  auto id = decoded.impl();
  auto itg = target.impl();
  return detail::make_result({1}, {total / batch}, {decoded, target}, "reconstruction_loss",
                             [id, itg, batch](const TensorImpl& res) {
                               auto gd = grad_sink(id);
                               auto gt = grad_sink(itg);
                               const double g = 2.0 * res.pending[0] / batch;
                               for (std::size_t k = 0; k < id->values.size(); ++k) {
                                 const double diff = id->values[k] - itg->values[k];
                                 if (!gd.empty()) gd[k] += g * diff;
                                 if (!gt.empty()) gt[k] -= g * diff;
                               }
                             });
}

}  // namespace gcaps
