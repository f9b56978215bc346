#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

#include "spinectx/volume.hpp"

namespace spinectx {

/// Voxelwise confusion counts and the derived overlap metrics.
struct SegMetrics {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  double dice = 0, iou = 0, precision = 0, recall = 0, f1 = 0;
};

namespace detail {

/// Zero-denominator convention: 1.0 when both masks are empty, else 0.0.
inline double safe_ratio(double num, double den, bool both_empty) {
  if (den > 0.0) return num / den;
  return both_empty ? 1.0 : 0.0;
}

}  // namespace detail

inline SegMetrics metrics_from_counts(std::int64_t tp, std::int64_t fp, std::int64_t fn,
                                      std::int64_t tn) {
  SegMetrics m;
  m.tp = tp;
  m.fp = fp;
  m.fn = fn;
  m.tn = tn;
  const bool both_empty = (tp + fp + fn) == 0;  // no predicted and no true positives
  m.dice = detail::safe_ratio(2.0 * tp, 2.0 * tp + fp + fn, both_empty);
  m.iou = detail::safe_ratio(static_cast<double>(tp), static_cast<double>(tp + fp + fn),
                             both_empty);
  m.precision =
      detail::safe_ratio(static_cast<double>(tp), static_cast<double>(tp + fp), both_empty);
  m.recall =
      detail::safe_ratio(static_cast<double>(tp), static_cast<double>(tp + fn), both_empty);
  m.f1 = detail::safe_ratio(2.0 * m.precision * m.recall, m.precision + m.recall, both_empty);
  return m;
}

/// Voxelwise confusion of two binary masks of identical shape.
inline SegMetrics confusion(const Volume& pred, const Volume& truth) {
  if (pred.dims != truth.dims)
    throw std::invalid_argument("confusion: shape mismatch " + pred.dims_str() + " vs " +
                                truth.dims_str());
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] > 0.5f;
    const bool t = truth.data[i] > 0.5f;
    if (p && t)
      ++tp;
    else if (p && !t)
      ++fp;
    else if (!p && t)
      ++fn;
    else
      ++tn;
  }
  return metrics_from_counts(tp, fp, fn, tn);
}

inline std::string metrics_csv_header() {
  return "case_id,dice,iou,precision,recall,f1,tp,fp,fn,tn";
}

inline std::string metrics_csv_row(const std::string& case_id, const SegMetrics& m) {
  std::ostringstream os;
  os.precision(9);
  os << case_id << "," << m.dice << "," << m.iou << "," << m.precision << "," << m.recall << ","
     << m.f1 << "," << m.tp << "," << m.fp << "," << m.fn << "," << m.tn;
  return os.str();
}

}  // namespace spinectx
