// Copyright 2026 The wsdet Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <iostream>

#include "wsdet/detector.hpp"
#include "wsdet/geometry.hpp"
#include "wsdet/manifest.hpp"
#include "wsdet/net.hpp"

namespace wsdet {

/// Per-class loss weights; background fixed at 1, foreground weights
/// normalized to mean 1 so the schedule keeps its published meaning.
struct ClassWeights {
  std::array<double, kNumClasses> w{1.0, 1.0, 1.0};

  double operator[](ClassLabel c) const { return w[std::size_t(c)]; }
};

/// Inverse-frequency weights from the weak manifest. A class absent from the
/// manifest keeps weight 1 (with a warning) instead of blowing up.
inline ClassWeights class_weights(const DatasetManifest& weak) {
  if (weak.samples.empty()) throw std::invalid_argument("class_weights: empty weak manifest");
  const auto counts = weak.class_counts();
  std::array<std::size_t, kNumClasses> n{};
  for (const auto& [label, count] : counts) n[std::size_t(label)] = count;

  std::array<double, kNumClasses> inv{};
  double sum = 0.0;
  int present = 0;
  for (int c = 1; c < kNumClasses; ++c) {
    if (n[std::size_t(c)] > 0) {
      inv[std::size_t(c)] = 1.0 / double(n[std::size_t(c)]);
      sum += inv[std::size_t(c)];
      ++present;
    } else {
      std::cerr << "warning: class_weights: no weak samples of class " << c
                << "; weight forced to 1\n";
    }
  }
  ClassWeights out;
  if (present > 0) {
    const double mean = sum / double(present);
    for (int c = 1; c < kNumClasses; ++c) {
      if (n[std::size_t(c)] > 0) out.w[std::size_t(c)] = inv[std::size_t(c)] / mean;
    }
  }
  return out;
}

/// The RoIs a weak image trains on: the row most confident in the image label
/// (the argmax selection) and the row least confident in it, used as the
/// background negative. positive == negative only when |G| = 1.
struct WeakTarget {
  int positive_index = -1;
  int negative_index = -1;
  ClassLabel image_label = ClassLabel::class_1;
  ClassWeights weights;
};

/// argmax / argmin of the image-label column, ties to the lowest index; the
/// negative never reuses the positive row when another row exists.
inline WeakTarget select_weak_target(const ClassScores& scores, ClassLabel image_label,
                                     const ClassWeights& weights = {}) {
  if (image_label == ClassLabel::background) {
    throw std::invalid_argument("select_weak_target: image label must be a foreground class");
  }
  const auto n = scores.probs.rows();
  if (n == 0) throw std::invalid_argument("select_weak_target: empty proposal set");
  const int col = int(image_label);

  WeakTarget t;
  t.image_label = image_label;
  t.weights = weights;
  for (Eigen::Index r = 0; r < n; ++r) {
    if (t.positive_index < 0 || scores.probs(r, col) > scores.probs(t.positive_index, col)) {
      t.positive_index = int(r);
    }
  }
  for (Eigen::Index r = 0; r < n; ++r) {
    if (int(r) == t.positive_index) continue;
    if (t.negative_index < 0 || scores.probs(r, col) < scores.probs(t.negative_index, col)) {
      t.negative_index = int(r);
    }
  }
  if (t.negative_index < 0) t.negative_index = t.positive_index;  // single-RoI collapse
  return t;
}

/// Weak-image classification loss: the mean of the weighted positive-row CE
/// toward the image label and the weighted negative-row CE toward background.
/// Depends only on the two selected rows. Collapsed targets use the positive
/// term alone.
inline double weak_loss(const ClassScores& scores, const WeakTarget& t) {
  const auto n = scores.probs.rows();
  if (t.positive_index < 0 || t.positive_index >= n || t.negative_index < 0 ||
      t.negative_index >= n) {
    throw std::invalid_argument("weak_loss: target indices out of range");
  }
  const double w_pos = t.weights[t.image_label];
  const double pos_ce = -std::log(scores.probs(t.positive_index, int(t.image_label)));
  if (t.negative_index == t.positive_index) return w_pos * pos_ce;
  const double w_neg = t.weights[ClassLabel::background];
  const double neg_ce = -std::log(scores.probs(t.negative_index, int(ClassLabel::background)));
  return (w_pos * pos_ce + w_neg * neg_ce) / 2.0;
}

/// Same loss computed from head logits (numerically stable log-softmax),
/// accumulating d loss / d logits for the two selected rows. Used by the
/// training loop; agrees with weak_loss on the softmax of the logits.
inline double weak_loss_from_logits(const Mat& logits, const WeakTarget& t, Mat* g_logits) {
  const Mat lp = log_softmax_rows(logits);
  const double w_pos = t.weights[t.image_label];
  const bool collapsed = t.negative_index == t.positive_index;
  const double scale = collapsed ? 1.0 : 0.5;

  double loss = -w_pos * lp(t.positive_index, int(t.image_label));
  if (!collapsed) {
    loss += -t.weights[ClassLabel::background] * lp(t.negative_index, 0);
  }
  loss *= scale;

  if (g_logits) {
    auto add_row = [&](int row, int target_col, double weight) {
      Eigen::RowVectorXd p = lp.row(row).array().exp();
      p *= weight * scale;
      g_logits->row(row) += p;
      (*g_logits)(row, target_col) -= weight * scale;
    };
    add_row(t.positive_index, int(t.image_label), w_pos);
    if (!collapsed) add_row(t.negative_index, 0, t.weights[ClassLabel::background]);
  }
  return loss;
}

/// L_final = L_strong + alpha * L_weak.
inline double combined_loss(const StrongLosses& strong, double weak, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("combined_loss: alpha must lie in (0,1]");
  }
  return strong.total() + alpha * weak;
}

}  // namespace wsdet
