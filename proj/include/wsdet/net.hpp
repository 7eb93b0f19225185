// Copyright 2026 The wsdet Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "wsdet/rng.hpp"

namespace wsdet {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// One learnable tensor with its gradient and Adam moments. Feature maps are
/// stored channels x positions (column = spatial position in row-major scan
/// order), so convolutions reduce to GEMM against im2col matrices.
struct Param {
  std::string name;
  Mat value;
  Mat grad;
  Mat m;
  Mat v;

  Param() = default;
  Param(std::string n, int rows, int cols) : name(std::move(n)) {
    value = Mat::Zero(rows, cols);
    grad = Mat::Zero(rows, cols);
    m = Mat::Zero(rows, cols);
    v = Mat::Zero(rows, cols);
  }

  void zero_grad() { grad.setZero(); }

  void init_he(Rng& rng, int fan_in) {
    const double stddev = std::sqrt(2.0 / double(fan_in));
    for (Eigen::Index i = 0; i < value.size(); ++i) value.data()[i] = rng.normal(0.0, stddev);
  }
};

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One Adam update; t is the 1-based update count.
inline void adam_step(Param& p, const AdamConfig& cfg, std::int64_t t) {
  const double b1c = 1.0 - std::pow(cfg.beta1, double(t));
  const double b2c = 1.0 - std::pow(cfg.beta2, double(t));
  for (Eigen::Index i = 0; i < p.value.size(); ++i) {
    const double g = p.grad.data()[i];
    double& m = p.m.data()[i];
    double& v = p.v.data()[i];
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    p.value.data()[i] -= cfg.learning_rate * (m / b1c) / (std::sqrt(v / b2c) + cfg.epsilon);
  }
}

// ---------------------------------------------------------------------------
// 3x3 stride-1 pad-1 convolution via im2col

/// cols(k, p): kernel-window values for output position p; k enumerates
/// (c_in, ky, kx) row-major.
inline Mat im2col3x3(const Mat& x, int h, int w) {
  const int cin = int(x.rows());
  Mat cols(cin * 9, h * w);
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < w; ++xx) {
      const int p = y * w + xx;
      for (int c = 0; c < cin; ++c) {
        for (int ky = 0; ky < 3; ++ky) {
          const int sy = y + ky - 1;
          for (int kx = 0; kx < 3; ++kx) {
            const int sx = xx + kx - 1;
            const int k = (c * 3 + ky) * 3 + kx;
            cols(k, p) = (sy >= 0 && sy < h && sx >= 0 && sx < w) ? x(c, sy * w + sx) : 0.0;
          }
        }
      }
    }
  }
  return cols;
}

inline Mat col2im3x3(const Mat& gcols, int cin, int h, int w) {
  Mat gx = Mat::Zero(cin, h * w);
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < w; ++xx) {
      const int p = y * w + xx;
      for (int c = 0; c < cin; ++c) {
        for (int ky = 0; ky < 3; ++ky) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int sx = xx + kx - 1;
            if (sx < 0 || sx >= w) continue;
            gx(c, sy * w + sx) += gcols((c * 3 + ky) * 3 + kx, p);
          }
        }
      }
    }
  }
  return gx;
}

struct ConvCache {
  Mat cols;  // im2col of the layer input
  int h = 0, w = 0, cin = 0;
};

/// weight: (Cout) x (Cin*9); bias: param with shape Cout x 1.
inline Mat conv3x3_forward(const Mat& x, int h, int w, const Param& weight, const Param& bias,
                           ConvCache& cache) {
  cache.cols = im2col3x3(x, h, w);
  cache.h = h;
  cache.w = w;
  cache.cin = int(x.rows());
  Mat y = weight.value * cache.cols;
  y.colwise() += bias.value.col(0);
  return y;
}

inline Mat conv3x3_backward(const Mat& gy, Param& weight, Param& bias, const ConvCache& cache) {
  weight.grad.noalias() += gy * cache.cols.transpose();
  bias.grad.col(0) += gy.rowwise().sum();
  const Mat gcols = weight.value.transpose() * gy;
  return col2im3x3(gcols, cache.cin, cache.h, cache.w);
}

// ---------------------------------------------------------------------------
// ReLU and 2x2 max pooling

inline void relu_inplace(Mat& x) { x = x.cwiseMax(0.0); }

/// grad through relu given the post-activation values.
inline Mat relu_backward(const Mat& gy, const Mat& y) {
  return (y.array() > 0.0).select(gy, Mat::Zero(gy.rows(), gy.cols()));
}

struct PoolCache {
  std::vector<int> argmax;  // input position per (channel, output position)
  int h_out = 0, w_out = 0;
};

inline Mat maxpool2x2_forward(const Mat& x, int h, int w, PoolCache& cache) {
  const int c = int(x.rows());
  const int ho = h / 2, wo = w / 2;
  cache.h_out = ho;
  cache.w_out = wo;
  cache.argmax.assign(std::size_t(c) * ho * wo, 0);
  Mat y(c, ho * wo);
  for (int ch = 0; ch < c; ++ch) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        const int base = 2 * oy * w + 2 * ox;
        int best = base;
        double bv = x(ch, base);
        for (const int off : {1, w, w + 1}) {
          if (x(ch, base + off) > bv) {
            bv = x(ch, base + off);
            best = base + off;
          }
        }
        y(ch, oy * wo + ox) = bv;
        cache.argmax[std::size_t(ch) * ho * wo + oy * wo + ox] = best;
      }
    }
  }
  return y;
}

inline Mat maxpool2x2_backward(const Mat& gy, const PoolCache& cache, int h_in, int w_in) {
  const int c = int(gy.rows());
  Mat gx = Mat::Zero(c, h_in * w_in);
  for (int ch = 0; ch < c; ++ch) {
    for (int p = 0; p < cache.h_out * cache.w_out; ++p) {
      gx(ch, cache.argmax[std::size_t(ch) * cache.h_out * cache.w_out + p]) += gy(ch, p);
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Fully connected: rows are samples

struct FcCache {
  Mat x;
};

/// weight: Dout x Din; y = x * W^T + b.
inline Mat fc_forward(const Mat& x, const Param& weight, const Param& bias, FcCache& cache) {
  cache.x = x;
  Mat y = x * weight.value.transpose();
  y.rowwise() += bias.value.col(0).transpose();
  return y;
}

inline Mat fc_backward(const Mat& gy, Param& weight, Param& bias, const FcCache& cache) {
  weight.grad.noalias() += gy.transpose() * cache.x;
  bias.grad.col(0) += gy.colwise().sum().transpose();
  return gy * weight.value;
}

// ---------------------------------------------------------------------------
// Softmax cross entropy over rows

/// Row-wise softmax probabilities (numerically stabilized).
inline Mat softmax_rows(const Mat& logits) {
  Mat p = logits;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double mx = p.row(r).maxCoeff();
    p.row(r) = (p.row(r).array() - mx).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

inline Mat log_softmax_rows(const Mat& logits) {
  Mat lp = logits;
  for (Eigen::Index r = 0; r < lp.rows(); ++r) {
    const double mx = lp.row(r).maxCoeff();
    const double lse = mx + std::log((lp.row(r).array() - mx).exp().sum());
    lp.row(r) = lp.row(r).array() - lse;
  }
  return lp;
}

/// Mean weighted cross entropy over rows; accumulates d loss / d logits.
/// weights are per-row multipliers (1 for plain CE).
inline double cross_entropy_rows(const Mat& logits, const std::vector<int>& targets,
                                 const std::vector<double>& weights, Mat* dlogits) {
  const auto n = std::size_t(logits.rows());
  if (targets.size() != n || weights.size() != n) {
    throw std::invalid_argument("cross_entropy_rows: size mismatch");
  }
  if (n == 0) return 0.0;
  const Mat lp = log_softmax_rows(logits);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) loss -= weights[i] * lp(Eigen::Index(i), targets[i]);
  loss /= double(n);
  if (dlogits) {
    Mat p = lp.array().exp();
    for (std::size_t i = 0; i < n; ++i) {
      p.row(Eigen::Index(i)) *= weights[i] / double(n);
      (*dlogits)(Eigen::Index(i), targets[i]) -= weights[i] / double(n);
    }
    *dlogits += p;
  }
  return loss;
}

/// smooth-L1 elementwise: 0.5 x^2 for |x|<1 else |x|-0.5.
inline double smooth_l1(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

inline double smooth_l1_grad(double x) {
  if (x > 1.0) return 1.0;
  if (x < -1.0) return -1.0;
  return x;
}

}  // namespace wsdet
