#pragma once

#include "mopa/common.hpp"

#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

namespace mopa {

// Reverse-mode tape over dense row-major matrices. Ops compute values eagerly
// and append a backward closure; backward() walks the tape in reverse. Scalars
// live as 1x1 matrices. Instantiated with float for training and double for
// gradient checks.
template <class S>
class Graph {
 public:
  using M = Mat<S>;

  struct Node {
    M val;
    M grad;  // allocated by backward()
    bool needs_grad = false;
    std::function<void(Graph&)> back;
  };

  int size() const { return static_cast<int>(nodes_.size()); }
  const M& val(int id) const { return nodes_[id].val; }
  const M& grad_of(int id) const { return nodes_[id].grad; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }

  int constant(M v) { return add(std::move(v), false, {}); }

  int leaf(M v) { return add(std::move(v), true, {}); }

  // ---- arithmetic ----

  int add2(int a, int b) {
    M y = val(a) + val(b);
    return add(std::move(y), needs_grad(a) || needs_grad(b), [a, b](Graph& g) {
      const int self = g.cur_;
      g.acc(a, g.grad_ref(self));
      g.acc(b, g.grad_ref(self));
    });
  }

  int sub(int a, int b) {
    M y = val(a) - val(b);
    return add(std::move(y), needs_grad(a) || needs_grad(b), [a, b](Graph& g) {
      const int self = g.cur_;
      g.acc(a, g.grad_ref(self));
      if (g.needs_grad(b)) g.grad(b) -= g.grad_ref(self);
    });
  }

  int hadamard(int a, int b) {
    M y = val(a).cwiseProduct(val(b));
    return add(std::move(y), needs_grad(a) || needs_grad(b), [a, b](Graph& g) {
      const int self = g.cur_;
      if (g.needs_grad(a)) g.grad(a) += g.grad_ref(self).cwiseProduct(g.val(b));
      if (g.needs_grad(b)) g.grad(b) += g.grad_ref(self).cwiseProduct(g.val(a));
    });
  }

  int scale(int a, double c) {
    M y = val(a) * static_cast<S>(c);
    return add(std::move(y), needs_grad(a), [a, c](Graph& g) {
      const int self = g.cur_;
      if (g.needs_grad(a)) g.grad(a) += g.grad_ref(self) * static_cast<S>(c);
    });
  }

  int add_scalar(int a, double c) {
    M y = val(a).array() + static_cast<S>(c);
    return add(std::move(y), needs_grad(a),
               [a](Graph& g) { g.acc(a, g.grad_ref(g.cur_)); });
  }

  // Y = s * X with s a 1x1 node.
  int scale_by(int x, int s) {
    M y = val(x) * val(s)(0, 0);
    return add(std::move(y), needs_grad(x) || needs_grad(s), [x, s](Graph& g) {
      const int self = g.cur_;
      if (g.needs_grad(x)) g.grad(x) += g.grad_ref(self) * g.val(s)(0, 0);
      if (g.needs_grad(s)) g.grad(s)(0, 0) += g.grad_ref(self).cwiseProduct(g.val(x)).sum();
    });
  }

  int matmul(int a, int b) {
    M y = val(a) * val(b);
    return add(std::move(y), needs_grad(a) || needs_grad(b), [a, b](Graph& g) {
      const int self = g.cur_;
      if (g.needs_grad(a)) g.grad(a).noalias() += g.grad_ref(self) * g.val(b).transpose();
      if (g.needs_grad(b)) g.grad(b).noalias() += g.val(a).transpose() * g.grad_ref(self);
    });
  }

  // Y = A * B^T (similarity scores between row sets).
  int matmul_nt(int a, int b) {
    M y = val(a) * val(b).transpose();
    return add(std::move(y), needs_grad(a) || needs_grad(b), [a, b](Graph& g) {
      const int self = g.cur_;
      if (g.needs_grad(a)) g.grad(a).noalias() += g.grad_ref(self) * g.val(b);
      if (g.needs_grad(b)) g.grad(b).noalias() += g.grad_ref(self).transpose() * g.val(a);
    });
  }

  // Y = X W + b (b broadcast over rows).
  int affine(int x, int w, int b) {
    M y = (val(x) * val(w)).rowwise() + val(b).row(0);
    return add(std::move(y), true, [x, w, b](Graph& g) {
      const int self = g.cur_;
      const M& dy = g.grad_ref(self);
      if (g.needs_grad(x)) g.grad(x).noalias() += dy * g.val(w).transpose();
      if (g.needs_grad(w)) g.grad(w).noalias() += g.val(x).transpose() * dy;
      if (g.needs_grad(b)) g.grad(b).row(0) += dy.colwise().sum();
    });
  }

  int add_row_broadcast(int x, int r) {
    M y = val(x).rowwise() + val(r).row(0);
    return add(std::move(y), needs_grad(x) || needs_grad(r), [x, r](Graph& g) {
      const int self = g.cur_;
      g.acc(x, g.grad_ref(self));
      if (g.needs_grad(r)) g.grad(r).row(0) += g.grad_ref(self).colwise().sum();
    });
  }

  // ---- nonlinearities ----

  int relu(int x) {
    M y = val(x).cwiseMax(S(0));
    return add(std::move(y), needs_grad(x), [x](Graph& g) {
      const int self = g.cur_;
      if (!g.needs_grad(x)) return;
      g.grad(x) += (g.val(x).array() > S(0)).template cast<S>().matrix().cwiseProduct(
          g.grad_ref(self));
    });
  }

  int gelu(int x) {
    const auto& in = val(x);
    M y(in.rows(), in.cols());
    for (Eigen::Index i = 0; i < in.size(); ++i) {
      const double v = static_cast<double>(in.data()[i]);
      y.data()[i] = static_cast<S>(0.5 * v * (1.0 + std::erf(v * 0.7071067811865475244)));
    }
    return add(std::move(y), needs_grad(x), [x](Graph& g) {
      if (!g.needs_grad(x)) return;
      const int self = g.cur_;
      const M& in = g.val(x);
      const M& dy = g.grad_ref(self);
      M& dx = g.grad(x);
      for (Eigen::Index i = 0; i < in.size(); ++i) {
        const double v = static_cast<double>(in.data()[i]);
        const double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865475244));
        const double pdf = std::exp(-0.5 * v * v) * 0.3989422804014326779;
        dx.data()[i] += dy.data()[i] * static_cast<S>(cdf + v * pdf);
      }
    });
  }

  int exp_elem(int x) {
    M y = val(x).array().exp();
    return add(std::move(y), needs_grad(x), [x](Graph& g) {
      const int self = g.cur_;
      if (g.needs_grad(x)) g.grad(x) += g.grad_ref(self).cwiseProduct(g.val(self));
    });
  }

  // ---- row-structured ops ----

  int softmax_rows(int x) {
    const M& in = val(x);
    M y(in.rows(), in.cols());
    for (Eigen::Index r = 0; r < in.rows(); ++r) {
      const S mx = in.row(r).maxCoeff();
      Eigen::Array<S, 1, Eigen::Dynamic> e = (in.row(r).array() - mx).exp();
      y.row(r) = (e / e.sum()).matrix();
    }
    return add(std::move(y), needs_grad(x), [x](Graph& g) {
      if (!g.needs_grad(x)) return;
      const int self = g.cur_;
      const M& y = g.val(self);
      const M& dy = g.grad_ref(self);
      M& dx = g.grad(x);
      for (Eigen::Index r = 0; r < y.rows(); ++r) {
        const S dot = dy.row(r).cwiseProduct(y.row(r)).sum();
        dx.row(r) += (dy.row(r).array() - dot).matrix().cwiseProduct(y.row(r));
      }
    });
  }

  // Stable log-sum-exp over each row -> column vector (m x 1).
  int logsumexp_rows(int x) {
    const M& in = val(x);
    M y(in.rows(), 1);
    for (Eigen::Index r = 0; r < in.rows(); ++r) {
      const S mx = in.row(r).maxCoeff();
      y(r, 0) = mx + std::log((in.row(r).array() - mx).exp().sum());
    }
    return add(std::move(y), needs_grad(x), [x](Graph& g) {
      if (!g.needs_grad(x)) return;
      const int self = g.cur_;
      const M& in = g.val(x);
      const M& lse = g.val(self);
      const M& dy = g.grad_ref(self);
      M& dx = g.grad(x);
      for (Eigen::Index r = 0; r < in.rows(); ++r) {
        dx.row(r) += dy(r, 0) * (in.row(r).array() - lse(r, 0)).exp().matrix();
      }
    });
  }

  // LayerNorm over each row with learned gain/bias (1 x n).
  int layer_norm(int x, int gain, int bias, double eps = 1e-5) {
    const M& in = val(x);
    const Eigen::Index n = in.cols();
    M y(in.rows(), n);
    for (Eigen::Index r = 0; r < in.rows(); ++r) {
      const S mu = in.row(r).mean();
      const S var = (in.row(r).array() - mu).square().sum() / static_cast<S>(n);
      const S inv = S(1) / std::sqrt(var + static_cast<S>(eps));
      y.row(r) = (((in.row(r).array() - mu) * inv) * val(gain).row(0).array() +
                  val(bias).row(0).array())
                     .matrix();
    }
    return add(std::move(y), true, [x, gain, bias, eps](Graph& g) {
      const int self = g.cur_;
      const M& in = g.val(x);
      const M& dy = g.grad_ref(self);
      const Eigen::Index n = in.cols();
      for (Eigen::Index r = 0; r < in.rows(); ++r) {
        const S mu = in.row(r).mean();
        const S var = (in.row(r).array() - mu).square().sum() / static_cast<S>(n);
        const S inv = S(1) / std::sqrt(var + static_cast<S>(eps));
        const Eigen::Array<S, 1, Eigen::Dynamic> xhat = (in.row(r).array() - mu) * inv;
        const Eigen::Array<S, 1, Eigen::Dynamic> dxhat =
            dy.row(r).array() * g.val(gain).row(0).array();
        if (g.needs_grad(gain)) g.grad(gain).row(0).array() += dy.row(r).array() * xhat;
        if (g.needs_grad(bias)) g.grad(bias).row(0).array() += dy.row(r).array();
        if (g.needs_grad(x)) {
          const S m1 = dxhat.mean();
          const S m2 = (dxhat * xhat).mean();
          g.grad(x).row(r).array() += inv * (dxhat - m1 - xhat * m2);
        }
      }
    });
  }

  // L2-normalizes each row; eps keeps zero rows finite.
  int l2_normalize_rows(int x, double eps = 1e-12) {
    const M& in = val(x);
    M y(in.rows(), in.cols());
    for (Eigen::Index r = 0; r < in.rows(); ++r) {
      const S nrm = in.row(r).norm();
      y.row(r) = in.row(r) / (nrm + static_cast<S>(eps));
    }
    return add(std::move(y), needs_grad(x), [x, eps](Graph& g) {
      if (!g.needs_grad(x)) return;
      const int self = g.cur_;
      const M& in = g.val(x);
      const M& dy = g.grad_ref(self);
      M& dx = g.grad(x);
      for (Eigen::Index r = 0; r < in.rows(); ++r) {
        const S nrm = in.row(r).norm();
        const S denom = nrm + static_cast<S>(eps);
        const S dot = in.row(r).cwiseProduct(dy.row(r)).sum();
        dx.row(r) += dy.row(r) / denom;
        if (nrm > static_cast<S>(eps)) {
          dx.row(r) -= in.row(r) * (dot / (denom * denom * nrm));
        }
      }
    });
  }

  // ---- shape ops ----

  int hstack(const std::vector<int>& xs) {
    Eigen::Index rows = val(xs[0]).rows(), cols = 0;
    for (int x : xs) cols += val(x).cols();
    M y(rows, cols);
    Eigen::Index c = 0;
    bool needs = false;
    for (int x : xs) {
      y.middleCols(c, val(x).cols()) = val(x);
      c += val(x).cols();
      needs = needs || needs_grad(x);
    }
    return add(std::move(y), needs, [xs](Graph& g) {
      const int self = g.cur_;
      Eigen::Index c = 0;
      for (int x : xs) {
        const Eigen::Index w = g.val(x).cols();
        if (g.needs_grad(x)) g.grad(x) += g.grad_ref(self).middleCols(c, w);
        c += w;
      }
    });
  }

  int vstack(const std::vector<int>& xs) {
    Eigen::Index rows = 0;
    for (int x : xs) rows += val(x).rows();
    M y(rows, val(xs[0]).cols());
    Eigen::Index r = 0;
    bool needs = false;
    for (int x : xs) {
      y.middleRows(r, val(x).rows()) = val(x);
      r += val(x).rows();
      needs = needs || needs_grad(x);
    }
    return add(std::move(y), needs, [xs](Graph& g) {
      const int self = g.cur_;
      Eigen::Index r = 0;
      for (int x : xs) {
        const Eigen::Index h = g.val(x).rows();
        if (g.needs_grad(x)) g.grad(x) += g.grad_ref(self).middleRows(r, h);
        r += h;
      }
    });
  }

  int transpose(int x) {
    M y = val(x).transpose();
    return add(std::move(y), needs_grad(x), [x](Graph& g) {
      const int self = g.cur_;
      if (g.needs_grad(x)) g.grad(x) += g.grad_ref(self).transpose();
    });
  }

  int slice_cols(int x, int c0, int w) {
    M y = val(x).middleCols(c0, w);
    return add(std::move(y), needs_grad(x), [x, c0, w](Graph& g) {
      const int self = g.cur_;
      if (g.needs_grad(x)) g.grad(x).middleCols(c0, w) += g.grad_ref(self);
    });
  }

  int slice_rows(int x, int r0, int h) {
    M y = val(x).middleRows(r0, h);
    return add(std::move(y), needs_grad(x), [x, r0, h](Graph& g) {
      const int self = g.cur_;
      if (g.needs_grad(x)) g.grad(x).middleRows(r0, h) += g.grad_ref(self);
    });
  }

  // Gathers rows by index (duplicates allowed; backward scatter-adds).
  int gather_rows(int x, std::vector<int> idx) {
    M y(static_cast<Eigen::Index>(idx.size()), val(x).cols());
    for (std::size_t i = 0; i < idx.size(); ++i) y.row(i) = val(x).row(idx[i]);
    return add(std::move(y), needs_grad(x), [x, idx = std::move(idx)](Graph& g) {
      if (!g.needs_grad(x)) return;
      const int self = g.cur_;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        g.grad(x).row(idx[i]) += g.grad_ref(self).row(i);
      }
    });
  }

  // Picks one column per row -> (m x 1).
  int gather_cols_per_row(int x, std::vector<int> cols) {
    M y(val(x).rows(), 1);
    for (Eigen::Index r = 0; r < y.rows(); ++r) y(r, 0) = val(x)(r, cols[r]);
    return add(std::move(y), needs_grad(x), [x, cols = std::move(cols)](Graph& g) {
      if (!g.needs_grad(x)) return;
      const int self = g.cur_;
      for (Eigen::Index r = 0; r < g.val(self).rows(); ++r) {
        g.grad(x)(r, cols[r]) += g.grad_ref(self)(r, 0);
      }
    });
  }

  int diag(int x) {
    M y(val(x).rows(), 1);
    for (Eigen::Index r = 0; r < y.rows(); ++r) y(r, 0) = val(x)(r, r);
    return add(std::move(y), needs_grad(x), [x](Graph& g) {
      if (!g.needs_grad(x)) return;
      const int self = g.cur_;
      for (Eigen::Index r = 0; r < g.val(self).rows(); ++r) {
        g.grad(x)(r, r) += g.grad_ref(self)(r, 0);
      }
    });
  }

  // Y = X - c * ones (c is m x 1, broadcast over columns).
  int sub_col_broadcast(int x, int c) {
    M y = val(x).colwise() - val(c).col(0);
    return add(std::move(y), needs_grad(x) || needs_grad(c), [x, c](Graph& g) {
      const int self = g.cur_;
      g.acc(x, g.grad_ref(self));
      if (g.needs_grad(c)) g.grad(c).col(0) -= g.grad_ref(self).rowwise().sum();
    });
  }

  // Mean over rows within consecutive blocks of `rows_per_block` rows.
  int block_mean_rows(int x, int rows_per_block) {
    const M& in = val(x);
    const Eigen::Index blocks = in.rows() / rows_per_block;
    M y(blocks, in.cols());
    for (Eigen::Index b = 0; b < blocks; ++b) {
      y.row(b) = in.middleRows(b * rows_per_block, rows_per_block).colwise().mean();
    }
    return add(std::move(y), needs_grad(x), [x, rows_per_block](Graph& g) {
      if (!g.needs_grad(x)) return;
      const int self = g.cur_;
      const M& dy = g.grad_ref(self);
      const S inv = S(1) / static_cast<S>(rows_per_block);
      for (Eigen::Index b = 0; b < dy.rows(); ++b) {
        g.grad(x).middleRows(b * rows_per_block, rows_per_block).rowwise() += dy.row(b) * inv;
      }
    });
  }

  // Tiles a (T x n) matrix `reps` times vertically.
  int tile_rows(int x, int reps) {
    const M& in = val(x);
    M y(in.rows() * reps, in.cols());
    for (int r = 0; r < reps; ++r) y.middleRows(r * in.rows(), in.rows()) = in;
    return add(std::move(y), needs_grad(x), [x, reps](Graph& g) {
      if (!g.needs_grad(x)) return;
      const int self = g.cur_;
      const Eigen::Index h = g.val(x).rows();
      for (int r = 0; r < reps; ++r) {
        g.grad(x) += g.grad_ref(self).middleRows(r * h, h);
      }
    });
  }

  // Replaces rows flagged in `mask` with a learned (1 x n) row vector.
  int replace_rows(int x, std::vector<char> mask, int row) {
    M y = val(x);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      if (mask[r]) y.row(r) = val(row).row(0);
    }
    return add(std::move(y), needs_grad(x) || needs_grad(row),
               [x, row, mask = std::move(mask)](Graph& g) {
                 const int self = g.cur_;
                 const M& dy = g.grad_ref(self);
                 for (Eigen::Index r = 0; r < dy.rows(); ++r) {
                   if (mask[r]) {
                     if (g.needs_grad(row)) g.grad(row).row(0) += dy.row(r);
                   } else if (g.needs_grad(x)) {
                     g.grad(x).row(r) += dy.row(r);
                   }
                 }
               });
  }

  // Rearranges (B*F x D) into (B*T x f*D) by flattening groups of f rows.
  int flatten_patches(int x, int patch_len) {
    const M& in = val(x);
    const Eigen::Index d = in.cols();
    const Eigen::Index t = in.rows() / patch_len;
    M y(t, patch_len * d);
    for (Eigen::Index r = 0; r < t; ++r) {
      for (int o = 0; o < patch_len; ++o) {
        y.block(r, o * d, 1, d) = in.row(r * patch_len + o);
      }
    }
    return add(std::move(y), needs_grad(x), [x, patch_len](Graph& g) {
      if (!g.needs_grad(x)) return;
      const int self = g.cur_;
      const M& dy = g.grad_ref(self);
      const Eigen::Index d = g.val(x).cols();
      for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        for (int o = 0; o < patch_len; ++o) {
          g.grad(x).row(r * patch_len + o) += dy.block(r, o * d, 1, d);
        }
      }
    });
  }

  // ---- reductions ----

  int mean_all(int x) {
    M y(1, 1);
    y(0, 0) = val(x).mean();
    return add(std::move(y), needs_grad(x), [x](Graph& g) {
      if (!g.needs_grad(x)) return;
      const int self = g.cur_;
      const S c = g.grad_ref(self)(0, 0) / static_cast<S>(g.val(x).size());
      g.grad(x).array() += c;
    });
  }

  int sum_all(int x) {
    M y(1, 1);
    y(0, 0) = val(x).sum();
    return add(std::move(y), needs_grad(x), [x](Graph& g) {
      if (!g.needs_grad(x)) return;
      g.grad(x).array() += g.grad_ref(g.cur_)(0, 0);
    });
  }

  // Weighted mean of a column vector with fixed weights: sum(w_i x_i) / denom.
  int weighted_mean(int x, std::vector<double> w, double denom) {
    M y(1, 1);
    S acc = S(0);
    for (Eigen::Index r = 0; r < val(x).rows(); ++r) {
      acc += static_cast<S>(w[r]) * val(x)(r, 0);
    }
    y(0, 0) = acc / static_cast<S>(denom);
    return add(std::move(y), needs_grad(x), [x, denom, w = std::move(w)](Graph& g) {
      if (!g.needs_grad(x)) return;
      const int self = g.cur_;
      const S dy = g.grad_ref(self)(0, 0);
      for (Eigen::Index r = 0; r < g.val(x).rows(); ++r) {
        g.grad(x)(r, 0) += dy * static_cast<S>(w[r] / denom);
      }
    });
  }

  // ---- fused layers ----

  // 1D convolution along time within each block of `frames` rows, zero
  // same-padding. Weight layout: ((k*Cin) x Cout), tap-major rows, odd kernel.
  int conv1d(int x, int w, int b, int frames, int kernel) {
    check(kernel % 2 == 1, "conv1d: kernel size must be odd");
    const M& in = val(x);
    const Eigen::Index cin = in.cols();
    check(val(w).rows() == kernel * cin, "conv1d: weight shape mismatch");
    check(in.rows() % frames == 0, "conv1d: rows must be a multiple of the frame count");
    const M cols = im2col(in, frames, kernel);
    M y = (cols * val(w)).rowwise() + val(b).row(0);
    return add(std::move(y), true, [x, w, b, frames, kernel](Graph& g) {
      const int self = g.cur_;
      const M& in = g.val(x);
      const M& dy = g.grad_ref(self);
      const M cols = im2col(in, frames, kernel);
      if (g.needs_grad(w)) g.grad(w).noalias() += cols.transpose() * dy;
      if (g.needs_grad(b)) g.grad(b).row(0) += dy.colwise().sum();
      if (g.needs_grad(x)) {
        const M dcols = dy * g.val(w).transpose();
        col2im_add(g.grad(x), dcols, frames, kernel);
      }
    });
  }

  // One multi-head self-attention layer (projections + scaled dot-product +
  // output projection), applied independently to each block of `tokens` rows.
  int mhsa(int x, int wq, int bq, int wk, int bk, int wv, int bv, int wo, int bo, int tokens,
           int heads) {
    const M& in = val(x);
    const Eigen::Index d = in.cols();
    check(d % heads == 0, "mhsa: head count must divide model dim");
    const Eigen::Index dh = d / heads;
    const Eigen::Index blocks = in.rows() / tokens;
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));

    auto cache = std::make_shared<MhsaCache>();
    cache->q = (in * val(wq)).rowwise() + val(bq).row(0);
    cache->k = (in * val(wk)).rowwise() + val(bk).row(0);
    cache->v = (in * val(wv)).rowwise() + val(bv).row(0);
    cache->attn.resize(static_cast<std::size_t>(blocks * heads));
    cache->o.resize(in.rows(), d);

    for (Eigen::Index blk = 0; blk < blocks; ++blk) {
      for (int h = 0; h < heads; ++h) {
        const auto qh = cache->q.block(blk * tokens, h * dh, tokens, dh);
        const auto kh = cache->k.block(blk * tokens, h * dh, tokens, dh);
        const auto vh = cache->v.block(blk * tokens, h * dh, tokens, dh);
        M scores = qh * kh.transpose() * inv_sqrt;
        for (Eigen::Index r = 0; r < scores.rows(); ++r) {
          const S mx = scores.row(r).maxCoeff();
          Eigen::Array<S, 1, Eigen::Dynamic> e = (scores.row(r).array() - mx).exp();
          scores.row(r) = (e / e.sum()).matrix();
        }
        cache->o.block(blk * tokens, h * dh, tokens, dh) = scores * vh;
        cache->attn[static_cast<std::size_t>(blk * heads + h)] = std::move(scores);
      }
    }
    M y = (cache->o * val(wo)).rowwise() + val(bo).row(0);

    return add(std::move(y), true,
               [x, wq, bq, wk, bk, wv, bv, wo, bo, tokens, heads, inv_sqrt, cache](Graph& g) {
                 const int self = g.cur_;
                 const M& in = g.val(x);
                 const M& dy = g.grad_ref(self);
                 const Eigen::Index d = in.cols();
                 const Eigen::Index dh = d / heads;
                 const Eigen::Index blocks = in.rows() / tokens;

                 M dO = dy * g.val(wo).transpose();
                 if (g.needs_grad(wo)) g.grad(wo).noalias() += cache->o.transpose() * dy;
                 if (g.needs_grad(bo)) g.grad(bo).row(0) += dy.colwise().sum();

                 M dQ = M::Zero(in.rows(), d), dK = M::Zero(in.rows(), d),
                   dV = M::Zero(in.rows(), d);
                 for (Eigen::Index blk = 0; blk < blocks; ++blk) {
                   for (int h = 0; h < heads; ++h) {
                     const M& p = cache->attn[static_cast<std::size_t>(blk * heads + h)];
                     const auto qh = cache->q.block(blk * tokens, h * dh, tokens, dh);
                     const auto kh = cache->k.block(blk * tokens, h * dh, tokens, dh);
                     const auto vh = cache->v.block(blk * tokens, h * dh, tokens, dh);
                     const auto doh = dO.block(blk * tokens, h * dh, tokens, dh);
                     M dP = doh * vh.transpose();
                     dV.block(blk * tokens, h * dh, tokens, dh).noalias() = p.transpose() * doh;
                     // softmax backward per row
                     M dS(tokens, tokens);
                     for (Eigen::Index r = 0; r < tokens; ++r) {
                       const S dot = dP.row(r).cwiseProduct(p.row(r)).sum();
                       dS.row(r) = (dP.row(r).array() - dot).matrix().cwiseProduct(p.row(r));
                     }
                     dQ.block(blk * tokens, h * dh, tokens, dh).noalias() = dS * kh * inv_sqrt;
                     dK.block(blk * tokens, h * dh, tokens, dh).noalias() =
                         dS.transpose() * qh * inv_sqrt;
                   }
                 }
                 if (g.needs_grad(wq)) g.grad(wq).noalias() += in.transpose() * dQ;
                 if (g.needs_grad(wk)) g.grad(wk).noalias() += in.transpose() * dK;
                 if (g.needs_grad(wv)) g.grad(wv).noalias() += in.transpose() * dV;
                 if (g.needs_grad(bq)) g.grad(bq).row(0) += dQ.colwise().sum();
                 if (g.needs_grad(bk)) g.grad(bk).row(0) += dK.colwise().sum();
                 if (g.needs_grad(bv)) g.grad(bv).row(0) += dV.colwise().sum();
                 if (g.needs_grad(x)) {
                   g.grad(x).noalias() += dQ * g.val(wq).transpose();
                   g.grad(x).noalias() += dK * g.val(wk).transpose();
                   g.grad(x).noalias() += dV * g.val(wv).transpose();
                 }
               });
  }

  // ---- backward ----

  void backward(int root) {
    check(val(root).rows() == 1 && val(root).cols() == 1, "backward: root must be scalar");
    check(std::isfinite(static_cast<double>(val(root)(0, 0))), "backward: non-finite loss");
    for (auto& n : nodes_) {
      if (n.needs_grad) n.grad = M::Zero(n.val.rows(), n.val.cols());
    }
    nodes_[root].grad(0, 0) = S(1);
    for (int i = root; i >= 0; --i) {
      if (nodes_[i].back && nodes_[i].needs_grad) {
        cur_ = i;
        nodes_[i].back(*this);
      }
    }
  }

  M& grad(int id) { return nodes_[id].grad; }

 private:
  struct MhsaCache {
    M q, k, v, o;
    std::vector<M> attn;
  };

  const M& grad_ref(int id) const { return nodes_[id].grad; }

  void acc(int id, const M& g) {
    if (nodes_[id].needs_grad) nodes_[id].grad += g;
  }

  int add(M v, bool needs, std::function<void(Graph&)> back) {
    check(v.allFinite(), "graph op produced a non-finite value");
    Node n;
    n.val = std::move(v);
    n.needs_grad = needs;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  static M im2col(const M& in, int frames, int kernel) {
    const Eigen::Index cin = in.cols();
    const Eigen::Index blocks = in.rows() / frames;
    const int half = kernel / 2;
    M cols = M::Zero(in.rows(), kernel * cin);
    for (Eigen::Index blk = 0; blk < blocks; ++blk) {
      const Eigen::Index base = blk * frames;
      for (int t = 0; t < frames; ++t) {
        for (int o = 0; o < kernel; ++o) {
          const int src = t + o - half;
          if (src >= 0 && src < frames) {
            cols.block(base + t, o * cin, 1, cin) = in.row(base + src);
          }
        }
      }
    }
    return cols;
  }

  static void col2im_add(M& dst, const M& dcols, int frames, int kernel) {
    const Eigen::Index cin = dst.cols();
    const Eigen::Index blocks = dst.rows() / frames;
    const int half = kernel / 2;
    for (Eigen::Index blk = 0; blk < blocks; ++blk) {
      const Eigen::Index base = blk * frames;
      for (int t = 0; t < frames; ++t) {
        for (int o = 0; o < kernel; ++o) {
          const int src = t + o - half;
          if (src >= 0 && src < frames) {
            dst.row(base + src) += dcols.block(base + t, o * cin, 1, cin);
          }
        }
      }
    }
  }

  std::vector<Node> nodes_;
  int cur_ = -1;
};

using GraphF = Graph<float>;
using GraphD = Graph<double>;

}  // namespace mopa
