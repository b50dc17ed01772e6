#pragma once

#include <functional>
#include <vector>

#include "evalnet/tensor.hpp"

namespace evalnet {

// Differentiable operation set. All kernels accumulate in double with a
// fixed, row-major summation order per output element and round results to
// the active precision on store, so forward passes are bit-reproducible.

// 2-D convolution, input N,C,H,W, kernel O,I,K,K (square, odd K), zero
// padding. Output spatial extent follows
// floor((H + 2*padding - dilation*(K-1) - 1)/stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride = 1,
              int padding = 0, int dilation = 1);

// out[n, c, r*h+dy, r*w+dx] = in[n, c*r*r + dy*r + dx, h, w]
Tensor pixel_shuffle(const Tensor& input, int r);

// Non-overlapping factor x factor mean over H,W.
Tensor avg_pool(const Tensor& input, int factor);

// Per-channel spatial mean, N,C,H,W -> N,C,1,1.
Tensor global_avg_pool(const Tensor& input);

Tensor add(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor scalar_multiply(const Tensor& x, double s);
Tensor concat_channels(const std::vector<Tensor>& parts);

// Softmax along the last axis, max-subtracted for stability.
Tensor softmax_last(const Tensor& x);

// Data-preserving reshape (recorded as a permutation-free copy).
Tensor reshape(const Tensor& x, std::vector<int> shape);

// Select one index along the last axis, dropping it.
Tensor slice_last(const Tensor& x, int index);

// Broadcast per-channel scale: x is N,C,H,W, s is N,C (or N,C,1,1).
Tensor scale_channels(const Tensor& x, const Tensor& s);

// Gathers the window*window high-res block around each low-res position
// (i,j), centered at (i*scale + scale/2, j*scale + scale/2) with integer
// floor. Out-of-bounds slots are zero-filled; window_mask() marks them.
// Output shape N,C,h,w,window^2.
Tensor gather_windows(const Tensor& high, int low_h, int low_w, int scale, int window);

// 1 for in-bounds slots, 0 for out-of-bounds; shape h,w,window^2. Not a
// gradient participant.
Tensor window_mask(int high_h, int high_w, int low_h, int low_w, int scale, int window);

// Scaled dot-product attention over gathered local windows. query N,C,H,W;
// keys/values N,C,H,W,S; mask H,W,S with 1 = valid. Masked slots get -inf
// logits; a window with no valid slot is an error.
Tensor local_dot_attention(const Tensor& query, const Tensor& keys, const Tensor& values,
                           const Tensor& mask);

// Softmax weights the attention kernel would produce, for inspection in
// tests; runs outside the tape.
std::vector<double> local_attention_weights(const Tensor& query, const Tensor& keys,
                                            const Tensor& mask, int n, int y, int x);

// Scalar sum over all elements.
Tensor sum(const Tensor& x);

enum class LossKind { Mse, L1 };

// Mean over all elements of (pred-target)^2 or |pred-target|.
Tensor loss(const Tensor& pred, const Tensor& target, LossKind kind);

// Reverse sweep from a recorded scalar root; leaf gradients accumulate
// additively across fan-out.
void backward(const Tensor& root);

// Central-difference check of d f / d point in float64 mode. Returns the
// max over checked coordinates of |a-n| / max(1e-8, |a|+|n|). max_coords=0
// checks every coordinate; otherwise a seeded random subset.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double eps,
                  std::size_t max_coords = 0, std::uint64_t subsample_seed = 0);

}  // namespace evalnet
