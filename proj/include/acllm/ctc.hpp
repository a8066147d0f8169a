#pragma once

#include <vector>

#include "acllm/tensor.hpp"

namespace acllm {

// CTC loss via the forward algorithm in log space. Blank is index 0; target
// tokens are in [1, V]. Differentiable: the backward pass uses the full
// forward-backward posterior.
Tensor ctc_loss(const Tensor& logits, const std::vector<int>& target);

// Frames required to emit the target: |target| plus one blank between each
// repeated adjacent pair.
int ctc_min_frames(const std::vector<int>& target);

// Per-frame argmax, collapse repeats, drop blanks.
std::vector<int> ctc_greedy_decode(const Tensor& logits);

}  // namespace acllm
