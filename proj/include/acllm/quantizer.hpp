#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "acllm/common.hpp"
#include "acllm/corpus.hpp"

namespace acllm {

// Fixed frame tokenizer. Iteration 1 quantizes raw features behind a frozen
// random projection; iteration 2 swaps in k-means centroids fitted on an
// intermediate encoder layer.

struct Codebook {
    int K = 0;
    int P = 0;
    std::string kind;               // "random_projection" | "kmeans"
    std::vector<float> vectors;     // K*P row-major
    std::vector<float> projection;  // D*P, random_projection only
    int D = 0;                      // projection input width, random_projection only
    int source_layer = -1;          // kmeans only
    float inertia = 0.0f;           // kmeans only, final fit inertia

    const float* codeword(int k) const {
        return vectors.data() + static_cast<size_t>(k) * P;
    }
};

using LabelSequence = std::vector<int>;

Codebook init_random_projection(int D, int P, int K, uint64_t seed);

// Nearest codeword per row under squared Euclidean distance, lowest index
// wins ties. For random_projection kind the rows are projected first.
LabelSequence label_frames(const std::vector<float>& rows, int T, int width,
                           const Codebook& cb);
LabelSequence label_frames(const FeatureSequence& f, const Codebook& cb);

// Lloyd iterations from k-means++ seeding. Empty clusters are re-seeded from
// the points farthest from their assigned centroids. Inertia is asserted
// non-increasing across iterations.
Codebook kmeans_fit(const std::vector<float>& points, int N, int P, int K,
                    int iters, uint64_t seed);

// Sum of squared distances from each point to its nearest codeword.
double quantizer_inertia(const std::vector<float>& points, int N, const Codebook& cb);

}  // namespace acllm
