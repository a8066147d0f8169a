#include "acllm/quantizer.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace acllm {

namespace {

void check_distinct(const Codebook& cb) {
    for (int a = 0; a < cb.K; ++a)
        for (int b = a + 1; b < cb.K; ++b) {
            bool same = true;
            for (int p = 0; p < cb.P && same; ++p)
                same = cb.codeword(a)[p] == cb.codeword(b)[p];
            if (same)
                throw std::invalid_argument("codebook has duplicate codewords");
        }
}

int nearest(const float* x, const Codebook& cb) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k < cb.K; ++k) {
        double d = 0;
        const float* c = cb.codeword(k);
        for (int p = 0; p < cb.P; ++p) {
            double diff = static_cast<double>(x[p]) - c[p];
            d += diff * diff;
        }
        if (d < best_d) {  // strict: lowest index wins ties
            best_d = d;
            best = k;
        }
    }
    return best;
}

}  // namespace

Codebook init_random_projection(int D, int P, int K, uint64_t seed) {
    if (D < 1 || P < 1 || K < 2)
        throw std::invalid_argument("init_random_projection: need D,P >= 1 and K >= 2");
    Codebook cb;
    cb.K = K;
    cb.P = P;
    cb.D = D;
    cb.kind = "random_projection";
    Rng rng = make_rng(seed);
    std::normal_distribution<float> g(0.0f, 1.0f);
    cb.projection.resize(static_cast<size_t>(D) * P);
    for (auto& v : cb.projection) v = g(rng) / std::sqrt(static_cast<float>(D));
    cb.vectors.resize(static_cast<size_t>(K) * P);
    for (auto& v : cb.vectors) v = g(rng);
    check_distinct(cb);
    return cb;
}

LabelSequence label_frames(const std::vector<float>& rows, int T, int width,
                           const Codebook& cb) {
    check_distinct(cb);
    const int in_width = cb.kind == "random_projection" ? cb.D : cb.P;
    if (width != in_width)
        throw std::invalid_argument("label_frames: input width " +
                                    std::to_string(width) + " != expected " +
                                    std::to_string(in_width));
    if (static_cast<size_t>(T) * width != rows.size())
        throw std::invalid_argument("label_frames: row buffer size mismatch");

    LabelSequence labels(static_cast<size_t>(T));
    std::vector<float> proj(static_cast<size_t>(cb.P));
    for (int t = 0; t < T; ++t) {
        const float* x = rows.data() + static_cast<size_t>(t) * width;
        if (cb.kind == "random_projection") {
            for (int p = 0; p < cb.P; ++p) {
                double s = 0;
                for (int d = 0; d < cb.D; ++d)
                    s += static_cast<double>(x[d]) *
                         cb.projection[static_cast<size_t>(d) * cb.P + p];
                proj[static_cast<size_t>(p)] = static_cast<float>(s);
            }
            labels[static_cast<size_t>(t)] = nearest(proj.data(), cb);
        } else {
            labels[static_cast<size_t>(t)] = nearest(x, cb);
        }
    }
    return labels;
}

LabelSequence label_frames(const FeatureSequence& f, const Codebook& cb) {
    return label_frames(f.frames, f.T, f.D, cb);
}

double quantizer_inertia(const std::vector<float>& points, int N, const Codebook& cb) {
    double total = 0;
    for (int n = 0; n < N; ++n) {
        const float* x = points.data() + static_cast<size_t>(n) * cb.P;
        int k = nearest(x, cb);
        const float* c = cb.codeword(k);
        for (int p = 0; p < cb.P; ++p) {
            double diff = static_cast<double>(x[p]) - c[p];
            total += diff * diff;
        }
    }
    return total;
}

Codebook kmeans_fit(const std::vector<float>& points, int N, int P, int K,
                    int iters, uint64_t seed) {
    if (N < K) throw std::invalid_argument("kmeans_fit: N < K");
    if (K < 2) throw std::invalid_argument("kmeans_fit: K >= 2 required");
    if (static_cast<size_t>(N) * P != points.size())
        throw std::invalid_argument("kmeans_fit: point buffer size mismatch");

    Codebook cb;
    cb.K = K;
    cb.P = P;
    cb.kind = "kmeans";
    cb.vectors.assign(static_cast<size_t>(K) * P, 0.0f);
    Rng rng = make_rng(seed);

    auto point = [&](int n) { return points.data() + static_cast<size_t>(n) * P; };
    auto dist2 = [&](const float* a, const float* b) {
        double d = 0;
        for (int p = 0; p < P; ++p) {
            double diff = static_cast<double>(a[p]) - b[p];
            d += diff * diff;
        }
        return d;
    };

    // k-means++ seeding
    std::uniform_int_distribution<int> first(0, N - 1);
    std::copy_n(point(first(rng)), P, cb.vectors.begin());
    std::vector<double> mind(static_cast<size_t>(N),
                             std::numeric_limits<double>::infinity());
    for (int k = 1; k < K; ++k) {
        double total = 0;
        for (int n = 0; n < N; ++n) {
            double d = dist2(point(n), cb.codeword(k - 1));
            mind[static_cast<size_t>(n)] = std::min(mind[static_cast<size_t>(n)], d);
            total += mind[static_cast<size_t>(n)];
        }
        int chosen = 0;
        if (total > 0) {
            std::uniform_real_distribution<double> u(0.0, total);
            double target = u(rng), acc = 0;
            for (int n = 0; n < N; ++n) {
                acc += mind[static_cast<size_t>(n)];
                if (acc >= target) { chosen = n; break; }
            }
        } else {
            chosen = first(rng);
        }
        std::copy_n(point(chosen), P, cb.vectors.begin() + static_cast<size_t>(k) * P);
    }

    std::vector<int> assign(static_cast<size_t>(N));
    std::vector<double> pdist(static_cast<size_t>(N));
    double prev_inertia = std::numeric_limits<double>::infinity();
    for (int it = 0; it < iters; ++it) {
        double inertia = 0;
        for (int n = 0; n < N; ++n) {
            int k = nearest(point(n), cb);
            assign[static_cast<size_t>(n)] = k;
            pdist[static_cast<size_t>(n)] = dist2(point(n), cb.codeword(k));
            inertia += pdist[static_cast<size_t>(n)];
        }
        if (inertia > prev_inertia + 1e-6 * std::max(1.0, prev_inertia))
            throw NumericError("kmeans inertia increased");
        prev_inertia = inertia;

        std::vector<double> sum(static_cast<size_t>(K) * P, 0.0);
        std::vector<int> count(static_cast<size_t>(K), 0);
        for (int n = 0; n < N; ++n) {
            int k = assign[static_cast<size_t>(n)];
            ++count[static_cast<size_t>(k)];
            for (int p = 0; p < P; ++p)
                sum[static_cast<size_t>(k) * P + p] += point(n)[p];
        }
        for (int k = 0; k < K; ++k) {
            if (count[static_cast<size_t>(k)] > 0) {
                for (int p = 0; p < P; ++p)
                    cb.vectors[static_cast<size_t>(k) * P + p] = static_cast<float>(
                        sum[static_cast<size_t>(k) * P + p] / count[static_cast<size_t>(k)]);
            } else {
                // re-seed dead cluster from the farthest point
                int far = static_cast<int>(std::max_element(pdist.begin(), pdist.end()) -
                                           pdist.begin());
                std::copy_n(point(far), P,
                            cb.vectors.begin() + static_cast<size_t>(k) * P);
                pdist[static_cast<size_t>(far)] = 0;
            }
        }
    }
    cb.inertia = static_cast<float>(quantizer_inertia(points, N, cb));
    return cb;
}

}  // namespace acllm
