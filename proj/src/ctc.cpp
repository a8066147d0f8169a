#include "acllm/ctc.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace acllm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double lse(double a, double b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace

int ctc_min_frames(const std::vector<int>& target) {
    int n = static_cast<int>(target.size());
    for (size_t i = 1; i < target.size(); ++i)
        if (target[i] == target[i - 1]) ++n;
    return n;
}

Tensor ctc_loss(const Tensor& logits, const std::vector<int>& target) {
    const int T = logits.rows();
    const int V1 = logits.cols();  // vocab + blank
    if (T < 1 || V1 < 2) throw std::invalid_argument("ctc_loss: bad logits shape");
    for (int tok : target)
        if (tok < 1 || tok >= V1)
            throw std::out_of_range("ctc_loss: target token out of range");
    if (T < ctc_min_frames(target))
        throw std::invalid_argument("ctc_loss: too few frames for target");

    // log-softmax per frame
    std::vector<double> logy(static_cast<size_t>(T) * V1);
    for (int t = 0; t < T; ++t) {
        const float* row = logits.values().data() + static_cast<size_t>(t) * V1;
        double mx = row[0];
        for (int k = 1; k < V1; ++k) mx = std::max(mx, static_cast<double>(row[k]));
        double z = 0;
        for (int k = 0; k < V1; ++k) z += std::exp(row[k] - mx);
        double lz = mx + std::log(z);
        for (int k = 0; k < V1; ++k)
            logy[static_cast<size_t>(t) * V1 + k] = row[k] - lz;
    }

    // extended target with interleaved blanks
    const int L = static_cast<int>(target.size());
    const int S = 2 * L + 1;
    std::vector<int> lab(static_cast<size_t>(S), 0);
    for (int i = 0; i < L; ++i) lab[static_cast<size_t>(2 * i + 1)] = target[static_cast<size_t>(i)];
    auto ly = [&](int t, int s) {
        return logy[static_cast<size_t>(t) * V1 + lab[static_cast<size_t>(s)]];
    };
    auto can_skip = [&](int s) {
        return s >= 2 && lab[static_cast<size_t>(s)] != 0 &&
               lab[static_cast<size_t>(s)] != lab[static_cast<size_t>(s - 2)];
    };

    // forward: alpha includes the emission at t
    std::vector<double> la(static_cast<size_t>(T) * S, kNegInf);
    la[0] = ly(0, 0);
    if (S > 1) la[1] = ly(0, 1);
    for (int t = 1; t < T; ++t)
        for (int s = 0; s < S; ++s) {
            double a = la[static_cast<size_t>(t - 1) * S + s];
            if (s >= 1) a = lse(a, la[static_cast<size_t>(t - 1) * S + s - 1]);
            if (can_skip(s)) a = lse(a, la[static_cast<size_t>(t - 1) * S + s - 2]);
            if (a != kNegInf) la[static_cast<size_t>(t) * S + s] = a + ly(t, s);
        }
    double logp = la[static_cast<size_t>(T - 1) * S + S - 1];
    if (S > 1) logp = lse(logp, la[static_cast<size_t>(T - 1) * S + S - 2]);
    if (logp == kNegInf) throw NumericError("ctc_loss: zero-probability alignment");
    const float loss = static_cast<float>(-logp);
    if (!std::isfinite(loss)) throw NumericError("ctc_loss: non-finite loss");

    auto node = std::make_shared<TensorImpl>();
    node->shape = {1, 1};
    node->v = {loss};
    node->op = "ctc_loss";

    if (GradGuard::enabled() && logits.requires_grad()) {
        // backward: beta excludes the emission at t, so p = sum_s a_t(s) b_t(s)
        std::vector<double> lb(static_cast<size_t>(T) * S, kNegInf);
        lb[static_cast<size_t>(T - 1) * S + S - 1] = 0;
        if (S > 1) lb[static_cast<size_t>(T - 1) * S + S - 2] = 0;
        for (int t = T - 2; t >= 0; --t)
            for (int s = 0; s < S; ++s) {
                double b = lb[static_cast<size_t>(t + 1) * S + s] + ly(t + 1, s);
                if (s + 1 < S)
                    b = lse(b, lb[static_cast<size_t>(t + 1) * S + s + 1] + ly(t + 1, s + 1));
                if (s + 2 < S && can_skip(s + 2))
                    b = lse(b, lb[static_cast<size_t>(t + 1) * S + s + 2] + ly(t + 1, s + 2));
                lb[static_cast<size_t>(t) * S + s] = b;
            }

        auto grad = std::make_shared<std::vector<float>>(static_cast<size_t>(T) * V1);
        for (int t = 0; t < T; ++t) {
            std::vector<double> occ(static_cast<size_t>(V1), kNegInf);
            for (int s = 0; s < S; ++s) {
                double g = la[static_cast<size_t>(t) * S + s] +
                           lb[static_cast<size_t>(t) * S + s];
                int k = lab[static_cast<size_t>(s)];
                occ[static_cast<size_t>(k)] = lse(occ[static_cast<size_t>(k)], g);
            }
            for (int k = 0; k < V1; ++k) {
                double y = std::exp(logy[static_cast<size_t>(t) * V1 + k]);
                double post = occ[static_cast<size_t>(k)] == kNegInf
                                  ? 0.0
                                  : std::exp(occ[static_cast<size_t>(k)] - logp);
                (*grad)[static_cast<size_t>(t) * V1 + k] =
                    static_cast<float>(y - post);
            }
        }
        node->requires_grad = true;
        node->parents = {logits.impl};
        TensorImpl* lp = logits.impl.get();
        TensorImpl* np = node.get();
        node->backprop = [lp, np, grad]() {
            lp->ensure_grad();
            const float go = np->g[0];
            for (size_t i = 0; i < grad->size(); ++i) lp->g[i] += go * (*grad)[i];
        };
    }
    return Tensor(node);
}

std::vector<int> ctc_greedy_decode(const Tensor& logits) {
    const int T = logits.rows();
    const int V1 = logits.cols();
    std::vector<int> out;
    int prev = 0;
    for (int t = 0; t < T; ++t) {
        const float* row = logits.values().data() + static_cast<size_t>(t) * V1;
        int arg = 0;
        for (int k = 1; k < V1; ++k)
            if (row[k] > row[arg]) arg = k;
        if (arg != 0 && arg != prev) out.push_back(arg);
        prev = arg;
    }
    return out;
}

}  // namespace acllm
