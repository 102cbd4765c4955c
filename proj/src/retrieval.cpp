#include "attnlab/retrieval.hpp"

#include <algorithm>
#include <numeric>

namespace attnlab {

Tensor<float> extract_features(Model& model, const Dataset& ds,
                               const std::vector<int>& indices, int batch_size) {
    check_shape(!indices.empty(), "extract_features: empty index list");
    check_shape(batch_size >= 1, "extract_features: bad batch size");
    model.set_training(false);
    NoGradGuard no_grad;
    const int d = model.config().final_dim();
    auto out = Tensor<float>::zeros({static_cast<int>(indices.size()), d});
    for (size_t start = 0; start < indices.size(); start += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(indices.size(), start + static_cast<size_t>(batch_size));
        std::vector<int> chunk(indices.begin() + static_cast<std::ptrdiff_t>(start),
                               indices.begin() + static_cast<std::ptrdiff_t>(end));
        auto features = model.forward_features(make_batch(ds, chunk));
        auto normed = l2_normalize_rows(features);
        std::copy(normed.data(), normed.data() + normed.numel(),
                  out.data() + start * static_cast<size_t>(d));
    }
    check_finite(out, "extracted features");
    return out;
}

Tensor<float> distance_matrix(const Tensor<float>& q, const Tensor<float>& g,
                              bool euclidean) {
    check_shape(q.ndim() == 2 && g.ndim() == 2 && q.dim(1) == g.dim(1),
                "distance_matrix: incompatible shapes " + shape_str(q.shape()) + " and " +
                    shape_str(g.shape()));
    const int nq = q.dim(0), ng = g.dim(0), d = q.dim(1);
    auto out = Tensor<float>::zeros({nq, ng});
    const float* qd = q.data();
    const float* gd = g.data();
    float* od = out.data();
    for (int i = 0; i < nq; ++i)
        for (int j = 0; j < ng; ++j) {
            const float* a = qd + static_cast<size_t>(i) * d;
            const float* b = gd + static_cast<size_t>(j) * d;
            float acc = 0.0f;
            if (euclidean) {
                for (int k = 0; k < d; ++k) acc += (a[k] - b[k]) * (a[k] - b[k]);
            } else {
                for (int k = 0; k < d; ++k) acc += a[k] * b[k];
                acc = 1.0f - acc;
            }
            od[static_cast<size_t>(i) * ng + j] = acc;
        }
    return out;
}

RetrievalResult evaluate(const Tensor<float>& dist, const std::vector<int>& q_ids,
                         const std::vector<int>& q_cams, const std::vector<int>& g_ids,
                         const std::vector<int>& g_cams) {
    check_shape(dist.ndim() == 2, "evaluate expects a [Q x G] distance matrix");
    const int nq = dist.dim(0), ng = dist.dim(1);
    check_shape(static_cast<int>(q_ids.size()) == nq &&
                    static_cast<int>(q_cams.size()) == nq &&
                    static_cast<int>(g_ids.size()) == ng &&
                    static_cast<int>(g_cams.size()) == ng,
                "evaluate: label lengths do not match the distance matrix");

    RetrievalResult result;
    result.per_query_ap.assign(static_cast<size_t>(nq), -1.0);
    const int cmc_len = ng;
    std::vector<double> cmc_hits(static_cast<size_t>(cmc_len), 0.0);
    const float* dd = dist.data();

    std::vector<int> order(static_cast<size_t>(ng));
    for (int qi = 0; qi < nq; ++qi) {
        const float* row = dd + static_cast<size_t>(qi) * ng;
        std::iota(order.begin(), order.end(), 0);
        // Ties break by gallery index: stable sort on distance alone.
        std::stable_sort(order.begin(), order.end(),
                         [row](int a, int b) { return row[a] < row[b]; });

        int rank = 0;       // position among non-excluded entries, 1-based
        int hits = 0;       // positives seen so far
        double ap_sum = 0;  // sum of precision at each positive
        int first_hit_rank = -1;
        int total_pos = 0;
        for (int j = 0; j < ng; ++j) {
            const int gi = order[static_cast<size_t>(j)];
            const bool junk = g_ids[static_cast<size_t>(gi)] < 0;
            const bool same_id = g_ids[static_cast<size_t>(gi)] == q_ids[static_cast<size_t>(qi)];
            const bool excluded =
                junk || (same_id && g_cams[static_cast<size_t>(gi)] ==
                                        q_cams[static_cast<size_t>(qi)]);
            if (excluded) continue;
            ++rank;
            if (same_id) {
                ++hits;
                ++total_pos;
                ap_sum += static_cast<double>(hits) / rank;
                if (first_hit_rank < 0) first_hit_rank = rank;
            }
        }
        if (total_pos == 0) continue;  // no valid positive: query skipped
        result.per_query_ap[static_cast<size_t>(qi)] = ap_sum / total_pos;
        ++result.valid_queries;
        for (int k = first_hit_rank - 1; k < cmc_len; ++k)
            cmc_hits[static_cast<size_t>(k)] += 1.0;
    }
    check_data(result.valid_queries > 0,
               "evaluate: no query has a valid positive after protocol exclusion");

    double map_sum = 0.0;
    for (double ap : result.per_query_ap)
        if (ap >= 0.0) map_sum += ap;
    result.map = map_sum / result.valid_queries;
    result.cmc.resize(static_cast<size_t>(cmc_len));
    for (int k = 0; k < cmc_len; ++k)
        result.cmc[static_cast<size_t>(k)] = cmc_hits[static_cast<size_t>(k)] /
                                             result.valid_queries;
    return result;
}

double brute_force_ap_oracle(const std::vector<float>& dist_row,
                             const std::vector<char>& positive,
                             const std::vector<char>& excluded) {
    const int n = static_cast<int>(dist_row.size());
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&dist_row](int a, int b) {
        return dist_row[static_cast<size_t>(a)] < dist_row[static_cast<size_t>(b)];
    });
    int rank = 0, hits = 0, total = 0;
    double ap_sum = 0.0;
    for (int j = 0; j < n; ++j) {
        const int gi = order[static_cast<size_t>(j)];
        if (excluded[static_cast<size_t>(gi)]) continue;
        ++rank;
        if (positive[static_cast<size_t>(gi)]) {
            ++hits;
            ++total;
            ap_sum += static_cast<double>(hits) / rank;
        }
    }
    if (total == 0) return -1.0;
    return ap_sum / total;
}

}  // namespace attnlab
