#pragma once

// Single-shot re-identification evaluation: cosine ranking with the standard
// same-identity/same-camera exclusion, mAP, and CMC.

#include <vector>

#include "attnlab/backbone.hpp"
#include "attnlab/data.hpp"

namespace attnlab {

struct RetrievalResult {
    double map = 0.0;
    std::vector<double> cmc;           // cmc[k-1] = rank-k accuracy
    std::vector<double> per_query_ap;  // skipped queries carry -1
    int valid_queries = 0;

    double rank(int k) const {
        return cmc.empty() ? 0.0
                           : cmc[static_cast<size_t>(std::min(k, static_cast<int>(cmc.size())) -
                                                     1)];
    }
};

// Post-BNNeck embeddings, L2-normalized, extracted in eval mode without
// gradients. Batched internally; eval-mode BN makes the result independent
// of the batching.
Tensor<float> extract_features(Model& model, const Dataset& ds,
                               const std::vector<int>& indices, int batch_size = 16);

// Cosine distance 1 - q g^T on unit-normalized rows. The flag switches to
// squared Euclidean for callers that want it.
Tensor<float> distance_matrix(const Tensor<float>& q, const Tensor<float>& g,
                              bool euclidean = false);

// Market-style protocol: per query, gallery entries with the same id AND the
// same camera are excluded, junk ids (-1) are always excluded, ties break by
// gallery index, queries with no remaining positive are skipped.
RetrievalResult evaluate(const Tensor<float>& dist, const std::vector<int>& q_ids,
                         const std::vector<int>& q_cams, const std::vector<int>& g_ids,
                         const std::vector<int>& g_cams);

// Literal-definition average precision for one query row: sort, walk ranks,
// average precision at each positive. Entries flagged excluded never appear
// in the ranking.
double brute_force_ap_oracle(const std::vector<float>& dist_row,
                             const std::vector<char>& positive,
                             const std::vector<char>& excluded);

}  // namespace attnlab
