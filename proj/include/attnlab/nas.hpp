#pragma once

// Progressive design-space reduction over attention kinds and insertion
// positions: single-position sweep, Pareto pruning against fast/deep
// anchors, budgeted combination enumeration, and the quantitative rules
// report. The training/eval backend is injected, so searches run equally on
// the real trainer or on a rigged objective.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "attnlab/cost.hpp"
#include "attnlab/reporting.hpp"
#include "attnlab/train.hpp"

namespace attnlab {

struct TrialResult {
    InsertionPlan plan;
    std::string plan_str;  // canonical form; "baseline"/"deep" anchors keep "none"
    LossKind loss = LossKind::CE_LS;
    std::vector<uint64_t> seeds;
    double map_mean = 0.0;
    double map_std = 0.0;
    CostReport cost;
    bool is_anchor = false;
    std::string anchor_name;  // "baseline" | "deep" | ""

    std::string key() const { return is_anchor ? anchor_name : plan_str; }
};

struct SearchSpace {
    std::vector<AttentionKind> kinds{AttentionKind::SE, AttentionKind::HAC,
                                     AttentionKind::NL, AttentionKind::CNL};
    std::vector<int> positions;  // empty = every position of the config
    int max_blocks = 3;
    int seeds_per_trial = 3;
    AttentionSpec base_spec;  // r / inner ratio shared by every candidate

    // After pruning: the surviving (kind, position) pairs. Empty before.
    std::vector<std::pair<AttentionKind, int>> survivors;
};

// Injected trial backend. `run_trial` trains one seed and returns mAP;
// `cost_of` prices a plan; the deep pair describes the reference backbone.
struct TrialContext {
    BackboneConfig config;
    LossKind loss = LossKind::CE_LS;
    uint64_t seed_base = 1;  // trial seeds are seed_base, seed_base+1, ...
    std::function<double(const InsertionPlan&, uint64_t)> run_trial;
    std::function<CostReport(const InsertionPlan&)> cost_of;
    std::function<double(uint64_t)> run_deep;
    std::function<CostReport()> deep_cost;

    // Resumable-search hooks (run_search wires these to trials.csv); a trial
    // whose key the lookup recognizes is reused instead of re-run.
    std::function<bool(const std::string&, TrialResult&)> cache_lookup;
    std::function<void(const TrialResult&)> cache_record;
};

// Trains `plan` over the space's seed count and aggregates mean/std.
TrialResult run_plan_trial(const SearchSpace& space, const TrialContext& ctx,
                           const InsertionPlan& plan);

// One trial per (kind, position), plus baseline and deep-reference anchors
// (anchors first). Cross-checks MAC position-invariance between trials that
// see identical tensor shapes.
std::vector<TrialResult> sweep_single_positions(const SearchSpace& space,
                                                const TrialContext& ctx);

// Applies the Pareto exclusion rule against the anchors, then drops kinds
// dominated by another kind at every position where they survived. Returns
// the space restricted to the surviving pairs (possibly empty).
SearchSpace prune_design_space(const std::vector<TrialResult>& trials,
                               const SearchSpace& space);

// Candidate plans of size 2..max_blocks over the surviving pairs, ordered by
// the rule heuristics: more stage-end positions first, then wider cross-stage
// spread, then larger pairwise distance, single-kind before mixed, and the
// canonical string as the final tiebreak.
std::vector<InsertionPlan> enumerate_combinations(const SearchSpace& space,
                                                  const BackboneConfig& cfg);

// Runs the first min(budget, total) enumerated plans; results sorted by
// (map_mean, speed) descending.
std::vector<TrialResult> search_combinations(const SearchSpace& space,
                                             const TrialContext& ctx, int budget);

// ---- rules report -----------------------------------------------------------

struct StageBest {
    int stage = 0;     // 1-based backbone stage
    int position = 0;  // best single-block position inside it
    double map = 0.0;
};

struct RulesReport {
    bool partial = false;  // some section lacked trials

    // Rule 1: attention helps most at stage ends.
    double stage_end_mean_map = 0.0;
    double interior_mean_map = 0.0;

    // Rule 2: spread positions far apart.
    double distance_map_correlation = 0.0;  // Pearson over combination trials
    int combo_count = 0;

    // Rule 3: mixing block kinds is not worth the cost.
    double best_single_kind_map = 0.0;
    double best_mixed_kind_map = 0.0;
    int64_t mixed_extra_macs = 0;  // cost annotation: best-mixed minus best-single

    std::vector<StageBest> per_stage_best;
    std::vector<PlotPoint> points;  // (speed, mAP) per trial, anchors marked

    std::string text() const;
};

RulesReport derive_rules_report(const std::vector<TrialResult>& trials,
                                const BackboneConfig& cfg);

// Pearson correlation between each combination's mean pairwise position
// distance and its mAP; exposed so reports can be recomputed from the CSV.
double distance_map_correlation(const std::vector<std::vector<int>>& position_sets,
                                const std::vector<double>& maps);

// ---- trials.csv ---------------------------------------------------------------

CsvTable trials_to_csv(const std::vector<TrialResult>& trials);
std::vector<TrialResult> trials_from_csv(const CsvTable& table,
                                         const AttentionSpec& base_spec);

// ---- orchestration -------------------------------------------------------------

struct SearchOutcome {
    std::vector<TrialResult> singles;  // anchors + single-position sweep
    SearchSpace pruned;
    std::vector<TrialResult> combos;  // ranked
    RulesReport report;
};

// Full sweep -> prune -> combine -> report. When `trials_csv_path` is
// non-empty, finished trials are reloaded from it (keyed by plan string and
// loss) instead of re-run, and the file is rewritten canonically as trials
// complete.
SearchOutcome run_search(const SearchSpace& space, const TrialContext& ctx, int budget,
                         const std::string& trials_csv_path);

}  // namespace attnlab
