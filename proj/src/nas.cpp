#include "attnlab/nas.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>

namespace attnlab {

namespace {

double mean_of(const std::vector<double>& xs) {
    double s = 0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

double pop_std(const std::vector<double>& xs, double mean) {
    double s = 0;
    for (double x : xs) s += (x - mean) * (x - mean);
    return std::sqrt(s / static_cast<double>(xs.size()));
}

std::string cache_key(const std::string& key, LossKind loss) {
    return key + "|" + loss_name(loss);
}

// Sweep and anchor trials share this path; "deep" routes to the reference
// backbone's hooks.
TrialResult run_tagged_trial(const SearchSpace& space, const TrialContext& ctx,
                             const InsertionPlan& plan, const std::string& anchor) {
    TrialResult r;
    r.plan = plan;
    r.plan_str = plan.str();
    r.loss = ctx.loss;
    r.is_anchor = !anchor.empty();
    r.anchor_name = anchor;

    if (ctx.cache_lookup) {
        TrialResult cached;
        if (ctx.cache_lookup(cache_key(r.key(), ctx.loss), cached)) {
            cached.plan = plan;
            cached.is_anchor = r.is_anchor;
            cached.anchor_name = anchor;
            return cached;
        }
    }

    r.cost = anchor == "deep" ? ctx.deep_cost() : ctx.cost_of(plan);
    r.cost.config_id = r.key();

    check_shape(space.seeds_per_trial >= 1, "search space: need at least one seed per trial");
    std::vector<double> maps;
    for (int i = 0; i < space.seeds_per_trial; ++i) {
        const uint64_t seed = ctx.seed_base + static_cast<uint64_t>(i);
        r.seeds.push_back(seed);
        maps.push_back(anchor == "deep" ? ctx.run_deep(seed) : ctx.run_trial(plan, seed));
    }
    r.map_mean = mean_of(maps);
    r.map_std = pop_std(maps, r.map_mean);

    if (ctx.cache_record) ctx.cache_record(r);
    return r;
}

// Stage bucket of a position, 1-based; the stem site joins stage 1.
int stage_of(int pos, const BackboneConfig& cfg) {
    const auto ends = cfg.stage_end_positions();
    for (size_t s = 0; s < ends.size(); ++s)
        if (pos <= ends[s]) return static_cast<int>(s) + 1;
    return static_cast<int>(ends.size());
}

int64_t attention_macs_of(const TrialResult& t) {
    for (const auto& l : t.cost.per_layer)
        if (l.name.rfind("attn", 0) == 0) return l.macs;
    return -1;
}

}  // namespace

TrialResult run_plan_trial(const SearchSpace& space, const TrialContext& ctx,
                           const InsertionPlan& plan) {
    return run_tagged_trial(space, ctx, plan, "");
}

std::vector<TrialResult> sweep_single_positions(const SearchSpace& space,
                                                const TrialContext& ctx) {
    std::vector<int> positions = space.positions;
    if (positions.empty()) {
        for (int p = 1; p <= ctx.config.num_positions(); ++p) positions.push_back(p);
    }

    std::vector<TrialResult> out;
    out.push_back(run_tagged_trial(space, ctx, InsertionPlan{}, "baseline"));
    out.push_back(run_tagged_trial(space, ctx, InsertionPlan{}, "deep"));

    for (AttentionKind kind : space.kinds) {
        for (int pos : positions) {
            AttentionSpec spec = space.base_spec;
            spec.kind = kind;
            InsertionPlan plan;
            plan.entries.emplace(pos, spec);
            out.push_back(run_tagged_trial(space, ctx, plan, ""));
        }
    }

    // Equal tensor shape must mean equal added MACs, wherever the block sits.
    const auto infos = enumerate_positions(ctx.config);
    std::map<std::string, int64_t> macs_by_shape;
    for (const auto& t : out) {
        if (t.is_anchor || t.plan.entries.size() != 1) continue;
        const int64_t macs = attention_macs_of(t);
        if (macs < 0) continue;  // rigged cost backends carry no layer rows
        const auto& [pos, spec] = *t.plan.entries.begin();
        const auto& info = infos[static_cast<size_t>(pos - 1)];
        const std::string shape_key = std::string(kind_name(spec.kind)) + ":" +
                                      std::to_string(info.channels) + "x" +
                                      std::to_string(info.h) + "x" + std::to_string(info.w);
        auto [it, fresh] = macs_by_shape.emplace(shape_key, macs);
        check_shape(fresh || it->second == macs,
                    "attention MACs differ between equal-shape positions (" + shape_key + ")");
    }
    return out;
}

SearchSpace prune_design_space(const std::vector<TrialResult>& trials,
                               const SearchSpace& space) {
    const TrialResult* baseline = nullptr;
    const TrialResult* deep = nullptr;
    for (const auto& t : trials) {
        if (t.anchor_name == "baseline") baseline = &t;
        if (t.anchor_name == "deep") deep = &t;
    }
    check_data(baseline && deep, "pruning needs baseline and deep anchor trials");

    std::vector<ParetoPoint> points;
    for (const auto& t : trials) {
        if (t.is_anchor || t.plan.entries.size() != 1) continue;
        points.push_back({t.key(), t.map_mean, t.cost.speed()});
    }
    const ParetoPoint fast{"baseline", baseline->map_mean, baseline->cost.speed()};
    const ParetoPoint ref_deep{"deep", deep->map_mean, deep->cost.speed()};
    const auto split = pareto_filter(points, fast, ref_deep);

    std::set<std::string> kept_ids;
    for (const auto& p : split.kept) kept_ids.insert(p.id);

    struct Survivor {
        AttentionKind kind;
        int pos;
        double map, speed;
    };
    std::vector<Survivor> survivors;
    for (const auto& t : trials) {
        if (t.is_anchor || t.plan.entries.size() != 1 || !kept_ids.count(t.key())) continue;
        const auto& [pos, spec] = *t.plan.entries.begin();
        survivors.push_back({spec.kind, pos, t.map_mean, t.cost.speed()});
    }

    // A kind leaves the space when, everywhere it survived, some other kind
    // is at least as good on both axes and strictly better on one.
    std::set<AttentionKind> dropped;
    for (AttentionKind a : space.kinds) {
        bool present = false, dominated_everywhere = true;
        for (const auto& sa : survivors) {
            if (sa.kind != a) continue;
            present = true;
            bool dominated_here = false;
            for (const auto& sb : survivors) {
                if (sb.kind == a || sb.pos != sa.pos) continue;
                if (sb.map >= sa.map && sb.speed >= sa.speed &&
                    (sb.map > sa.map || sb.speed > sa.speed)) {
                    dominated_here = true;
                    break;
                }
            }
            if (!dominated_here) {
                dominated_everywhere = false;
                break;
            }
        }
        if (present && dominated_everywhere) dropped.insert(a);
    }

    SearchSpace out = space;
    out.survivors.clear();
    out.kinds.clear();
    out.positions.clear();
    for (AttentionKind k : space.kinds) {  // preserve the input kind order
        if (dropped.count(k)) continue;
        for (const auto& s : survivors)
            if (s.kind == k) out.survivors.push_back({k, s.pos});
    }
    std::set<int> pos_set;
    for (const auto& [k, p] : out.survivors) {
        pos_set.insert(p);
        if (std::find(out.kinds.begin(), out.kinds.end(), k) == out.kinds.end())
            out.kinds.push_back(k);
    }
    out.positions.assign(pos_set.begin(), pos_set.end());
    return out;
}

std::vector<InsertionPlan> enumerate_combinations(const SearchSpace& space,
                                                  const BackboneConfig& cfg) {
    // kinds available at each surviving position, input kind order preserved
    std::map<int, std::vector<AttentionKind>> at;
    for (const auto& [k, p] : space.survivors) at[p].push_back(k);
    std::vector<int> positions;
    for (const auto& [p, ks] : at) positions.push_back(p);

    struct Keyed {
        InsertionPlan plan;
        int stage_ends, stages, min_dist, sum_dist, mixed;
        std::string str;
    };
    std::vector<Keyed> keyed;

    const auto ends = cfg.stage_end_positions();
    auto is_stage_end = [&](int p) {
        return std::find(ends.begin(), ends.end(), p) != ends.end();
    };

    std::vector<int> chosen;
    auto assign_kinds = [&](const std::vector<int>& pos_set) {
        std::vector<size_t> pick(pos_set.size(), 0);
        while (true) {
            InsertionPlan plan;
            std::set<AttentionKind> kinds_used;
            for (size_t i = 0; i < pos_set.size(); ++i) {
                AttentionSpec spec = space.base_spec;
                spec.kind = at[pos_set[i]][pick[i]];
                kinds_used.insert(spec.kind);
                plan.entries.emplace(pos_set[i], spec);
            }
            Keyed k;
            k.stage_ends = 0;
            std::set<int> stages;
            k.min_dist = 1 << 20;
            k.sum_dist = 0;
            for (size_t i = 0; i < pos_set.size(); ++i) {
                if (is_stage_end(pos_set[i])) ++k.stage_ends;
                stages.insert(stage_of(pos_set[i], cfg));
                for (size_t j = i + 1; j < pos_set.size(); ++j) {
                    const int d = std::abs(pos_set[i] - pos_set[j]);
                    k.min_dist = std::min(k.min_dist, d);
                    k.sum_dist += d;
                }
            }
            k.stages = static_cast<int>(stages.size());
            k.mixed = kinds_used.size() > 1 ? 1 : 0;
            k.str = plan.str();
            k.plan = std::move(plan);
            keyed.push_back(std::move(k));

            size_t i = 0;  // odometer over the kind choices
            for (; i < pick.size(); ++i) {
                if (++pick[i] < at[pos_set[i]].size()) break;
                pick[i] = 0;
            }
            if (i == pick.size()) break;
        }
    };

    std::function<void(size_t)> choose = [&](size_t start) {
        const int size = static_cast<int>(chosen.size());
        if (size >= 2) assign_kinds(chosen);
        if (size == space.max_blocks) return;
        for (size_t i = start; i < positions.size(); ++i) {
            chosen.push_back(positions[i]);
            choose(i + 1);
            chosen.pop_back();
        }
    };
    choose(0);

    std::sort(keyed.begin(), keyed.end(), [](const Keyed& a, const Keyed& b) {
        if (a.stage_ends != b.stage_ends) return a.stage_ends > b.stage_ends;
        if (a.stages != b.stages) return a.stages > b.stages;
        if (a.min_dist != b.min_dist) return a.min_dist > b.min_dist;
        if (a.sum_dist != b.sum_dist) return a.sum_dist > b.sum_dist;
        if (a.mixed != b.mixed) return a.mixed < b.mixed;
        return a.str < b.str;
    });

    std::vector<InsertionPlan> out;
    out.reserve(keyed.size());
    for (auto& k : keyed) out.push_back(std::move(k.plan));
    return out;
}

std::vector<TrialResult> search_combinations(const SearchSpace& space,
                                             const TrialContext& ctx, int budget) {
    const auto plans = enumerate_combinations(space, ctx.config);
    const size_t limit = budget <= 0 ? plans.size()
                                     : std::min(plans.size(), static_cast<size_t>(budget));
    std::vector<TrialResult> out;
    for (size_t i = 0; i < limit; ++i) out.push_back(run_plan_trial(space, ctx, plans[i]));
    std::sort(out.begin(), out.end(), [](const TrialResult& a, const TrialResult& b) {
        if (a.map_mean != b.map_mean) return a.map_mean > b.map_mean;
        const double sa = a.cost.speed(), sb = b.cost.speed();
        if (sa != sb) return sa > sb;
        return a.plan_str < b.plan_str;
    });
    return out;
}

// ---- rules report -----------------------------------------------------------

double distance_map_correlation(const std::vector<std::vector<int>>& position_sets,
                                const std::vector<double>& maps) {
    check_shape(position_sets.size() == maps.size(),
                "correlation: position sets and maps must align");
    if (position_sets.size() < 2) return 0.0;
    std::vector<double> xs;
    for (const auto& ps : position_sets) {
        double sum = 0;
        int n = 0;
        for (size_t i = 0; i < ps.size(); ++i)
            for (size_t j = i + 1; j < ps.size(); ++j, ++n) sum += std::abs(ps[i] - ps[j]);
        xs.push_back(n ? sum / n : 0.0);
    }
    const double mx = mean_of(xs), my = mean_of(maps);
    double sxy = 0, sxx = 0, syy = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
        sxy += (xs[i] - mx) * (maps[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
        syy += (maps[i] - my) * (maps[i] - my);
    }
    if (sxx <= 0 || syy <= 0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

RulesReport derive_rules_report(const std::vector<TrialResult>& trials,
                                const BackboneConfig& cfg) {
    RulesReport rep;
    std::vector<const TrialResult*> singles, combos;
    for (const auto& t : trials) {
        if (t.is_anchor) continue;
        if (t.plan.entries.size() == 1) singles.push_back(&t);
        if (t.plan.entries.size() >= 2) combos.push_back(&t);
    }

    // rule 1: stage ends against interiors, plus the per-stage winners
    const auto ends = cfg.stage_end_positions();
    std::vector<double> end_maps, interior_maps;
    std::map<int, StageBest> best_by_stage;
    for (const auto* t : singles) {
        const int pos = t->plan.entries.begin()->first;
        const bool at_end = std::find(ends.begin(), ends.end(), pos) != ends.end();
        (at_end ? end_maps : interior_maps).push_back(t->map_mean);
        const int stage = stage_of(pos, cfg);
        auto it = best_by_stage.find(stage);
        if (it == best_by_stage.end() || t->map_mean > it->second.map)
            best_by_stage[stage] = {stage, pos, t->map_mean};
    }
    if (end_maps.empty() || interior_maps.empty()) {
        rep.partial = true;
    } else {
        rep.stage_end_mean_map = mean_of(end_maps);
        rep.interior_mean_map = mean_of(interior_maps);
    }
    for (const auto& [s, b] : best_by_stage) rep.per_stage_best.push_back(b);

    // rule 2: position spread against accuracy
    rep.combo_count = static_cast<int>(combos.size());
    if (combos.size() < 2) {
        rep.partial = true;
    } else {
        std::vector<std::vector<int>> sets;
        std::vector<double> maps;
        for (const auto* t : combos) {
            std::vector<int> ps;
            for (const auto& [pos, spec] : t->plan.entries) ps.push_back(pos);
            sets.push_back(std::move(ps));
            maps.push_back(t->map_mean);
        }
        rep.distance_map_correlation = distance_map_correlation(sets, maps);
    }

    // rule 3: single-kind versus mixed-kind combinations
    const TrialResult* best_single = nullptr;
    const TrialResult* best_mixed = nullptr;
    for (const auto* t : combos) {
        std::set<AttentionKind> kinds;
        for (const auto& [pos, spec] : t->plan.entries) kinds.insert(spec.kind);
        auto& slot = kinds.size() > 1 ? best_mixed : best_single;
        if (!slot || t->map_mean > slot->map_mean) slot = t;
    }
    if (best_single) rep.best_single_kind_map = best_single->map_mean;
    if (best_mixed) rep.best_mixed_kind_map = best_mixed->map_mean;
    if (best_single && best_mixed)
        rep.mixed_extra_macs = best_mixed->cost.total_macs - best_single->cost.total_macs;
    else
        rep.partial = true;

    for (const auto& t : trials)
        rep.points.push_back({t.cost.speed(), t.map_mean, t.key(), t.is_anchor});
    return rep;
}

std::string RulesReport::text() const {
    std::string s = "rules report\n";
    if (partial) s += "(partial: some sections lacked trials)\n";
    s += "rule 1 (prefer stage-end positions): stage-end mean mAP " +
         fmt_double_fixed(stage_end_mean_map, 4) + " vs interior " +
         fmt_double_fixed(interior_mean_map, 4) + " (gap " +
         fmt_double_fixed(stage_end_mean_map - interior_mean_map, 4) + ")\n";
    for (const auto& b : per_stage_best)
        s += "  stage " + fmt_int(b.stage) + ": best position " + fmt_int(b.position) +
             " (mAP " + fmt_double_fixed(b.map, 4) + ")\n";
    s += "rule 2 (spread positions apart): corr(mean pairwise distance, mAP) = " +
         fmt_double_fixed(distance_map_correlation, 3) + " over " + fmt_int(combo_count) +
         " combinations\n";
    s += "rule 3 (mixing kinds): best single-kind mAP " +
         fmt_double_fixed(best_single_kind_map, 4) + " vs best mixed " +
         fmt_double_fixed(best_mixed_kind_map, 4) + ", extra cost " +
         fmt_int(mixed_extra_macs) + " MACs\n";
    return s;
}

// ---- trials.csv ---------------------------------------------------------------

CsvTable trials_to_csv(const std::vector<TrialResult>& trials) {
    CsvTable t;
    t.schema = "trials";
    t.header = {"key",   "plan",   "loss",  "anchor", "seeds",       "map_mean",
                "map_std", "macs", "params", "speed",  "ms_per_batch"};
    for (const auto& r : trials) {
        std::string seeds;
        for (size_t i = 0; i < r.seeds.size(); ++i) {
            if (i) seeds += ';';
            seeds += fmt_int(static_cast<int64_t>(r.seeds[i]));
        }
        t.rows.push_back({r.key(), r.plan_str, loss_name(r.loss), r.anchor_name, seeds,
                          fmt_double(r.map_mean), fmt_double(r.map_std),
                          fmt_int(r.cost.total_macs), fmt_int(r.cost.total_params),
                          fmt_double(r.cost.speed()),
                          r.cost.measured ? fmt_double(r.cost.ms_per_batch) : ""});
    }
    return t;
}

namespace {

double parse_double_field(const std::string& s, const std::string& what) {
    double v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    check_data(ec == std::errc() && p == s.data() + s.size(),
               "trials csv: bad " + what + " '" + s + "'");
    return v;
}

int64_t parse_int_field(const std::string& s, const std::string& what) {
    int64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    check_data(ec == std::errc() && p == s.data() + s.size(),
               "trials csv: bad " + what + " '" + s + "'");
    return v;
}

}  // namespace

std::vector<TrialResult> trials_from_csv(const CsvTable& table,
                                         const AttentionSpec& base_spec) {
    check_data(table.schema == "trials", "expected a trials csv, got schema '" +
                                             table.schema + "'");
    std::map<std::string, int> col;
    for (size_t i = 0; i < table.header.size(); ++i)
        col[table.header[i]] = static_cast<int>(i);
    for (const char* need : {"key", "plan", "loss", "anchor", "seeds", "map_mean",
                             "map_std", "macs", "params", "speed", "ms_per_batch"})
        check_data(col.count(need), std::string("trials csv: missing column '") + need + "'");

    std::vector<TrialResult> out;
    for (const auto& row : table.rows) {
        auto f = [&](const char* name) -> const std::string& {
            return row[static_cast<size_t>(col[name])];
        };
        TrialResult r;
        r.plan_str = f("plan");
        r.plan = InsertionPlan::parse(r.plan_str, base_spec);
        const std::string loss = f("loss");
        if (loss == "ce") r.loss = LossKind::CE_LS;
        else if (loss == "circle") r.loss = LossKind::Circle;
        else throw DataError("trials csv: unknown loss '" + loss + "'");
        r.anchor_name = f("anchor");
        r.is_anchor = !r.anchor_name.empty();
        const std::string& seeds = f("seeds");
        size_t p = 0;
        while (p < seeds.size()) {
            size_t semi = seeds.find(';', p);
            if (semi == std::string::npos) semi = seeds.size();
            r.seeds.push_back(
                static_cast<uint64_t>(parse_int_field(seeds.substr(p, semi - p), "seed")));
            p = semi + 1;
        }
        r.map_mean = parse_double_field(f("map_mean"), "map_mean");
        r.map_std = parse_double_field(f("map_std"), "map_std");
        r.cost.config_id = f("key");
        r.cost.total_macs = parse_int_field(f("macs"), "macs");
        r.cost.total_params = parse_int_field(f("params"), "params");
        if (!f("ms_per_batch").empty()) {
            r.cost.measured = true;
            r.cost.ms_per_batch = parse_double_field(f("ms_per_batch"), "ms_per_batch");
            r.cost.batches_per_second = parse_double_field(f("speed"), "speed");
        }
        out.push_back(std::move(r));
    }
    return out;
}

// ---- orchestration -------------------------------------------------------------

SearchOutcome run_search(const SearchSpace& space, const TrialContext& ctx, int budget,
                         const std::string& trials_csv_path) {
    std::map<std::string, TrialResult> cache;
    if (!trials_csv_path.empty() && std::filesystem::exists(trials_csv_path)) {
        const auto prior =
            trials_from_csv(csv_parse(read_text_file(trials_csv_path)), space.base_spec);
        for (const auto& t : prior) cache.emplace(cache_key(t.key(), t.loss), t);
    }

    std::vector<TrialResult> done;  // canonical completion order
    TrialContext wrapped = ctx;
    wrapped.cache_lookup = [&](const std::string& key, TrialResult& out) {
        auto it = cache.find(key);
        if (it == cache.end()) return false;
        if (static_cast<int>(it->second.seeds.size()) != space.seeds_per_trial) return false;
        out = it->second;
        done.push_back(out);
        if (!trials_csv_path.empty())
            write_text_file(trials_csv_path, csv_encode(trials_to_csv(done)));
        return true;
    };
    wrapped.cache_record = [&](const TrialResult& r) {
        cache.emplace(cache_key(r.key(), r.loss), r);
        done.push_back(r);
        if (!trials_csv_path.empty())
            write_text_file(trials_csv_path, csv_encode(trials_to_csv(done)));
    };

    SearchOutcome outcome;
    outcome.singles = sweep_single_positions(space, wrapped);
    outcome.pruned = prune_design_space(outcome.singles, space);
    outcome.combos = search_combinations(outcome.pruned, wrapped, budget);

    std::vector<TrialResult> all = outcome.singles;
    all.insert(all.end(), outcome.combos.begin(), outcome.combos.end());
    outcome.report = derive_rules_report(all, ctx.config);
    return outcome;
}

}  // namespace attnlab
