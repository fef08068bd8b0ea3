#include "repe/reading.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "repe/parallel.hpp"
#include "repe/rng.hpp"

namespace repe {

std::string to_string(TokenPolicy policy) {
    return policy == TokenPolicy::LastToken ? "last" : "concept";
}

std::string to_string(FitMethod method) {
    switch (method) {
        case FitMethod::PCA: return "pca";
        case FitMethod::KMeans: return "kmeans";
        case FitMethod::MeanDiff: return "meandiff";
        case FitMethod::LogReg: return "logreg";
        case FitMethod::PromptDiff: return "promptdiff";
    }
    return "pca";
}

TokenPolicy token_policy_from_string(const std::string& s) {
    if (s == "last") return TokenPolicy::LastToken;
    if (s == "concept") return TokenPolicy::ConceptToken;
    throw SchemaError("unknown token policy '" + s + "'");
}

FitMethod fit_method_from_string(const std::string& s) {
    if (s == "pca") return FitMethod::PCA;
    if (s == "kmeans") return FitMethod::KMeans;
    if (s == "meandiff") return FitMethod::MeanDiff;
    if (s == "logreg") return FitMethod::LogReg;
    if (s == "promptdiff") return FitMethod::PromptDiff;
    throw SchemaError("unknown fit method '" + s + "'");
}

namespace {

std::size_t tap_count(const ModelBundle& model) { return model.config.n_layers + 1; }

// One stimulus worth of per-tap reads, or nothing on context overflow.
struct CollectedRows {
    std::vector<Vec> taps;
    bool ok = false;
};

Vec read_position(const Matrix& h, std::size_t pos) { return h.row_vec(pos); }

Vec read_span_mean(const Matrix& h, std::size_t begin, std::size_t end) {
    Vec acc(h.cols, 0.0);
    for (std::size_t t = begin; t < end; ++t)
        for (std::size_t j = 0; j < h.cols; ++j) acc[j] += h.row(t)[j];
    const double inv = 1.0 / static_cast<double>(end - begin);
    for (double& x : acc) x *= inv;
    return acc;
}

CollectedRows collect_one(const ModelBundle& model, const std::string& text,
                          const EditPlan& plan, TokenPolicy policy, std::size_t concept_begin,
                          std::size_t concept_end) {
    CollectedRows out;
    const TokenIds ids = tokenize(text);
    if (ids.size() > model.config.max_context) return out;  // caller counts the skip
    const ForwardResult fr =
        plan.steps.empty() ? forward_capture(model, ids) : forward_with_edits(model, ids, plan);
    out.taps.reserve(fr.hidden.layers.size());
    for (const Matrix& h : fr.hidden.layers) {
        if (policy == TokenPolicy::ConceptToken) {
            // byte i of the text sits at token i + 1 behind the BOS marker
            out.taps.push_back(read_span_mean(h, concept_begin + 1, concept_end + 1));
        } else {
            out.taps.push_back(read_position(h, ids.size() - 1));
        }
    }
    out.ok = true;
    return out;
}

ActivitySet assemble(const ModelBundle& model, std::vector<CollectedRows>& rows,
                     const std::vector<std::size_t>& sources, TokenPolicy policy,
                     std::string provenance) {
    ActivitySet set;
    set.policy = policy;
    set.provenance = std::move(provenance);
    set.layers.assign(tap_count(model), Matrix());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (!rows[i].ok) {
            ++set.skipped;
            continue;
        }
        for (std::size_t l = 0; l < set.layers.size(); ++l)
            set.layers[l].push_row(rows[i].taps[l]);
        set.row_record.push_back(sources[i]);
    }
    for (const Matrix& m : set.layers) check_finite(m, "collected activity");
    return set;
}

}  // namespace

ActivitySet collect_concept_activity(const ModelBundle& model, const ConceptTemplate& tpl,
                                     const std::vector<StimulusRecord>& records,
                                     TokenPolicy policy) {
    if (records.empty()) throw TooFewRecords("no stimuli to collect from");
    std::vector<CollectedRows> rows(records.size());
    std::vector<std::size_t> sources(records.size());
    parallel_for(records.size(), [&](std::size_t i) {
        const ConceptRender r = render_concept_ex(tpl, records[i]);
        rows[i] = collect_one(model, r.text, plan_for_record(records[i]), policy,
                              r.concept_begin, r.concept_end);
        sources[i] = i;
    });
    return assemble(model, rows, sources, policy, "concept:" + tpl.concept_name);
}

std::pair<ActivitySet, ActivitySet> collect_function_activity(
    const ModelBundle& model, const FunctionTemplate& tpl,
    const std::vector<StimulusRecord>& records, std::size_t max_trunc,
    const EditPlan* plus_plan, const EditPlan* minus_plan) {
    tpl.validate();
    if (records.empty()) throw TooFewRecords("no records to collect from");
    if (max_trunc == 0) throw EmptyOutput("max_trunc must allow at least one truncation");

    struct Item {
        std::size_t record = 0;
        std::string plus_text, minus_text;
    };
    std::vector<Item> items;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const StimulusRecord& rec = records[i];
        rec.validate();
        if (!rec.instruction || !rec.output)
            throw MissingField("function collection needs instruction and output");
        const auto truncs = truncations(*rec.output);
        const std::size_t n = std::min(truncs.size(), max_trunc);
        for (std::size_t k = 0; k < n; ++k) {
            Item item;
            item.record = i;
            item.plus_text =
                render_function(tpl, *rec.instruction, truncs[k], PromptSide::Experimental);
            item.minus_text =
                render_function(tpl, *rec.instruction, truncs[k], PromptSide::Reference);
            items.push_back(std::move(item));
        }
    }

    std::vector<CollectedRows> plus_rows(items.size()), minus_rows(items.size());
    std::vector<std::size_t> sources(items.size());
    parallel_for(items.size(), [&](std::size_t i) {
        EditPlan plus = plan_for_record(records[items[i].record]);
        EditPlan minus = plus;
        if (plus_plan)
            plus.steps.insert(plus.steps.end(), plus_plan->steps.begin(), plus_plan->steps.end());
        if (minus_plan)
            minus.steps.insert(minus.steps.end(), minus_plan->steps.begin(),
                               minus_plan->steps.end());
        plus_rows[i] =
            collect_one(model, items[i].plus_text, plus, TokenPolicy::LastToken, 0, 0);
        minus_rows[i] =
            collect_one(model, items[i].minus_text, minus, TokenPolicy::LastToken, 0, 0);
        // skip the instance on both sides to keep rows aligned
        if (!plus_rows[i].ok || !minus_rows[i].ok) plus_rows[i].ok = minus_rows[i].ok = false;
        sources[i] = items[i].record;
    });
    ActivitySet plus = assemble(model, plus_rows, sources, TokenPolicy::LastToken, "function+");
    ActivitySet minus = assemble(model, minus_rows, sources, TokenPolicy::LastToken, "function-");
    return {std::move(plus), std::move(minus)};
}

namespace {

bool nearly_zero_diff(const Vec& diff, const double* a, const double* b, std::size_t d) {
    double diff_sq = 0.0, a_sq = 0.0, b_sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        diff_sq += diff[j] * diff[j];
        a_sq += a[j] * a[j];
        b_sq += b[j] * b[j];
    }
    const double floor = 1e-12 * std::max({1.0, std::sqrt(a_sq), std::sqrt(b_sq)});
    return std::sqrt(diff_sq) <= floor;
}

}  // namespace

DifferenceSet build_differences(const ActivitySet& a,
                                const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
    if (pairs.empty()) throw TooFewRecords("no pairs to difference");
    DifferenceSet out;
    out.layers.assign(a.layers.size(), Matrix());
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        const Matrix& m = a.layers[l];
        for (const auto& [i, j] : pairs) {
            if (i >= m.rows || j >= m.rows)
                throw DimensionMismatch("pair index outside the activity set");
            Vec diff(m.cols);
            for (std::size_t c = 0; c < m.cols; ++c) diff[c] = m.row(i)[c] - m.row(j)[c];
            if (nearly_zero_diff(diff, m.row(i), m.row(j), m.cols)) {
                ++out.dropped;
                continue;
            }
            out.layers[l].push_row(normalized(diff));
        }
    }
    return out;
}

DifferenceSet build_function_differences(const ActivitySet& plus, const ActivitySet& minus) {
    if (plus.layers.size() != minus.layers.size())
        throw DimensionMismatch("function activity sets have different depths");
    DifferenceSet out;
    out.layers.assign(plus.layers.size(), Matrix());
    for (std::size_t l = 0; l < plus.layers.size(); ++l) {
        const Matrix& p = plus.layers[l];
        const Matrix& q = minus.layers[l];
        if (p.rows != q.rows || p.cols != q.cols)
            throw DimensionMismatch("function activity sets are not row-aligned");
        for (std::size_t i = 0; i < p.rows; ++i) {
            const double flip = i % 2 == 0 ? 1.0 : -1.0;
            Vec diff(p.cols);
            for (std::size_t c = 0; c < p.cols; ++c)
                diff[c] = flip * (p.row(i)[c] - q.row(i)[c]);
            if (nearly_zero_diff(diff, p.row(i), q.row(i), p.cols)) {
                ++out.dropped;
                continue;
            }
            out.layers[l].push_row(normalized(diff));
        }
    }
    return out;
}

namespace {

ReadingVector shell(std::size_t n_taps, FitMethod method, TokenPolicy policy,
                    std::string provenance) {
    ReadingVector rv;
    rv.layers.resize(n_taps);
    rv.method = method;
    rv.policy = policy;
    rv.provenance = std::move(provenance);
    return rv;
}

void fit_layer(LayerReading& layer, const Matrix& diffs, FitMethod method, std::uint64_t seed) {
    try {
        if (diffs.rows == 0) throw TooFewRecords("no difference rows at this layer");
        if (diffs.rows == 1) {
            layer.direction = normalized(diffs.row_vec(0));  // rank-1: the row itself
        } else if (method == FitMethod::PCA) {
            FitReport rep = pca_first_component(diffs);
            layer.direction = std::move(rep.direction);
            layer.explained_variance_ratio = std::move(rep.explained_variance_ratio);
        } else {
            layer.direction = kmeans2_direction(diffs, seed).direction;
        }
        layer.usable = true;
    } catch (const Error& e) {
        layer.usable = false;
        layer.error = e.what();
    }
}

}  // namespace

ReadingVector fit_reading_vector(const DifferenceSet& diffs, const ActivitySet& raw,
                                 FitMethod method, std::uint64_t seed) {
    if (method != FitMethod::PCA && method != FitMethod::KMeans)
        throw SchemaError("unsupervised fit expects pca or kmeans");
    if (diffs.layers.size() != raw.layers.size())
        throw DimensionMismatch("difference set depth does not match the activity set");
    ReadingVector rv = shell(diffs.layers.size(), method, raw.policy, raw.provenance);
    for (std::size_t l = 0; l < rv.layers.size(); ++l) {
        fit_layer(rv.layers[l], diffs.layers[l], method, derive_seed(seed, l));
        if (rv.layers[l].usable) rv.layers[l].stats = standardize_fit(raw.layers[l]);
    }
    return rv;
}

ReadingVector fit_reading_vector_labeled(const ActivitySet& raw, const std::vector<int>& labels,
                                         FitMethod method) {
    if (method != FitMethod::MeanDiff && method != FitMethod::LogReg)
        throw SchemaError("labeled fit expects meandiff or logreg");
    if (raw.layers.empty() || labels.size() != raw.layers[0].rows)
        throw DimensionMismatch("one label per activity row required");
    ReadingVector rv = shell(raw.layers.size(), method, raw.policy, raw.provenance);
    for (std::size_t l = 0; l < rv.layers.size(); ++l) {
        LayerReading& layer = rv.layers[l];
        const Matrix& rows = raw.layers[l];
        try {
            if (method == FitMethod::MeanDiff) {
                // Class means are accumulated in a sorted row order so that
                // permuting records within a class cannot perturb the sum.
                std::vector<Vec> high_rows, low_rows;
                for (std::size_t i = 0; i < rows.rows; ++i)
                    (labels[i] == 1 ? high_rows : low_rows).push_back(rows.row_vec(i));
                if (high_rows.empty() || low_rows.empty())
                    throw DegenerateLabels("mean difference needs both classes");
                std::sort(high_rows.begin(), high_rows.end());
                std::sort(low_rows.begin(), low_rows.end());
                layer.direction = mean_difference(Matrix::from_rows(high_rows),
                                                  Matrix::from_rows(low_rows))
                                      .direction;
            } else {
                layer.direction = logistic_direction(rows, labels).direction;
            }
            layer.stats = standardize_fit(rows);
            layer.usable = true;
        } catch (const Error& e) {
            layer.usable = false;
            layer.error = e.what();
        }
    }
    return rv;
}

ReadingVector fit_reading_vector_prompt(const ActivitySet& plus, const ActivitySet& minus) {
    if (plus.layers.size() != minus.layers.size())
        throw DimensionMismatch("activity sets have different depths");
    ReadingVector rv = shell(plus.layers.size(), FitMethod::PromptDiff, plus.policy,
                             plus.provenance);
    for (std::size_t l = 0; l < rv.layers.size(); ++l) {
        LayerReading& layer = rv.layers[l];
        const Matrix& p = plus.layers[l];
        const Matrix& q = minus.layers[l];
        try {
            if (p.rows == 0 || q.rows == 0) throw TooFewRecords("empty activity set");
            Vec mp(p.cols, 0.0), mq(q.cols, 0.0);
            for (std::size_t i = 0; i < p.rows; ++i)
                for (std::size_t c = 0; c < p.cols; ++c) mp[c] += p.row(i)[c];
            for (double& x : mp) x /= static_cast<double>(p.rows);
            for (std::size_t i = 0; i < q.rows; ++i)
                for (std::size_t c = 0; c < q.cols; ++c) mq[c] += q.row(i)[c];
            for (double& x : mq) x /= static_cast<double>(q.rows);
            layer.direction = prompt_difference(mp, mq).direction;
            Matrix both = p;
            for (std::size_t i = 0; i < q.rows; ++i) both.push_row(q.row_vec(i));
            layer.stats = standardize_fit(both);
            layer.usable = true;
        } catch (const Error& e) {
            layer.usable = false;
            layer.error = e.what();
        }
    }
    return rv;
}

namespace {

const LayerReading& usable_layer(const ReadingVector& rv, std::size_t layer) {
    if (layer >= rv.layers.size()) throw InvalidLayer("layer index outside the reading vector");
    if (!rv.layers[layer].usable)
        throw UnusableLayer("layer " + std::to_string(layer) + " has no fitted direction: " +
                            rv.layers[layer].error);
    return rv.layers[layer];
}

// Raw, unsigned score used to decide the sign itself.
double unsigned_state_score(const LayerReading& layer, const Vec& state) {
    return dot(standardize_apply(layer.stats, state), layer.direction);
}

void split_means(const std::vector<double>& scores, const std::vector<int>& labels, double& m1,
                 double& m0) {
    double s1 = 0.0, s0 = 0.0;
    std::size_t n1 = 0, n0 = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] == 1) {
            s1 += scores[i];
            ++n1;
        } else {
            s0 += scores[i];
            ++n0;
        }
    }
    if (n1 == 0 || n0 == 0) throw DegenerateLabels("need an example of each class");
    m1 = s1 / static_cast<double>(n1);
    m0 = s0 / static_cast<double>(n0);
}

// Collects labeled concept activity and hands back aligned labels.
ActivitySet labeled_activity(const ModelBundle& model, const ConceptTemplate& tpl,
                             const std::vector<StimulusRecord>& records, TokenPolicy policy,
                             std::vector<int>& labels) {
    for (const StimulusRecord& rec : records)
        if (!rec.label) throw DegenerateLabels("every record needs a label here");
    ActivitySet act = collect_concept_activity(model, tpl, records, policy);
    labels.clear();
    for (std::size_t src : act.row_record) labels.push_back(*records[src].label);
    return act;
}

}  // namespace

void determine_sign(ReadingVector& rv, const ModelBundle& model, const ConceptTemplate& tpl,
                    const std::vector<StimulusRecord>& labeled) {
    std::vector<int> labels;
    const ActivitySet act = labeled_activity(model, tpl, labeled, rv.policy, labels);
    if (act.layers.size() != rv.layers.size())
        throw DimensionMismatch("model depth does not match the reading vector");
    for (std::size_t l = 0; l < rv.layers.size(); ++l) {
        LayerReading& layer = rv.layers[l];
        if (!layer.usable) continue;
        std::vector<double> scores(act.layers[l].rows);
        for (std::size_t i = 0; i < scores.size(); ++i)
            scores[i] = unsigned_state_score(layer, act.layers[l].row_vec(i));
        double m1 = 0.0, m0 = 0.0;
        split_means(scores, labels, m1, m0);
        layer.sign = m1 >= m0 ? 1 : -1;
    }
}

double score_state(const ReadingVector& rv, std::size_t layer, const Vec& state) {
    const LayerReading& lr = usable_layer(rv, layer);
    return lr.sign * unsigned_state_score(lr, state);
}

double score(const ReadingVector& rv, const ModelBundle& model, const std::string& text,
             std::size_t layer) {
    usable_layer(rv, layer);
    const TokenIds ids = tokenize(text);
    const ForwardResult fr = forward_capture(model, ids);
    return score_state(rv, layer, fr.hidden.layers[layer].row_vec(ids.size() - 1));
}

double score_record(const ReadingVector& rv, const ModelBundle& model,
                    const ConceptTemplate& tpl, const StimulusRecord& record, std::size_t layer,
                    const EditPlan* extra) {
    usable_layer(rv, layer);
    const ConceptRender r = render_concept_ex(tpl, record);
    const TokenIds ids = tokenize(r.text);
    if (ids.size() > model.config.max_context)
        throw ContextOverflow("rendered record exceeds the context window");
    EditPlan plan = plan_for_record(record);
    if (extra)
        plan.steps.insert(plan.steps.end(), extra->steps.begin(), extra->steps.end());
    const ForwardResult fr =
        plan.steps.empty() ? forward_capture(model, ids) : forward_with_edits(model, ids, plan);
    const Matrix& h = fr.hidden.layers[layer];
    Vec state;
    if (rv.policy == TokenPolicy::ConceptToken)
        state = read_span_mean(h, r.concept_begin + 1, r.concept_end + 1);
    else
        state = h.row_vec(ids.size() - 1);
    return score_state(rv, layer, state);
}

int predict_binary(const ReadingVector& rv, const ModelBundle& model, const std::string& text,
                   std::size_t layer, double threshold) {
    return score(rv, model, text, layer) >= threshold ? 1 : 0;
}

int predict_binary_record(const ReadingVector& rv, const ModelBundle& model,
                          const ConceptTemplate& tpl, const StimulusRecord& record,
                          std::size_t layer, double threshold) {
    return score_record(rv, model, tpl, record, layer) >= threshold ? 1 : 0;
}

int predict_pairwise(const ReadingVector& rv, const ModelBundle& model, const std::string& a,
                     const std::string& b, std::size_t layer) {
    return score(rv, model, b, layer) > score(rv, model, a, layer) ? 1 : 0;
}

int predict_pairwise_record(const ReadingVector& rv, const ModelBundle& model,
                            const ConceptTemplate& tpl, const StimulusRecord& a,
                            const StimulusRecord& b, std::size_t layer) {
    return score_record(rv, model, tpl, b, layer) > score_record(rv, model, tpl, a, layer) ? 1
                                                                                           : 0;
}

LayerSelection select_layer(ReadingVector& rv, const ModelBundle& model,
                            const ConceptTemplate& tpl,
                            const std::vector<StimulusRecord>& validation) {
    std::vector<int> labels;
    const ActivitySet act = labeled_activity(model, tpl, validation, rv.policy, labels);
    std::size_t n1 = 0, n0 = 0;
    for (int y : labels) (y == 1 ? n1 : n0) += 1;
    if (n1 < 2 || n0 < 2)
        throw DegenerateLabels("layer selection needs two validation examples per class");

    LayerSelection sel;
    sel.per_layer_accuracy.assign(rv.layers.size(), -1.0);
    bool any = false;
    for (std::size_t l = 0; l < rv.layers.size(); ++l) {
        const LayerReading& layer = rv.layers[l];
        if (!layer.usable) continue;
        std::size_t hits = 0;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            const double s = layer.sign * unsigned_state_score(layer, act.layers[l].row_vec(i));
            hits += (s >= 0.0 ? 1 : 0) == labels[i] ? 1 : 0;
        }
        const double acc = static_cast<double>(hits) / static_cast<double>(labels.size());
        sel.per_layer_accuracy[l] = acc;
        if (!any || acc >= sel.accuracy) {  // >= keeps the deepest tied layer
            sel.layer = l;
            sel.accuracy = acc;
            any = true;
        }
    }
    if (!any) throw UnusableLayer("no usable layer to select");
    sel.low_confidence = sel.accuracy < 0.6;
    rv.selected_layer = sel.layer;
    rv.low_confidence = sel.low_confidence;
    return sel;
}

ScanResult scan_tokens(const ReadingVector& rv, const ModelBundle& model, const std::string& text,
                       const std::vector<std::size_t>& layer_set, bool negate,
                       const EditPlan* plan) {
    if (layer_set.empty()) throw InvalidLayer("scan needs at least one layer");
    for (std::size_t l : layer_set) usable_layer(rv, l);
    const TokenIds ids = tokenize(text);
    if (ids.size() > model.config.max_context)
        throw ContextOverflow("scan input exceeds the context window");
    const ForwardResult fr = plan ? forward_with_edits(model, ids, *plan)
                                  : forward_capture(model, ids);
    ScanResult out;
    out.layer_set = layer_set;
    out.negated = negate;
    out.scores = Matrix(layer_set.size(), ids.size());
    const double flip = negate ? -1.0 : 1.0;
    for (std::size_t r = 0; r < layer_set.size(); ++r) {
        const LayerReading& layer = rv.layers[layer_set[r]];
        const Matrix& h = fr.hidden.layers[layer_set[r]];
        for (std::size_t t = 0; t < ids.size(); ++t)
            out.scores(r, t) = flip * layer.sign * unsigned_state_score(layer, h.row_vec(t));
    }
    out.aggregate.assign(ids.size(), 0.0);
    for (std::size_t r = 0; r < layer_set.size(); ++r)
        for (std::size_t t = 0; t < ids.size(); ++t) out.aggregate[t] += out.scores(r, t);
    return out;
}

std::vector<std::size_t> middle_band(std::size_t n_layers) {
    if (n_layers == 0) throw InvalidLayer("model has no blocks");
    const std::size_t m = (n_layers + 1) / 2;
    const std::size_t start = 1 + (n_layers - m) / 2;
    std::vector<std::size_t> out(m);
    for (std::size_t i = 0; i < m; ++i) out[i] = start + i;
    return out;
}

// --- persistence ------------------------------------------------------------

nlohmann::json reading_to_json(const ReadingVector& rv) {
    nlohmann::json j;
    j["method"] = to_string(rv.method);
    j["token_policy"] = to_string(rv.policy);
    j["provenance"] = rv.provenance;
    j["low_confidence"] = rv.low_confidence;
    if (rv.selected_layer)
        j["selected_layer"] = *rv.selected_layer;
    else
        j["selected_layer"] = nullptr;
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < rv.layers.size(); ++l) {
        const LayerReading& layer = rv.layers[l];
        nlohmann::json e;
        e["index"] = l;
        if (layer.usable) {
            e["sign"] = layer.sign;
            e["direction"] = layer.direction;
            e["mean"] = layer.stats.mean;
            e["scale"] = layer.stats.scale;
            if (!layer.explained_variance_ratio.empty())
                e["explained_variance_ratio"] = layer.explained_variance_ratio;
        } else {
            e["error"] = layer.error.empty() ? "unusable" : layer.error;
        }
        layers.push_back(std::move(e));
    }
    j["layers"] = std::move(layers);
    return j;
}

ReadingVector reading_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("method") || !j.contains("layers"))
        throw SchemaError("reading vector document needs method and layers");
    ReadingVector rv;
    rv.method = fit_method_from_string(j.at("method").get<std::string>());
    rv.policy = token_policy_from_string(j.value("token_policy", std::string("last")));
    rv.provenance = j.value("provenance", std::string());
    rv.low_confidence = j.value("low_confidence", false);
    if (j.contains("selected_layer") && !j.at("selected_layer").is_null())
        rv.selected_layer = j.at("selected_layer").get<std::size_t>();
    const nlohmann::json& layers = j.at("layers");
    if (!layers.is_array()) throw SchemaError("field 'layers' must be an array");
    rv.layers.resize(layers.size());
    for (const nlohmann::json& e : layers) {
        if (!e.is_object() || !e.contains("index"))
            throw SchemaError("layer entries need an index");
        const std::size_t idx = e.at("index").get<std::size_t>();
        if (idx >= rv.layers.size()) throw SchemaError("layer index out of range");
        LayerReading& layer = rv.layers[idx];
        if (e.contains("direction")) {
            layer.direction = e.at("direction").get<Vec>();
            layer.sign = e.value("sign", 1);
            if (layer.sign != 1 && layer.sign != -1)
                throw SchemaError("layer sign must be +1 or -1");
            layer.stats.mean = e.value("mean", Vec{});
            layer.stats.scale = e.value("scale", Vec{});
            if (e.contains("explained_variance_ratio"))
                layer.explained_variance_ratio =
                    e.at("explained_variance_ratio").get<Vec>();
            check_finite(layer.direction, "stored direction");
            layer.usable = true;
        } else {
            layer.error = e.value("error", std::string("unusable"));
        }
    }
    return rv;
}

void save_reading(const ReadingVector& rv, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << reading_to_json(rv).dump(2) << '\n';
    if (!out) throw IoError("failed writing " + path);
}

ReadingVector load_reading(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("reading vector JSON: ") + e.what());
    }
    return reading_from_json(j);
}

}  // namespace repe
