#include "repe/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <optional>

#include "repe/parallel.hpp"

namespace repe {

namespace {

// Outside-in pairwise fold: symmetric inputs cancel exactly, and reversing
// the sequence reproduces the same partial sums.
double fold_outside_in(const Vec& vals) {
    double total = 0.0;
    std::size_t lo = 0, hi = vals.size();
    while (lo + 1 < hi) {
        --hi;
        total += vals[lo] + vals[hi];
        ++lo;
    }
    if (lo < hi) total += vals[lo];
    return total;
}

std::size_t selected_layer_of(const ReadingVector& rv) {
    if (!rv.selected_layer)
        throw UnusableLayer("reading vector has no selected layer");
    return *rv.selected_layer;
}

// Pairwise evaluation applies when every record belongs to a two-record
// pair with one label per class.
std::optional<std::vector<std::pair<std::size_t, std::size_t>>> detect_pairs(
    const std::vector<StimulusRecord>& records) {
    std::map<std::int64_t, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (!records[i].pair_id || !records[i].label) return std::nullopt;
        groups[*records[i].pair_id].push_back(i);
    }
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (low, high)
    for (const auto& [id, members] : groups) {
        if (members.size() != 2) return std::nullopt;
        const int la = *records[members[0]].label;
        const int lb = *records[members[1]].label;
        if (la + lb != 1) return std::nullopt;
        pairs.emplace_back(la == 0 ? members[0] : members[1],
                           la == 0 ? members[1] : members[0]);
    }
    return pairs;
}

using ExtraPlanFn = std::function<EditPlan(const StimulusRecord&)>;

std::vector<double> record_scores(const ModelBundle& model, const ReadingVector& rv,
                                  const std::vector<StimulusRecord>& records,
                                  const ConceptTemplate& tpl, std::size_t layer,
                                  const ExtraPlanFn& extra) {
    std::vector<double> scores(records.size());
    parallel_for(records.size(), [&](std::size_t i) {
        if (extra) {
            const EditPlan plan = extra(records[i]);
            scores[i] = score_record(rv, model, tpl, records[i], layer, &plan);
        } else {
            scores[i] = score_record(rv, model, tpl, records[i], layer);
        }
    });
    return scores;
}

double labeled_accuracy(const ModelBundle& model, const ReadingVector& rv,
                        const std::vector<StimulusRecord>& records, const ConceptTemplate& tpl,
                        std::size_t layer, const ExtraPlanFn& extra, std::string* mode_out) {
    if (records.empty()) throw TooFewRecords("evaluation needs records");
    const std::vector<double> scores = record_scores(model, rv, records, tpl, layer, extra);
    const auto pairs = detect_pairs(records);
    if (pairs) {
        if (mode_out) *mode_out = "pairwise";
        std::size_t hits = 0;
        for (const auto& [low, high] : *pairs)
            if (scores[high] > scores[low]) ++hits;
        return static_cast<double>(hits) / static_cast<double>(pairs->size());
    }
    if (mode_out) *mode_out = "binary";
    bool seen[2] = {false, false};
    std::size_t hits = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (!records[i].label) throw DegenerateLabels("evaluation records need labels");
        const int label = *records[i].label;
        seen[label] = true;
        if ((scores[i] >= 0.0 ? 1 : 0) == label) ++hits;
    }
    if (!seen[0] || !seen[1]) throw DegenerateLabels("evaluation needs both classes");
    return static_cast<double>(hits) / static_cast<double>(records.size());
}

// Projection steps at each layer, directions taken from `source`.
EditPlan projection_steps(const ReadingVector& source, const std::vector<std::size_t>& layers) {
    EditPlan plan;
    for (std::size_t l : layers) {
        if (l >= source.layers.size() || !source.layers[l].usable)
            throw UnusableLayer("no usable direction to project at tap " + std::to_string(l));
        EditStep step;
        step.layer = l;
        step.op = Operator{OpType::Projection, 1, 1.0};
        step.controllers = {source.layers[l].direction};
        step.span = TokenSpan{SpanKind::All, 0, kSpanOpenEnd};
        plan.steps.push_back(std::move(step));
    }
    return plan;
}

ExtraPlanFn add_back_fn(const ReadingVector& source, const std::vector<std::size_t>& layers,
                        double coefficient) {
    const EditPlan project = projection_steps(source, layers);
    return [&source, layers, coefficient, project](const StimulusRecord& rec) {
        if (!rec.label) throw DegenerateLabels("evaluation records need labels");
        EditPlan plan = project;
        for (std::size_t l : layers) {
            const LayerReading& lr = source.layers[l];
            Vec signed_dir(lr.direction.size());
            for (std::size_t j = 0; j < signed_dir.size(); ++j)
                signed_dir[j] = lr.sign * lr.direction[j];
            EditStep step;
            step.layer = l;
            step.op = Operator{OpType::LinearCombination, *rec.label == 1 ? 1 : -1,
                               coefficient};
            step.controllers = {std::move(signed_dir)};
            step.span = TokenSpan{SpanKind::All, 0, kSpanOpenEnd};
            plan.steps.push_back(std::move(step));
        }
        return plan;
    };
}

double log_prob_at(const double* logits, std::size_t vocab, int token) {
    double top = logits[0];
    for (std::size_t t = 1; t < vocab; ++t) top = std::max(top, logits[t]);
    double sum = 0.0;
    for (std::size_t t = 0; t < vocab; ++t) sum += std::exp(logits[t] - top);
    return logits[static_cast<std::size_t>(token)] - top - std::log(sum);
}

}  // namespace

nlohmann::json eval_report_to_json(const EvalReport& report) {
    nlohmann::json per_layer = nlohmann::json::object();
    for (const auto& [layer, value] : report.per_layer)
        per_layer[std::to_string(layer)] = value;
    return nlohmann::json{{"category", report.category}, {"metric", report.metric},
                          {"value", report.value},       {"per_layer", per_layer},
                          {"config", report.config},     {"notes", report.notes}};
}

EvalReport correlation_eval(const ReadingVector& rv, const ModelBundle& model,
                            const std::vector<StimulusRecord>& records,
                            const ConceptTemplate& tpl, std::size_t layer) {
    EvalReport report;
    report.category = "correlation";
    report.metric = "accuracy";
    std::string mode;
    report.value = labeled_accuracy(model, rv, records, tpl, layer, nullptr, &mode);
    report.per_layer[layer] = report.value;
    report.config = {{"records", records.size()},
                     {"layer", layer},
                     {"mode", mode},
                     {"method", to_string(rv.method)},
                     {"policy", to_string(rv.policy)}};
    return report;
}

TextScorer marker_count_scorer(char marker) {
    return [marker](const std::string& text) {
        return static_cast<double>(std::count(text.begin(), text.end(), marker));
    };
}

EvalReport manipulation_eval(const ModelBundle& model, const ReadingVector& rv,
                             const std::vector<std::string>& prompts, const TextScorer& scorer,
                             double coefficient, std::size_t n_new) {
    if (prompts.empty()) throw TooFewRecords("manipulation needs prompts");
    if (!scorer) throw MissingField("manipulation needs a scorer");
    const std::size_t layer = selected_layer_of(rv);
    const LayerReading& lr = rv.layers[layer];
    if (!lr.usable) throw UnusableLayer("selected layer is unusable");

    Vec signed_dir(lr.direction.size());
    for (std::size_t j = 0; j < signed_dir.size(); ++j)
        signed_dir[j] = lr.sign * lr.direction[j];
    EditPlan plus, minus;
    for (int sign : {1, -1}) {
        EditStep step;
        step.layer = layer;
        step.op = Operator{OpType::LinearCombination, sign, coefficient};
        step.controllers = {signed_dir};
        step.span = TokenSpan{SpanKind::All, 0, kSpanOpenEnd};
        (sign == 1 ? plus : minus).steps.push_back(std::move(step));
    }

    std::vector<double> wins(prompts.size());
    parallel_for(prompts.size(), [&](std::size_t i) {
        const double up = scorer(controlled_generate(model, prompts[i], plus, n_new));
        const double down = scorer(controlled_generate(model, prompts[i], minus, n_new));
        wins[i] = up > down ? 1.0 : (up == down ? 0.5 : 0.0);
    });
    double total = 0.0;
    for (double w : wins) total += w;

    EvalReport report;
    report.category = "manipulation";
    report.metric = "win_rate";
    report.value = total / static_cast<double>(prompts.size());
    report.per_layer[layer] = report.value;
    report.config = {{"prompts", prompts.size()},
                     {"layer", layer},
                     {"coefficient", coefficient},
                     {"n_new", n_new}};
    return report;
}

EvalReport termination_eval(const ModelBundle& model, const ReadingVector& rv,
                            const std::vector<StimulusRecord>& records,
                            const ConceptTemplate& tpl, const std::vector<std::size_t>& layers,
                            const ReadingVector* project_rv) {
    const std::size_t scoring_layer = selected_layer_of(rv);
    const ReadingVector& source = project_rv ? *project_rv : rv;
    std::string mode;
    const double before =
        labeled_accuracy(model, rv, records, tpl, scoring_layer, nullptr, &mode);

    const auto drop_for = [&](const std::vector<std::size_t>& subset) {
        if (subset.empty()) return 0.0;
        const EditPlan project = projection_steps(source, subset);
        const double after = labeled_accuracy(
            model, rv, records, tpl, scoring_layer,
            [&project](const StimulusRecord&) { return project; }, nullptr);
        return before - after;
    };

    EvalReport report;
    report.category = "termination";
    report.metric = "accuracy_drop";
    report.value = drop_for(layers);
    for (std::size_t l : layers) report.per_layer[l] = drop_for({l});
    report.config = {{"records", records.size()},
                     {"scoring_layer", scoring_layer},
                     {"projection_layers", layers},
                     {"mode", mode},
                     {"accuracy_before", before},
                     {"accuracy_after", before - report.value}};
    return report;
}

EvalReport recovery_eval(const ModelBundle& model, const ReadingVector& rv,
                         const std::vector<StimulusRecord>& records, const ConceptTemplate& tpl,
                         const std::vector<std::size_t>& layers, double add_back_coefficient,
                         const ReadingVector* project_rv) {
    const std::size_t scoring_layer = selected_layer_of(rv);
    const ReadingVector& source = project_rv ? *project_rv : rv;
    std::string mode;
    const double before =
        labeled_accuracy(model, rv, records, tpl, scoring_layer, nullptr, &mode);

    const auto accuracy_projected = [&](const std::vector<std::size_t>& subset) {
        const EditPlan project = projection_steps(source, subset);
        return labeled_accuracy(model, rv, records, tpl, scoring_layer,
                                [&project](const StimulusRecord&) { return project; }, nullptr);
    };
    const auto accuracy_recovered = [&](const std::vector<std::size_t>& subset) {
        return labeled_accuracy(model, rv, records, tpl, scoring_layer,
                                add_back_fn(source, subset, add_back_coefficient), nullptr);
    };
    const auto recovered_fraction = [&](double terminated, double recovered) {
        const double drop = before - terminated;
        if (drop <= 0.0) return 0.0;
        return std::clamp((recovered - terminated) / drop, 0.0, 1.0);
    };

    const double terminated = accuracy_projected(layers);
    if (before - terminated < 0.1)
        throw NotApplicable("termination drop " + std::to_string(before - terminated) +
                            " is under 0.1, no baseline to recover");
    const double recovered = accuracy_recovered(layers);

    EvalReport report;
    report.category = "recovery";
    report.metric = "recovered_fraction";
    report.value = recovered_fraction(terminated, recovered);
    for (std::size_t l : layers)
        report.per_layer[l] = recovered_fraction(accuracy_projected({l}),
                                                 accuracy_recovered({l}));
    report.config = {{"records", records.size()},
                     {"scoring_layer", scoring_layer},
                     {"projection_layers", layers},
                     {"add_back_coefficient", add_back_coefficient},
                     {"mode", mode},
                     {"accuracy_before", before},
                     {"accuracy_terminated", terminated},
                     {"accuracy_recovered", recovered}};
    report.notes = "project the directions out, then add them back signed by label";
    return report;
}

void HeuristicScale::validate() const {
    if (expressions.size() < 2) throw TooFewRecords("scale needs at least two expressions");
    if (expressions.size() != values.size())
        throw DimensionMismatch("one value per expression");
    for (const std::string& e : expressions)
        if (e.empty()) throw MissingField("empty scale expression");
    for (std::size_t k = 1; k < values.size(); ++k)
        if (!(values[k] > values[k - 1]))
            throw NonFiniteInput("scale values must increase strictly");
    if (values.front() != -1.0 || values.back() != 1.0)
        throw NonFiniteInput("scale endpoints must be -1 and 1");
}

HeuristicScale make_heuristic_scale(std::vector<std::string> expressions) {
    HeuristicScale scale;
    scale.values.resize(expressions.size());
    const int hi = static_cast<int>(expressions.size()) - 1;
    for (int k = 0; k <= hi; ++k)
        scale.values[static_cast<std::size_t>(k)] =
            static_cast<double>(2 * k - hi) / static_cast<double>(hi);
    scale.expressions = std::move(expressions);
    scale.validate();
    return scale;
}

HeuristicScale heuristic_scale_7() {
    return make_heuristic_scale({"Very low", "Low", "Somewhat low", "Neutral", "Somewhat high",
                                 "High", "Very high"});
}

HeuristicScale heuristic_scale_13() {
    return make_heuristic_scale({"Almost no chance", "Highly unlikely", "Chances are slight",
                                 "Unlikely", "Somewhat unlikely", "Less than even",
                                 "About even", "Better than even", "Somewhat likely", "Likely",
                                 "Very good chance", "Highly likely", "Almost certain"});
}

std::string heuristic_prompt(const std::string& concept_name, const std::string& scenario,
                             const HeuristicScale& scale) {
    scale.validate();
    std::string out = "USER: What is the amount of " + concept_name +
                      " of the following scenario? Please answer using EXACTLY one of the "
                      "following:\n";
    for (const std::string& e : scale.expressions) out += "- '" + e + "'\n";
    std::string label = concept_name;
    if (!label.empty())
        label[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(label[0])));
    out += "\n" + scenario + "\nASSISTANT: " + label + ": ";
    return out;
}

double heuristic_score(const ModelBundle& model, const std::string& prompt,
                       const HeuristicScale& scale) {
    scale.validate();
    const std::size_t prompt_tokens = prompt.size() + 1;  // leading BOS
    Vec log_means(scale.expressions.size());
    parallel_for(scale.expressions.size(), [&](std::size_t k) {
        const TokenIds ids = tokenize(prompt + scale.expressions[k]);
        if (ids.size() > model.config.max_context)
            throw ContextOverflow("prompt plus expression exceeds the context window");
        const ForwardResult fr = forward_capture(model, ids);
        double sum = 0.0;
        for (std::size_t pos = prompt_tokens; pos < ids.size(); ++pos)
            sum += log_prob_at(fr.logits.row(pos - 1), model.config.vocab_size, ids[pos]);
        log_means[k] = sum / static_cast<double>(ids.size() - prompt_tokens);
    });

    double top = log_means[0];
    for (double x : log_means) top = std::max(top, x);
    Vec weights(log_means.size()), weighted(log_means.size());
    for (std::size_t k = 0; k < log_means.size(); ++k) {
        weights[k] = std::exp(log_means[k] - top);
        weighted[k] = scale.values[k] * weights[k];
    }
    return fold_outside_in(weighted) / fold_outside_in(weights);
}

double compose_risk(const ReadingVector& utility_rv, const ReadingVector& probability_rv,
                    const ModelBundle& model, const std::string& state_action,
                    const std::vector<std::string>& consequences) {
    if (consequences.empty()) throw TooFewRecords("risk needs at least one consequence");
    const std::size_t layer_u = selected_layer_of(utility_rv);
    const std::size_t layer_p = selected_layer_of(probability_rv);

    Vec p_scores(consequences.size()), utilities(consequences.size());
    parallel_for(consequences.size(), [&](std::size_t k) {
        p_scores[k] =
            score(probability_rv, model, state_action + "\n" + consequences[k], layer_p);
        utilities[k] = score(utility_rv, model, consequences[k], layer_u);
    });

    double top = p_scores[0];
    for (double x : p_scores) top = std::max(top, x);
    double den = 0.0;
    for (double x : p_scores) den += std::exp(x - top);
    double risk = 0.0;
    for (std::size_t k = 0; k < consequences.size(); ++k)
        risk += std::exp(p_scores[k] - top) / den * std::max(0.0, -utilities[k]);
    return risk;
}

std::vector<MonitorSpan> monitor_report(const ScanResult& scan, double threshold) {
    if (scan.aggregate.empty()) throw MissingField("scan has no aggregate row");
    std::vector<MonitorSpan> spans;
    std::size_t i = 0;
    while (i < scan.aggregate.size()) {
        if (!(scan.aggregate[i] > threshold)) {
            ++i;
            continue;
        }
        MonitorSpan span;
        span.begin = i;
        span.peak = scan.aggregate[i];
        span.peak_pos = i;
        while (i < scan.aggregate.size() && scan.aggregate[i] > threshold) {
            if (scan.aggregate[i] > span.peak) {
                span.peak = scan.aggregate[i];
                span.peak_pos = i;
            }
            ++i;
        }
        span.end = i;
        spans.push_back(span);
    }
    return spans;
}

double default_monitor_threshold(const ScanResult& scan) {
    if (scan.aggregate.empty()) throw MissingField("scan has no aggregate row");
    const double n = static_cast<double>(scan.aggregate.size());
    double mean = 0.0;
    for (double x : scan.aggregate) mean += x;
    mean /= n;
    double var = 0.0;
    for (double x : scan.aggregate) var += (x - mean) * (x - mean);
    return mean + 2.0 * std::sqrt(var / n);
}

}  // namespace repe
