#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "repe/eval.hpp"

using namespace repe;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.d_model = 32;
    cfg.n_layers = 4;
    cfg.n_heads = 4;
    cfg.d_ff = 64;
    cfg.max_context = 160;
    return cfg;
}

ModelConfig wide_config() {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.max_context = 384;
    return cfg;
}

struct FittedFixture {
    PlantedFixture fx;
    ConceptTemplate tpl;
    ReadingVector rv;
    std::vector<StimulusRecord> held;
};

// Standard pipeline: fit on the front, hold out the last 64 records.
FittedFixture fit_fixture(double coefficient, std::size_t total = 128) {
    FittedFixture out{make_planted_fixture(42, small_config(), total, coefficient, 0.5, 2),
                      default_concept_template("signal"),
                      {},
                      {}};
    std::vector<StimulusRecord> train(out.fx.records.begin(), out.fx.records.end() - 64);
    out.held.assign(out.fx.records.end() - 64, out.fx.records.end());
    const ActivitySet act =
        collect_concept_activity(out.fx.model, out.tpl, train, TokenPolicy::LastToken);
    const DifferenceSet diffs = build_differences(act, pairs_from_ids(train));
    out.rv = fit_reading_vector(diffs, act, FitMethod::PCA);
    determine_sign(out.rv, out.fx.model, out.tpl, train);
    out.rv.selected_layer = 2;
    return out;
}

std::vector<StimulusRecord> drop_pair_ids(std::vector<StimulusRecord> records) {
    for (StimulusRecord& r : records) r.pair_id.reset();
    return records;
}

ReadingVector manual_rv(std::size_t n_taps, const Vec& direction, std::size_t selected) {
    ReadingVector rv;
    rv.layers.resize(n_taps);
    for (LayerReading& layer : rv.layers) {
        layer.direction = normalized(direction);
        layer.sign = 1;
        layer.stats.mean.assign(direction.size(), 0.0);
        layer.stats.scale.assign(direction.size(), 1.0);
        layer.usable = true;
    }
    rv.selected_layer = selected;
    return rv;
}

// Unit vector orthogonal to v: Gram-Schmidt on the least-aligned basis axis.
Vec orthogonal_unit(const Vec& v) {
    std::size_t axis = 0;
    for (std::size_t j = 1; j < v.size(); ++j)
        if (std::abs(v[j]) < std::abs(v[axis])) axis = j;
    Vec e(v.size(), 0.0);
    e[axis] = 1.0;
    const double c = dot(e, v) / dot(v, v);
    for (std::size_t j = 0; j < e.size(); ++j) e[j] -= c * v[j];
    return normalized(e);
}

double span_iou(const MonitorSpan& span, std::size_t begin, std::size_t end) {
    const double inter = static_cast<double>(
        std::max<std::ptrdiff_t>(0, std::min<std::ptrdiff_t>(span.end, end) -
                                        std::max<std::ptrdiff_t>(span.begin, begin)));
    const double uni = static_cast<double>(std::max(span.end, end) -
                                           std::min(span.begin, begin));
    return inter / uni;
}

}  // namespace

TEST_CASE("correlation separates the planted fixture and inverts with labels") {
    const FittedFixture f = fit_fixture(2.0);

    const EvalReport paired = correlation_eval(f.rv, f.fx.model, f.held, f.tpl, 2);
    CHECK(paired.value >= 0.95);
    CHECK(paired.config["mode"] == "pairwise");
    CHECK(paired.category == "correlation");
    CHECK(paired.per_layer.at(2) == paired.value);

    const std::vector<StimulusRecord> held = drop_pair_ids(f.held);
    const EvalReport binary = correlation_eval(f.rv, f.fx.model, held, f.tpl, 2);
    CHECK(binary.value >= 0.95);
    CHECK(binary.config["mode"] == "binary");

    std::vector<StimulusRecord> flipped = held;
    for (StimulusRecord& r : flipped) r.label = 1 - *r.label;
    const EvalReport inverted = correlation_eval(f.rv, f.fx.model, flipped, f.tpl, 2);
    CHECK(inverted.value == 1.0 - binary.value);
}

TEST_CASE("correlation sits at chance on a null fixture") {
    const FittedFixture f = fit_fixture(0.0);
    const EvalReport report =
        correlation_eval(f.rv, f.fx.model, drop_pair_ids(f.held), f.tpl, 2);
    CHECK(report.value >= 0.35);
    CHECK(report.value <= 0.65);
}

TEST_CASE("correlation rejects degenerate inputs") {
    const FittedFixture f = fit_fixture(2.0);
    std::vector<StimulusRecord> ones = drop_pair_ids(f.held);
    for (StimulusRecord& r : ones) r.label = 1;
    CHECK_THROWS_AS(correlation_eval(f.rv, f.fx.model, ones, f.tpl, 2), DegenerateLabels);
    CHECK_THROWS_AS(correlation_eval(f.rv, f.fx.model, {}, f.tpl, 2), TooFewRecords);
}

TEST_CASE("manipulation wins on a steering fixture and is symmetric") {
    const SteeringFixture fx = make_steering_fixture(17, small_config(), 'Z', 6.0);
    const ReadingVector rv = manual_rv(small_config().n_layers + 1, fx.direction, 2);
    std::vector<std::string> prompts;
    for (int p = 0; p < 32; ++p) prompts.push_back("prompt " + std::to_string(p));
    const TextScorer scorer = marker_count_scorer('Z');

    const EvalReport up = manipulation_eval(fx.model, rv, prompts, scorer, 2.0, 20);
    CHECK(up.value >= 0.8);
    CHECK(up.category == "manipulation");
    CHECK(up.config["coefficient"] == 2.0);

    const EvalReport down = manipulation_eval(fx.model, rv, prompts, scorer, -2.0, 20);
    CHECK(up.value + down.value == 1.0);

    const EvalReport still = manipulation_eval(fx.model, rv, prompts, scorer, 0.0, 20);
    CHECK(still.value == 0.5);
}

TEST_CASE("manipulation rejects missing pieces") {
    const SteeringFixture fx = make_steering_fixture(17, small_config(), 'Z', 6.0);
    ReadingVector rv = manual_rv(small_config().n_layers + 1, fx.direction, 2);
    const TextScorer scorer = marker_count_scorer('Z');
    CHECK_THROWS_AS(manipulation_eval(fx.model, rv, {}, scorer, 1.0), TooFewRecords);
    CHECK_THROWS_AS(manipulation_eval(fx.model, rv, {"p"}, nullptr, 1.0), MissingField);
    rv.selected_layer.reset();
    CHECK_THROWS_AS(manipulation_eval(fx.model, rv, {"p"}, scorer, 1.0), UnusableLayer);
}

TEST_CASE("projecting the fitted direction out kills held-out accuracy") {
    // 64 training pairs: the sharper direction estimate is what makes the
    // projection remove the plant instead of leaving an off-angle residue
    const FittedFixture f = fit_fixture(2.0, 192);
    const std::vector<StimulusRecord> held = drop_pair_ids(f.held);

    const EvalReport report = termination_eval(f.fx.model, f.rv, held, f.tpl, {2});
    const double before = report.config["accuracy_before"];
    const double after = report.config["accuracy_after"];
    CHECK(before >= 0.95);
    CHECK(after <= 0.65);
    CHECK(report.value == before - after);
    CHECK(report.per_layer.at(2) == report.value);

    const EvalReport idle = termination_eval(f.fx.model, f.rv, held, f.tpl, {});
    CHECK(idle.value == 0.0);

    ReadingVector ortho = f.rv;
    ortho.layers[2].direction = orthogonal_unit(f.rv.layers[2].direction);
    const EvalReport off = termination_eval(f.fx.model, f.rv, held, f.tpl, {2}, &ortho);
    CHECK(std::abs(off.value) <= 0.05);
}

TEST_CASE("adding the signed direction back recovers the drop") {
    const FittedFixture f = fit_fixture(2.0, 192);
    const std::vector<StimulusRecord> held = drop_pair_ids(f.held);

    const EvalReport report = recovery_eval(f.fx.model, f.rv, held, f.tpl, {2}, 2.0);
    CHECK(report.value >= 0.8);
    CHECK(report.value <= 1.0);
    CHECK(report.per_layer.at(2) >= 0.8);
    CHECK(report.config["add_back_coefficient"] == 2.0);
    CHECK(double(report.config["accuracy_before"]) >= 0.95);
    CHECK(!report.notes.empty());

    const EvalReport none = recovery_eval(f.fx.model, f.rv, held, f.tpl, {2}, 0.0);
    CHECK(none.value == 0.0);

    ReadingVector ortho = f.rv;
    ortho.layers[2].direction = orthogonal_unit(f.rv.layers[2].direction);
    CHECK_THROWS_AS(recovery_eval(f.fx.model, f.rv, held, f.tpl, {2}, 2.0, &ortho),
                    NotApplicable);
}

TEST_CASE("seven-point scale carries the exact symmetric values") {
    const HeuristicScale scale = heuristic_scale_7();
    REQUIRE(scale.expressions.size() == 7);
    CHECK(scale.expressions.front() == "Very low");
    CHECK(scale.expressions.back() == "Very high");
    const Vec want = {-1.0, -2.0 / 3.0, -1.0 / 3.0, 0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0};
    REQUIRE(scale.values.size() == want.size());
    for (std::size_t k = 0; k < want.size(); ++k) CHECK(scale.values[k] == want[k]);

    const HeuristicScale wide = heuristic_scale_13();
    REQUIRE(wide.expressions.size() == 13);
    CHECK(wide.values.front() == -1.0);
    CHECK(wide.values[6] == 0.0);
    CHECK(wide.values.back() == 1.0);
    for (std::size_t k = 1; k < wide.values.size(); ++k)
        CHECK(wide.values[k] > wide.values[k - 1]);
}

TEST_CASE("scale validation rejects malformed ladders") {
    CHECK_THROWS_AS(make_heuristic_scale({"only"}), TooFewRecords);
    CHECK_THROWS_AS(make_heuristic_scale({"a", ""}), MissingField);
    HeuristicScale bad;
    bad.expressions = {"a", "b", "c"};
    bad.values = {-1.0, 2.0, 1.0};
    CHECK_THROWS_AS(bad.validate(), NonFiniteInput);
    bad.values = {-1.0, 0.0, 0.5};
    CHECK_THROWS_AS(bad.validate(), NonFiniteInput);
}

TEST_CASE("equal-probability continuations score exactly zero") {
    const ModelConfig cfg = wide_config();
    ModelBundle model = init_model(cfg, 51);
    std::fill(model.tok_embedding.data.begin(), model.tok_embedding.data.end(), 0.0);
    const HeuristicScale scale = heuristic_scale_7();
    const std::string prompt = heuristic_prompt("truth", "the sky is green", scale);
    CHECK(heuristic_score(model, prompt, scale) == 0.0);
}

TEST_CASE("heuristic score matches a straight-line recomputation") {
    const ModelConfig cfg = wide_config();
    const ModelBundle model = init_model(cfg, 52);
    const HeuristicScale scale = heuristic_scale_7();
    const std::string prompt = heuristic_prompt("truth", "water is wet", scale);
    const double got = heuristic_score(model, prompt, scale);

    Vec log_means(scale.expressions.size());
    for (std::size_t k = 0; k < scale.expressions.size(); ++k) {
        const TokenIds ids = tokenize(prompt + scale.expressions[k]);
        const ForwardResult fr = forward_capture(model, ids);
        double sum = 0.0;
        for (std::size_t pos = prompt.size() + 1; pos < ids.size(); ++pos) {
            const double* row = fr.logits.row(pos - 1);
            double top = row[0];
            for (std::size_t t = 1; t < cfg.vocab_size; ++t) top = std::max(top, row[t]);
            double lse = 0.0;
            for (std::size_t t = 0; t < cfg.vocab_size; ++t) lse += std::exp(row[t] - top);
            sum += row[ids[pos]] - top - std::log(lse);
        }
        log_means[k] = sum / static_cast<double>(scale.expressions[k].size());
    }
    double top = *std::max_element(log_means.begin(), log_means.end());
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < log_means.size(); ++k) {
        const double w = std::exp(log_means[k] - top);
        num += scale.values[k] * w;
        den += w;
    }
    CHECK(got == doctest::Approx(num / den).epsilon(1e-12));
    CHECK(got >= -1.0);
    CHECK(got <= 1.0);
}

TEST_CASE("reversing the expression ladder negates the score") {
    const ModelConfig cfg = wide_config();
    const ModelBundle model = init_model(cfg, 53);
    const HeuristicScale scale = heuristic_scale_7();
    std::vector<std::string> reversed(scale.expressions.rbegin(), scale.expressions.rend());
    const HeuristicScale mirror = make_heuristic_scale(reversed);
    const std::string prompt = heuristic_prompt("truth", "fire is cold", scale);
    CHECK(heuristic_score(model, prompt, mirror) == -heuristic_score(model, prompt, scale));
}

TEST_CASE("heuristic score overflows loudly") {
    const ModelConfig cfg = wide_config();
    const ModelBundle model = init_model(cfg, 54);
    const HeuristicScale scale = heuristic_scale_7();
    const std::string prompt = heuristic_prompt("truth", std::string(400, 'x'), scale);
    CHECK_THROWS_AS(heuristic_score(model, prompt, scale), ContextOverflow);
}

TEST_CASE("risk matches a straight-line recomputation") {
    const ModelConfig cfg = small_config();
    const ModelBundle model = init_model(cfg, 61);
    Vec du(cfg.d_model), dp(cfg.d_model);
    for (std::size_t j = 0; j < cfg.d_model; ++j) {
        du[j] = std::sin(0.3 * (1.0 + j));
        dp[j] = std::cos(0.9 * (1.0 + j));
    }
    const ReadingVector utility = manual_rv(cfg.n_layers + 1, du, 2);
    const ReadingVector probability = manual_rv(cfg.n_layers + 1, dp, 3);
    const std::vector<std::string> consequences = {"gain ten", "lose it all",
                                                   "nothing changes", "small win", "fire"};
    const std::string action = "open the box";
    const double got = compose_risk(utility, probability, model, action, consequences);

    Vec ps(consequences.size()), us(consequences.size());
    for (std::size_t k = 0; k < consequences.size(); ++k) {
        ps[k] = score(probability, model, action + "\n" + consequences[k], 3);
        us[k] = score(utility, model, consequences[k], 2);
    }
    const double top = *std::max_element(ps.begin(), ps.end());
    double den = 0.0;
    for (double x : ps) den += std::exp(x - top);
    double want = 0.0;
    for (std::size_t k = 0; k < consequences.size(); ++k)
        want += std::exp(ps[k] - top) / den * std::max(0.0, -us[k]);
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("risk clamps to the downside and ignores probability shifts") {
    const ModelConfig cfg = small_config();
    const ModelBundle model = init_model(cfg, 62);
    Vec d(cfg.d_model);
    for (std::size_t j = 0; j < cfg.d_model; ++j) d[j] = std::sin(0.5 * (1.0 + j));
    const ReadingVector probability = manual_rv(cfg.n_layers + 1, d, 1);

    // means pushed far along the direction force the utility sign
    ReadingVector sunk = manual_rv(cfg.n_layers + 1, d, 2);
    for (std::size_t j = 0; j < cfg.d_model; ++j)
        sunk.layers[2].stats.mean[j] = 1e6 * sunk.layers[2].direction[j];
    const double u = score(sunk, model, "the vase breaks", 2);
    REQUIRE(u < 0.0);
    CHECK(compose_risk(sunk, probability, model, "drop it", {"the vase breaks"}) == -u);

    ReadingVector rosy = manual_rv(cfg.n_layers + 1, d, 2);
    for (std::size_t j = 0; j < cfg.d_model; ++j)
        rosy.layers[2].stats.mean[j] = -1e6 * rosy.layers[2].direction[j];
    CHECK(compose_risk(rosy, probability, model, "drop it",
                       {"the vase breaks", "it bounces", "nothing"}) == 0.0);

    // shifting every probability score by a constant leaves the mix alone
    const std::vector<std::string> outcomes = {"a", "bb", "ccc"};
    const double base = compose_risk(sunk, probability, model, "act", outcomes);
    ReadingVector shifted = probability;
    for (std::size_t j = 0; j < cfg.d_model; ++j)
        shifted.layers[1].stats.mean[j] += 3.7 * shifted.layers[1].direction[j];
    const double moved = compose_risk(sunk, shifted, model, "act", outcomes);
    CHECK(moved == doctest::Approx(base).epsilon(1e-9));

    CHECK_THROWS_AS(compose_risk(sunk, probability, model, "act", {}), TooFewRecords);
    ReadingVector unset = probability;
    unset.selected_layer.reset();
    CHECK_THROWS_AS(compose_risk(sunk, unset, model, "act", {"x"}), UnusableLayer);
}

TEST_CASE("monitor report flags maximal runs above the threshold") {
    ScanResult scan;
    scan.aggregate = {0.0, 1.0, 5.0, 6.0, 2.0, 0.0, 7.0, 0.0};
    const std::vector<MonitorSpan> spans = monitor_report(scan, 4.0);
    REQUIRE(spans.size() == 2);
    CHECK(spans[0].begin == 2);
    CHECK(spans[0].end == 4);
    CHECK(spans[0].peak == 6.0);
    CHECK(spans[0].peak_pos == 3);
    CHECK(spans[1].begin == 6);
    CHECK(spans[1].end == 7);
    CHECK(spans[1].peak == 7.0);

    CHECK(monitor_report(scan, 100.0).empty());
    CHECK(monitor_report(scan, 6.5).size() == 1);
    CHECK(monitor_report(scan, 7.0).empty());  // strictly above

    ScanResult lone;
    lone.aggregate = {0.0, 9.0, 0.0};
    const std::vector<MonitorSpan> one = monitor_report(lone, 5.0);
    REQUIRE(one.size() == 1);
    CHECK(one[0].end - one[0].begin == 1);

    ScanResult empty;
    CHECK_THROWS_AS(monitor_report(empty, 0.0), MissingField);
    CHECK_THROWS_AS(default_monitor_threshold(empty), MissingField);

    ScanResult flat;
    flat.aggregate = {0.0, 2.0};
    CHECK(default_monitor_threshold(flat) == 3.0);  // mean 1, std 1
}

TEST_CASE("flagged span overlaps a planted scan span") {
    const ModelConfig cfg = small_config();
    const PlantedFixture fx = make_planted_fixture(42, cfg, 64, 2.0, 0.5, 2);
    const ConceptTemplate tpl = default_concept_template("signal");
    const ActivitySet act =
        collect_concept_activity(fx.model, tpl, fx.records, TokenPolicy::LastToken);
    const DifferenceSet diffs = build_differences(act, pairs_from_ids(fx.records));
    ReadingVector rv = fit_reading_vector(diffs, act, FitMethod::PCA);
    determine_sign(rv, fx.model, tpl, fx.records);

    const std::string text = "a plain sentence long enough to carry a hidden span inside it";
    const std::size_t t0 = 20, t1 = 32;
    EditPlan plan;
    EditStep step;
    step.layer = 2;
    step.op = Operator{OpType::LinearCombination, 1, 4.0};
    step.controllers = {fx.direction};
    step.span = TokenSpan{SpanKind::Range, t0, t1};
    plan.steps.push_back(step);

    const ScanResult scan = scan_tokens(rv, fx.model, text, {2, 3}, false, &plan);
    double out_mean = 0.0, out_sq = 0.0;
    std::size_t n_out = 0;
    for (std::size_t t = 0; t < scan.aggregate.size(); ++t) {
        if (t >= t0 && t < t1) continue;
        out_mean += scan.aggregate[t];
        out_sq += scan.aggregate[t] * scan.aggregate[t];
        ++n_out;
    }
    out_mean /= static_cast<double>(n_out);
    const double out_std =
        std::sqrt(std::max(0.0, out_sq / static_cast<double>(n_out) - out_mean * out_mean));

    const std::vector<MonitorSpan> spans =
        monitor_report(scan, out_mean + 2.0 * out_std);
    REQUIRE(!spans.empty());
    double best = 0.0;
    for (const MonitorSpan& s : spans) best = std::max(best, span_iou(s, t0, t1));
    CHECK(best >= 0.5);
}
