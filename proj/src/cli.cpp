#include "repe/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "repe/common.hpp"
#include "repe/control.hpp"
#include "repe/eval.hpp"
#include "repe/model.hpp"
#include "repe/stimulus.hpp"

namespace repe {

namespace {

using nlohmann::json;

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string join_path(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

void ensure_out_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
}

void write_text(const std::string& path, const std::string& body) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!out) throw IoError("write failed: " + path);
}

void write_json_file(const std::string& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

json read_json_file(const std::string& path) {
    json j = json::parse(read_text(path), nullptr, false);
    if (j.is_discarded()) throw ParseError("invalid JSON in " + path);
    return j;
}

std::string require_str(const json& j, const char* key, const std::string& path) {
    if (!j.is_object() || !j.contains(key) || !j.at(key).is_string())
        throw SchemaError(path + ": missing string field '" + key + "'");
    return j.at(key).get<std::string>();
}

ConceptTemplate load_concept_template(const std::string& path) {
    const json j = read_json_file(path);
    ConceptTemplate tpl = ConceptTemplate::from_text(
        j.is_object() ? j.value("concept", std::string("honesty")) : std::string("honesty"),
        require_str(j, "text", path));
    return tpl;
}

FunctionTemplate load_function_template(const std::string& path) {
    const json j = read_json_file(path);
    FunctionTemplate tpl;
    tpl.experimental = require_str(j, "experimental", path);
    tpl.reference = require_str(j, "reference", path);
    tpl.validate();
    return tpl;
}

ContrastTemplates contrast_from_json(const json& j, const std::string& path) {
    ContrastTemplates tpl;
    tpl.base = require_str(j, "base", path);
    tpl.experimental = require_str(j, "experimental", path);
    tpl.reference = require_str(j, "reference", path);
    tpl.validate();
    return tpl;
}

// One triple per object; a top-level array holds several.
std::vector<ContrastTemplates> load_contrast_templates(const std::string& path) {
    const json j = read_json_file(path);
    std::vector<ContrastTemplates> out;
    if (j.is_array()) {
        for (const json& e : j) out.push_back(contrast_from_json(e, path));
    } else {
        out.push_back(contrast_from_json(j, path));
    }
    if (out.empty()) throw SchemaError(path + ": no template triples");
    return out;
}

// Everything a subcommand might read; each registers only its own flags.
struct Options {
    std::string model, data, tpl, reading, out = ".";
    std::string method = "pca", policy = "last", source = "reading", category;
    std::string layers_text, text, prompt, reference, marker = "Z";
    double coef = std::numeric_limits<double>::quiet_NaN();
    double alpha = 5.0, beta = 0.0, lr = 3e-4, sigma = 0.5;
    std::size_t steps = 60, batch = 4, rank = 4, n_new = 40, records = 128, max_trunc = 40;
    std::size_t d_model = 32, n_layers = 4, n_heads = 4, d_ff = 64, context = 256, plant_layer = 2;
    std::uint64_t seed = 0;
    bool negate = false, merge = false;
};

double coef_or(const Options& o, double fallback) {
    return std::isnan(o.coef) ? fallback : o.coef;
}

std::vector<std::size_t> layers_or(const Options& o, std::vector<std::size_t> fallback) {
    return o.layers_text.empty() ? std::move(fallback) : parse_layer_range(o.layers_text);
}

std::vector<StimulusRecord> labeled_subset(const std::vector<StimulusRecord>& records) {
    std::vector<StimulusRecord> out;
    for (const StimulusRecord& r : records)
        if (r.label) out.push_back(r);
    return out;
}

bool both_classes(const std::vector<StimulusRecord>& labeled) {
    bool lo = false, hi = false;
    for (const StimulusRecord& r : labeled) (*r.label == 1 ? hi : lo) = true;
    return lo && hi;
}

const char* op_name(OpType type) {
    switch (type) {
        case OpType::LinearCombination: return "linear";
        case OpType::Piecewise: return "piecewise";
        case OpType::Projection: return "projection";
    }
    return "linear";
}

json span_to_json(const TokenSpan& span) {
    switch (span.kind) {
        case SpanKind::All: return {{"kind", "all"}};
        case SpanKind::LastToken: return {{"kind", "last"}};
        case SpanKind::Range: {
            json j{{"kind", "range"}, {"begin", span.begin}};
            j["end"] = span.end == kSpanOpenEnd ? json() : json(span.end);
            return j;
        }
    }
    return {{"kind", "all"}};
}

json plan_to_json(const EditPlan& plan) {
    json steps = json::array();
    for (const EditStep& step : plan.steps) {
        double norm_sum = 0.0;
        for (const Vec& c : step.controllers) norm_sum += norm(c);
        const double mean_norm =
            step.controllers.empty() ? 0.0 : norm_sum / static_cast<double>(step.controllers.size());
        steps.push_back({{"layer", step.layer},
                         {"op", op_name(step.op.type)},
                         {"sign", step.op.sign},
                         {"coefficient", step.op.coefficient},
                         {"controller_norm", mean_norm},
                         {"controllers", step.controllers.size()},
                         {"span", span_to_json(step.span)}});
    }
    return steps;
}

// --- synth ------------------------------------------------------------------

int cmd_synth(const Options& o) {
    ModelConfig config;
    config.d_model = o.d_model;
    config.n_layers = o.n_layers;
    config.n_heads = o.n_heads;
    config.d_ff = o.d_ff;
    config.max_context = o.context;
    const double coefficient = coef_or(o, 2.0);
    const PlantedFixture fx =
        make_planted_fixture(o.seed, config, o.records, coefficient, o.sigma, o.plant_layer);

    ensure_out_dir(o.out);
    const std::string model_path = join_path(o.out, "model.repe");
    const std::string data_path = join_path(o.out, "fixture.jsonl");
    const std::string truth_path = join_path(o.out, "truth.json");
    save_model(fx.model, model_path);
    save_jsonl(fx.records, data_path);
    write_json_file(truth_path, json{{"direction", fx.direction},
                                     {"layer", fx.layer},
                                     {"coefficient", fx.coefficient},
                                     {"sigma", fx.sigma},
                                     {"seed", fx.seed},
                                     {"records", fx.records.size()},
                                     {"null_fixture", fx.coefficient == 0.0},
                                     {"config", {{"d_model", config.d_model},
                                                 {"n_layers", config.n_layers},
                                                 {"n_heads", config.n_heads},
                                                 {"d_ff", config.d_ff},
                                                 {"max_context", config.max_context},
                                                 {"vocab_size", config.vocab_size}}}});
    std::printf("wrote %s\n", model_path.c_str());
    std::printf("wrote %s\n", data_path.c_str());
    std::printf("wrote %s\n", truth_path.c_str());
    return 0;
}

// --- fit --------------------------------------------------------------------

int cmd_fit(const Options& o) {
    const ModelBundle model = load_model(o.model);
    const std::vector<StimulusRecord> records = load_jsonl(o.data);
    const FitMethod method = fit_method_from_string(o.method);
    ensure_out_dir(o.out);

    json report{{"method", o.method}, {"policy", o.policy}, {"records", records.size()}};
    ReadingVector rv;
    std::string sign_stage;

    if (o.policy == "response") {
        // Function pipeline: truncated responses under the two prompt sides.
        if (method == FitMethod::MeanDiff || method == FitMethod::LogReg)
            throw Error("method '" + o.method + "' needs --policy last or concept");
        const FunctionTemplate tpl =
            o.tpl.empty() ? default_honesty_template() : load_function_template(o.tpl);
        const auto [plus, minus] = collect_function_activity(model, tpl, records, o.max_trunc);
        report["rows"] = plus.layers.empty() ? 0 : plus.layers[0].rows;
        report["skipped"] = plus.skipped;
        if (method == FitMethod::PromptDiff) {
            rv = fit_reading_vector_prompt(plus, minus);
        } else {
            const DifferenceSet diffs = build_function_differences(plus, minus);
            report["dropped_rows"] = diffs.dropped;
            rv = fit_reading_vector(diffs, plus, method, o.seed);
        }
        sign_stage = "skipped: response policy reads no concept stimuli";
    } else {
        if (method == FitMethod::PromptDiff) throw Error("method 'promptdiff' needs --policy response");
        const TokenPolicy policy = token_policy_from_string(o.policy);
        const ConceptTemplate tpl =
            o.tpl.empty() ? default_concept_template("honesty") : load_concept_template(o.tpl);
        const ActivitySet raw = collect_concept_activity(model, tpl, records, policy);
        report["rows"] = raw.layers.empty() ? 0 : raw.layers[0].rows;
        report["skipped"] = raw.skipped;

        if (method == FitMethod::MeanDiff || method == FitMethod::LogReg) {
            std::vector<int> labels(raw.row_record.size());
            for (std::size_t i = 0; i < raw.row_record.size(); ++i) {
                const std::optional<int>& label = records[raw.row_record[i]].label;
                if (!label) throw Error("method '" + o.method + "' needs a label on every record");
                labels[i] = *label;
            }
            rv = fit_reading_vector_labeled(raw, labels, method);
        } else {
            const bool by_id = !records.empty() &&
                               std::all_of(records.begin(), records.end(),
                                           [](const StimulusRecord& r) { return r.pair_id.has_value(); });
            const auto pairs = by_id ? pairs_from_ids(records) : pair_random(records, o.seed);
            report["pairing"] = by_id ? "pair_id" : "random";
            const DifferenceSet diffs = build_differences(raw, pairs);
            report["dropped_rows"] = diffs.dropped;
            rv = fit_reading_vector(diffs, raw, method, o.seed);
        }

        const std::vector<StimulusRecord> labeled = labeled_subset(records);
        if (both_classes(labeled)) {
            determine_sign(rv, model, tpl, labeled);
            const LayerSelection sel = select_layer(rv, model, tpl, labeled);
            sign_stage = "applied";
            report["selection"] = {{"layer", sel.layer},
                                   {"accuracy", sel.accuracy},
                                   {"low_confidence", sel.low_confidence},
                                   {"per_layer_accuracy", sel.per_layer_accuracy}};
        } else {
            sign_stage = "skipped: records carry no usable labels";
        }
    }
    report["sign_stage"] = sign_stage;
    report["low_confidence"] = rv.low_confidence;

    if (method == FitMethod::PCA) {
        json curve = json::array();
        for (const LayerReading& layer : rv.layers)
            curve.push_back(layer.usable && !layer.explained_variance_ratio.empty()
                                ? json(layer.explained_variance_ratio[0])
                                : json());
        report["evr_first_component"] = curve;

        std::optional<std::size_t> at = rv.selected_layer;
        if (!at)
            for (std::size_t l = rv.layers.size(); l-- > 0;)
                if (rv.layers[l].usable) {
                    at = l;
                    break;
                }
        if (at && !rv.layers[*at].explained_variance_ratio.empty() &&
            rv.layers[*at].explained_variance_ratio[0] < 0.35) {
            const std::string warning = "first component explains " +
                                        fmt(rv.layers[*at].explained_variance_ratio[0]) +
                                        " of variance at layer " + std::to_string(*at) +
                                        ", under 0.35";
            report["warnings"] = json::array({warning});
            std::fprintf(stderr, "warning: %s\n", warning.c_str());
        }
    }

    const std::string reading_path = join_path(o.out, "reading.json");
    const std::string report_path = join_path(o.out, "fit_report.json");
    save_reading(rv, reading_path);
    write_json_file(report_path, report);
    if (rv.selected_layer)
        std::printf("selected layer %zu\n", *rv.selected_layer);
    std::printf("wrote %s\n", reading_path.c_str());
    std::printf("wrote %s\n", report_path.c_str());
    return 0;
}

// --- scan -------------------------------------------------------------------

int cmd_scan(const Options& o) {
    const ModelBundle model = load_model(o.model);
    const ReadingVector rv = load_reading(o.reading);
    std::string text = o.text;
    if (!o.data.empty()) {
        if (!text.empty()) throw Error("pass --text or --data, not both");
        text = read_text(o.data);
    }
    if (text.empty()) throw Error("scan needs --text or a non-empty --data file");

    const std::vector<std::size_t> layer_set = layers_or(o, middle_band(model.config.n_layers));
    const ScanResult full = scan_tokens(rv, model, text, layer_set, o.negate);

    // Drop the BOS column so CSV columns line up with the text's own tokens.
    ScanResult scan;
    scan.layer_set = full.layer_set;
    scan.negated = full.negated;
    scan.scores = Matrix(full.scores.rows, full.scores.cols - 1);
    for (std::size_t r = 0; r < full.scores.rows; ++r)
        for (std::size_t c = 1; c < full.scores.cols; ++c) scan.scores(r, c - 1) = full.scores(r, c);
    scan.aggregate.assign(full.aggregate.begin() + 1, full.aggregate.end());

    const TokenIds ids = tokenize(text);
    std::vector<std::string> tokens;
    for (std::size_t i = 1; i < ids.size(); ++i) tokens.push_back(detokenize({ids[i]}));

    const double threshold = default_monitor_threshold(scan);
    const std::vector<MonitorSpan> spans = monitor_report(scan, threshold);
    json spans_json = json::array();
    for (const MonitorSpan& s : spans)
        spans_json.push_back({{"begin", s.begin}, {"end", s.end}, {"peak", s.peak}, {"peak_pos", s.peak_pos}});

    ensure_out_dir(o.out);
    const std::string csv_path = join_path(o.out, "scan.csv");
    const std::string spans_path = join_path(o.out, "spans.json");
    const std::string svg_path = join_path(o.out, "scan.svg");
    write_text(csv_path, scan_csv(scan, tokens));
    write_json_file(spans_path, json{{"threshold", threshold},
                                     {"negated", scan.negated},
                                     {"layers", scan.layer_set},
                                     {"spans", spans_json}});
    write_text(svg_path, scan_svg(scan));
    std::printf("wrote %s\n", csv_path.c_str());
    std::printf("wrote %s (%zu spans flagged)\n", spans_path.c_str(), spans.size());
    std::printf("wrote %s\n", svg_path.c_str());
    return 0;
}

// --- control ----------------------------------------------------------------

int cmd_control(const Options& o) {
    const ModelBundle model = load_model(o.model);
    ensure_out_dir(o.out);

    json dump{{"source", o.source}, {"prompt", o.prompt}, {"negate", o.negate}};
    std::string unedited, edited;
    EditPlan plan;

    if (o.source == "contrast") {
        ContrastSpec spec;
        spec.templates =
            o.tpl.empty() ? default_contrast_templates() : load_contrast_templates(o.tpl).front();
        spec.layers = layers_or(o, middle_band(model.config.n_layers));
        const double coefficient = coef_or(o, spec.coefficient);
        spec.coefficient = o.negate ? -coefficient : coefficient;
        dump["coefficient"] = spec.coefficient;

        const FunctionRender base = render_template_text(spec.templates.base, o.prompt, "");
        unedited = controlled_generate(model, base.text, EditPlan{}, o.n_new);
        edited = controlled_generate_contrast(model, o.prompt, spec, o.n_new);
        // The decode loop rebuilds the plan per step; dump the starting one.
        plan = make_contrast_plan(model, o.prompt, "", spec);
    } else {
        const double coefficient = coef_or(o, 1.0);
        dump["coefficient"] = coefficient;
        if (o.source == "reading") {
            if (o.reading.empty()) throw Error("control --source reading needs --reading");
            const ReadingVector rv = load_reading(o.reading);
            std::vector<std::size_t> layers;
            if (o.layers_text.empty()) {
                if (!rv.selected_layer)
                    throw UnusableLayer("reading vector has no selected layer; pass --layers");
                layers = {*rv.selected_layer};
            } else {
                layers = parse_layer_range(o.layers_text);
            }
            for (std::size_t layer : layers) {
                if (layer >= rv.layers.size() || !rv.layers[layer].usable)
                    throw UnusableLayer("no usable reading vector at layer " + std::to_string(layer));
                EditStep step;
                step.layer = layer;
                step.op = {OpType::LinearCombination,
                           rv.layers[layer].sign * (o.negate ? -1 : 1), coefficient};
                step.controllers = {rv.layers[layer].direction};
                step.span = {SpanKind::All, 0, kSpanOpenEnd};
                plan.steps.push_back(std::move(step));
            }
        } else {  // actadd
            if (o.reference.empty()) throw Error("control --source actadd needs --reference");
            plan = make_actadd_plan(model, o.prompt, o.reference,
                                    layers_or(o, middle_band(model.config.n_layers)),
                                    o.negate ? -coefficient : coefficient);
        }
        unedited = controlled_generate(model, o.prompt, EditPlan{}, o.n_new);
        edited = controlled_generate(model, o.prompt, plan, o.n_new);
    }

    dump["unedited"] = unedited;
    dump["edited"] = edited;
    dump["plan"] = plan_to_json(plan);
    const std::string dump_path = join_path(o.out, "control.json");
    // Generations are raw bytes; replace what UTF-8 cannot carry.
    write_text(dump_path,
               dump.dump(2, ' ', false, nlohmann::json::error_handler_t::replace) + "\n");
    std::printf("--- unedited ---\n%s\n--- edited ---\n%s\n", unedited.c_str(), edited.c_str());
    std::printf("wrote %s\n", dump_path.c_str());
    return 0;
}

// --- lorra ------------------------------------------------------------------

int cmd_lorra(const Options& o) {
    const ModelBundle model = load_model(o.model);
    const std::vector<StimulusRecord> data = load_jsonl(o.data);

    LorraConfig config;
    std::vector<std::size_t> all_blocks(model.config.n_layers);
    for (std::size_t l = 0; l < all_blocks.size(); ++l) all_blocks[l] = l + 1;
    config.edit_layers = layers_or(o, std::move(all_blocks));
    // The loss reads the deepest edited tap.
    config.target_layers = {
        *std::max_element(config.edit_layers.begin(), config.edit_layers.end())};
    config.alpha = o.alpha;
    config.beta = o.beta;
    config.lr = o.lr;
    config.steps = o.steps;
    config.batch = o.batch;
    config.rank = o.rank;
    config.seed = o.seed;
    config.templates =
        o.tpl.empty() ? std::vector<ContrastTemplates>{default_contrast_templates()}
                      : load_contrast_templates(o.tpl);

    ReadingVector rv;
    const ReadingVector* rv_ptr = nullptr;
    if (!o.reading.empty()) {
        rv = load_reading(o.reading);
        rv_ptr = &rv;
    }

    const LorraResult result = lorra_train(model, data, config, rv_ptr);

    ensure_out_dir(o.out);
    const std::string adapters_path = join_path(o.out, "adapters.repe");
    const std::string loss_path = join_path(o.out, "loss.csv");
    save_adapters(result.adapters, adapters_path);
    std::string csv = "step,loss\n";
    for (const auto& [step, loss] : result.curve)
        csv += std::to_string(step) + "," + fmt(loss) + "\n";
    write_text(loss_path, csv);
    std::printf("wrote %s\n", adapters_path.c_str());
    std::printf("wrote %s\n", loss_path.c_str());
    if (!result.curve.empty())
        std::printf("loss %s -> %s\n", fmt(result.curve.front().second).c_str(),
                    fmt(result.curve.back().second).c_str());

    if (o.merge) {
        const ModelBundle merged = merge_adapters(model, result.adapters);
        const std::string merged_path = join_path(o.out, "merged.repe");
        save_model(merged, merged_path);
        std::printf("wrote %s\n", merged_path.c_str());
    }
    return 0;
}

// --- eval -------------------------------------------------------------------

int cmd_eval(const Options& o) {
    const ModelBundle model = load_model(o.model);
    const ReadingVector rv = load_reading(o.reading);
    const std::vector<StimulusRecord> records = load_jsonl(o.data);
    const ConceptTemplate tpl =
        o.tpl.empty() ? default_concept_template("honesty") : load_concept_template(o.tpl);

    std::vector<std::size_t> layers;
    if (!o.layers_text.empty()) {
        layers = parse_layer_range(o.layers_text);
    } else {
        if (!rv.selected_layer)
            throw UnusableLayer("reading vector has no selected layer; pass --layers");
        layers = {*rv.selected_layer};
    }
    for (std::size_t layer : layers)
        if (layer >= rv.layers.size())
            throw InvalidLayer("layer " + std::to_string(layer) + " is out of range");

    EvalReport report;
    if (o.category == "correlation") {
        report = correlation_eval(rv, model, records, tpl, layers.front());
    } else if (o.category == "manipulation") {
        if (o.marker.size() != 1) throw Error("--marker must be a single byte");
        std::vector<std::string> prompts;
        for (const StimulusRecord& r : records) {
            if (!r.text) throw Error("manipulation needs a 'text' field on every record");
            prompts.push_back(*r.text);
        }
        report = manipulation_eval(model, rv, prompts, marker_count_scorer(o.marker[0]),
                                   coef_or(o, 1.0), o.n_new);
    } else if (o.category == "termination") {
        report = termination_eval(model, rv, records, tpl, layers);
    } else {  // recovery
        report = recovery_eval(model, rv, records, tpl, layers, coef_or(o, 1.0));
    }

    ensure_out_dir(o.out);
    const std::string report_path = join_path(o.out, "eval_report.json");
    write_json_file(report_path, eval_report_to_json(report));
    std::printf("%s: %s\n", report.category.c_str(), fmt(report.value).c_str());
    std::printf("wrote %s\n", report_path.c_str());
    return 0;
}

}  // namespace

// --- shared artifact builders -------------------------------------------------

std::vector<std::size_t> parse_layer_range(const std::string& text) {
    const auto fail = [&] { return InvalidLayer("bad layer range '" + text + "'"); };
    const auto number = [&](const std::string& s) {
        if (s.empty()) throw fail();
        std::size_t value = 0;
        for (char c : s) {
            if (c < '0' || c > '9') throw fail();
            value = value * 10 + static_cast<std::size_t>(c - '0');
        }
        return value;
    };

    std::string body = text;
    std::size_t step = 1;
    if (const std::size_t colon = body.find(':'); colon != std::string::npos) {
        step = number(body.substr(colon + 1));
        if (step == 0) throw fail();
        body = body.substr(0, colon);
    }
    const std::size_t dots = body.find("..");
    if (dots == std::string::npos) return {number(body)};
    const std::size_t lo = number(body.substr(0, dots));
    const std::size_t hi = number(body.substr(dots + 2));
    if (lo > hi) throw fail();
    std::vector<std::size_t> out;
    for (std::size_t l = lo; l <= hi; l += step) out.push_back(l);
    return out;
}

namespace {

std::string csv_quote(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

}  // namespace

std::string scan_csv(const ScanResult& scan, const std::vector<std::string>& tokens) {
    if (tokens.size() != scan.scores.cols)
        throw DimensionMismatch("one header token per scanned column required");
    std::string out = "layer";
    for (const std::string& token : tokens) out += "," + csv_quote(token);
    out += '\n';
    for (std::size_t r = 0; r < scan.layer_set.size(); ++r) {
        out += std::to_string(scan.layer_set[r]);
        for (std::size_t c = 0; c < scan.scores.cols; ++c) out += "," + fmt(scan.scores(r, c));
        out += '\n';
    }
    out += "aggregate";
    for (double v : scan.aggregate) out += "," + fmt(v);
    out += '\n';
    return out;
}

std::string scan_svg(const ScanResult& scan) {
    const std::size_t cols = scan.scores.cols;
    const std::size_t n_rows = scan.layer_set.size();
    const int cell = 12, gap = 4;
    const int width = static_cast<int>(cols) * cell;
    const int height = cell + gap + static_cast<int>(n_rows) * cell;

    double mean = 0.0;
    for (double v : scan.aggregate) mean += v;
    if (!scan.aggregate.empty()) mean /= static_cast<double>(scan.aggregate.size());
    double var = 0.0;
    for (double v : scan.aggregate) var += (v - mean) * (v - mean);
    if (!scan.aggregate.empty()) var /= static_cast<double>(scan.aggregate.size());
    const double clip = 3.0 * std::sqrt(var);

    const auto color = [&](double v) {
        const double t = clip > 0.0 ? std::clamp(v, -clip, clip) / clip : 0.0;
        const int a = static_cast<int>(std::lround(std::fabs(t) * 255.0));
        const int r = t >= 0.0 ? 255 : 255 - a;
        const int g = 255 - a;
        const int b = t >= 0.0 ? 255 - a : 255;
        char buf[8];
        std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
        return std::string(buf);
    };
    const auto rect = [&](int x, int y, const std::string& fill) {
        return "<rect x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(y) + "\" width=\"" +
               std::to_string(cell) + "\" height=\"" + std::to_string(cell) + "\" fill=\"" + fill +
               "\"/>\n";
    };

    std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) +
                      "\" height=\"" + std::to_string(height) + "\" shape-rendering=\"crispEdges\">\n";
    for (std::size_t c = 0; c < scan.aggregate.size(); ++c)
        out += rect(static_cast<int>(c) * cell, 0, color(scan.aggregate[c]));
    for (std::size_t r = 0; r < n_rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            out += rect(static_cast<int>(c) * cell, cell + gap + static_cast<int>(r) * cell,
                        color(scan.scores(r, c)));
    out += "</svg>\n";
    return out;
}

// --- entry point --------------------------------------------------------------

int cli_main(int argc, char** argv) {
    Options o;
    CLI::App app{"linear activity reading and control for a toy transformer"};
    app.require_subcommand(1);

    const auto add_out = [&](CLI::App* cmd) { cmd->add_option("--out", o.out, "output directory"); };
    const auto add_seed = [&](CLI::App* cmd) { cmd->add_option("--seed", o.seed, "RNG seed"); };
    const auto add_model = [&](CLI::App* cmd) {
        cmd->add_option("--model", o.model, "model container")->required();
    };

    CLI::App* synth = app.add_subcommand("synth", "generate a planted fixture with ground truth");
    synth->add_option("--records", o.records, "record count");
    synth->add_option("--coef", o.coef, "plant strength, 0 for a null fixture");
    synth->add_option("--sigma", o.sigma, "plant noise");
    synth->add_option("--plant-layer", o.plant_layer, "residual tap receiving the plant");
    synth->add_option("--d-model", o.d_model);
    synth->add_option("--n-layers", o.n_layers);
    synth->add_option("--n-heads", o.n_heads);
    synth->add_option("--d-ff", o.d_ff);
    synth->add_option("--context", o.context);
    add_seed(synth);
    add_out(synth);

    CLI::App* fit = app.add_subcommand("fit", "fit a reading vector from stimulus records");
    add_model(fit);
    fit->add_option("--data", o.data, "records JSONL")->required();
    fit->add_option("--template", o.tpl, "template JSON");
    fit->add_option("--method", o.method)
        ->check(CLI::IsMember({"pca", "kmeans", "meandiff", "logreg", "promptdiff"}));
    fit->add_option("--policy", o.policy)->check(CLI::IsMember({"last", "concept", "response"}));
    fit->add_option("--max-trunc", o.max_trunc, "response truncations per record");
    add_seed(fit);
    add_out(fit);

    CLI::App* scan = app.add_subcommand("scan", "score text per layer and token");
    add_model(scan);
    scan->add_option("--reading", o.reading, "reading vector JSON")->required();
    scan->add_option("--text", o.text, "text to scan");
    scan->add_option("--data", o.data, "file whose contents are scanned");
    scan->add_option("--layers", o.layers_text, "layer set a..b[:step]");
    scan->add_flag("--negate", o.negate, "flip the reading sign");
    add_out(scan);

    CLI::App* control = app.add_subcommand("control", "decode with and without activation edits");
    add_model(control);
    control->add_option("--prompt", o.prompt, "prompt text")->required();
    control->add_option("--source", o.source, "controller source")
        ->check(CLI::IsMember({"reading", "actadd", "contrast"}));
    control->add_option("--reading", o.reading, "reading vector JSON");
    control->add_option("--reference", o.reference, "reference prompt for actadd");
    control->add_option("--template", o.tpl, "contrast template triple JSON");
    control->add_option("--layers", o.layers_text, "layer set a..b[:step]");
    control->add_option("--coef", o.coef, "controller strength");
    control->add_option("--n-new", o.n_new, "tokens to generate");
    control->add_flag("--negate", o.negate, "flip the edit direction");
    add_out(control);

    CLI::App* lorra = app.add_subcommand("lorra", "train low-rank adapters toward contrast targets");
    add_model(lorra);
    lorra->add_option("--data", o.data, "records JSONL")->required();
    lorra->add_option("--template", o.tpl, "contrast template triple JSON");
    lorra->add_option("--layers", o.layers_text, "adapter blocks a..b[:step]");
    lorra->add_option("--alpha", o.alpha, "contrast target weight");
    lorra->add_option("--beta", o.beta, "reading direction weight");
    lorra->add_option("--lr", o.lr, "learning rate");
    lorra->add_option("--steps", o.steps, "optimizer steps");
    lorra->add_option("--batch", o.batch, "batch size");
    lorra->add_option("--rank", o.rank, "adapter rank");
    lorra->add_option("--reading", o.reading, "reading vector JSON for the beta term");
    lorra->add_flag("--merge", o.merge, "also write the merged model");
    add_seed(lorra);
    add_out(lorra);

    CLI::App* eval = app.add_subcommand("eval", "run one evaluation category");
    eval->add_option("--category", o.category)
        ->check(CLI::IsMember({"correlation", "manipulation", "termination", "recovery"}))
        ->required();
    add_model(eval);
    eval->add_option("--reading", o.reading, "reading vector JSON")->required();
    eval->add_option("--data", o.data, "records JSONL")->required();
    eval->add_option("--template", o.tpl, "concept template JSON");
    eval->add_option("--layers", o.layers_text, "layer set a..b[:step]");
    eval->add_option("--coef", o.coef, "steering or add-back strength");
    eval->add_option("--marker", o.marker, "marker byte for the manipulation scorer");
    eval->add_option("--n-new", o.n_new, "tokens to generate");
    add_out(eval);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*synth) return cmd_synth(o);
        if (*fit) return cmd_fit(o);
        if (*scan) return cmd_scan(o);
        if (*control) return cmd_control(o);
        if (*lorra) return cmd_lorra(o);
        return cmd_eval(o);
    } catch (const NonFiniteLoss& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 4;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 3;
    } catch (const ParseError& e) {
        std::fprintf(stderr, "parse error: %s\n", e.what());
        return 3;
    } catch (const SchemaError& e) {
        std::fprintf(stderr, "schema error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}

}  // namespace repe
