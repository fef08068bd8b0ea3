// Acceptance gate: one line per criterion, [PASS]/[FAIL] plus wall time.
// Exit status is the number of failed criteria.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "repe/cli.hpp"
#include "repe/control.hpp"
#include "repe/eval.hpp"
#include "repe/model.hpp"
#include "repe/numerics.hpp"
#include "repe/reading.hpp"
#include "repe/rng.hpp"
#include "repe/stimulus.hpp"
#include "test_support.hpp"

using namespace repe;
namespace fs = std::filesystem;

namespace {

ModelConfig fixture_config() {
    ModelConfig cfg;
    cfg.d_model = 32;
    cfg.n_layers = 4;
    cfg.n_heads = 4;
    cfg.d_ff = 64;
    cfg.max_context = 160;
    return cfg;
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 24;
    cfg.max_context = 64;
    return cfg;
}

Matrix random_matrix(std::size_t n, std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    Matrix m(n, d);
    for (double& v : m.data) v = rng.next_gaussian();
    return m;
}

struct Fitted {
    PlantedFixture fx;
    ConceptTemplate tpl;
    ReadingVector rv;
    std::vector<StimulusRecord> train;
    std::vector<StimulusRecord> held;
};

// Plant at tap 2, PCA on pair differences, sign from labels, last 64 held out.
Fitted fit_fixture(double coefficient, std::size_t total) {
    Fitted f{make_planted_fixture(42, fixture_config(), total, coefficient, 0.5, 2),
             default_concept_template("signal"),
             {},
             {},
             {}};
    f.train.assign(f.fx.records.begin(), f.fx.records.end() - 64);
    f.held.assign(f.fx.records.end() - 64, f.fx.records.end());
    const ActivitySet act =
        collect_concept_activity(f.fx.model, f.tpl, f.train, TokenPolicy::LastToken);
    const DifferenceSet diffs = build_differences(act, pairs_from_ids(f.train));
    f.rv = fit_reading_vector(diffs, act, FitMethod::PCA);
    determine_sign(f.rv, f.fx.model, f.tpl, f.train);
    f.rv.selected_layer = 2;
    return f;
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

std::vector<StimulusRecord> desk_records(int n) {
    std::vector<StimulusRecord> out;
    for (int i = 0; i < n; ++i) {
        StimulusRecord r;
        r.instruction = "Describe item " + std::to_string(i) + ".";
        r.output = "It is fine.";
        out.push_back(r);
    }
    return out;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

// --- criterion bodies ---------------------------------------------------------

bool crit_pca_oracle(std::string& note) {
    double worst = 1.0;
    for (int i = 0; i < 100; ++i) {
        const std::size_t n = 2 + (static_cast<std::size_t>(i) * 7) % 63;
        const std::size_t d = 2 + (static_cast<std::size_t>(i) * 3) % 15;
        const Matrix x = random_matrix(n, d, 1000 + static_cast<std::uint64_t>(i));
        const FitReport fit = pca_first_component(x);
        worst = std::min(worst, std::abs(cosine(fit.direction, oracle::top_eigenvector(x))));
    }
    note = "worst |cos| 1 - " + fmt(1.0 - worst);
    return worst >= 1.0 - 1e-9;
}

bool crit_planted_recovery(std::string& note) {
    const Fitted f = fit_fixture(2.0, 128);  // 32 training pairs
    const double cos_pca = std::abs(cosine(f.rv.layers[2].direction, f.fx.direction));
    const double acc_pca = correlation_eval(f.rv, f.fx.model, f.held, f.tpl, 2).value;

    const ActivitySet act =
        collect_concept_activity(f.fx.model, f.tpl, f.train, TokenPolicy::LastToken);
    std::vector<int> labels(act.row_record.size());
    for (std::size_t i = 0; i < labels.size(); ++i)
        labels[i] = *f.train[act.row_record[i]].label;
    ReadingVector md = fit_reading_vector_labeled(act, labels, FitMethod::MeanDiff);
    determine_sign(md, f.fx.model, f.tpl, f.train);
    const double cos_md = std::abs(cosine(md.layers[2].direction, f.fx.direction));
    const double acc_md = correlation_eval(md, f.fx.model, f.held, f.tpl, 2).value;

    Fitted null_f = fit_fixture(0.0, 128);
    for (StimulusRecord& r : null_f.held) r.pair_id.reset();
    const double acc_null =
        correlation_eval(null_f.rv, null_f.fx.model, null_f.held, null_f.tpl, 2).value;

    note = "cos pca " + fmt(cos_pca) + ", meandiff " + fmt(cos_md) + "; held acc " +
           fmt(acc_pca) + "/" + fmt(acc_md) + "; null " + fmt(acc_null);
    return cos_pca >= 0.9 && cos_md >= 0.9 && acc_pca >= 0.95 && acc_md >= 0.95 &&
           acc_null >= 0.35 && acc_null <= 0.65;
}

bool crit_operator_algebra(std::string& note) {
    Rng rng(33);
    double worst_idem = 0.0, worst_orth = 0.0, worst_inv = 0.0;
    bool monotone = true;
    for (int i = 0; i < 1000; ++i) {
        const std::size_t d = 2 + rng.next_below(31);
        Vec state(d), v(d);
        for (double& x : state) x = rng.next_gaussian();
        for (double& x : v) x = rng.next_gaussian();
        const double c = 0.01 + std::abs(rng.next_gaussian());

        Vec p1 = state;
        apply_operator(p1, Operator{OpType::Projection, 1, 1.0}, v);
        Vec p2 = p1;
        apply_operator(p2, Operator{OpType::Projection, 1, 1.0}, v);
        Vec gap = p2;
        for (std::size_t j = 0; j < d; ++j) gap[j] -= p1[j];
        worst_idem = std::max(worst_idem, norm(gap) / std::max(norm(p1), 1e-30));
        worst_orth = std::max(worst_orth, std::abs(dot(p1, v)) / (norm(state) * norm(v)));

        Vec lc = state;
        apply_operator(lc, Operator{OpType::LinearCombination, 1, c}, v);
        apply_operator(lc, Operator{OpType::LinearCombination, -1, c}, v);
        for (std::size_t j = 0; j < d; ++j) lc[j] -= state[j];
        worst_inv = std::max(worst_inv, norm(lc) / std::max(norm(state), 1e-30));

        const double before = dot(state, v);
        Vec pw = state;
        apply_operator(pw, Operator{OpType::Piecewise, 1, c}, v);
        const double after = dot(pw, v);
        if (std::abs(after) + 1e-12 < std::abs(before) || before * after < 0.0)
            monotone = false;
    }
    note = "idem " + fmt(worst_idem) + ", orth " + fmt(worst_orth) + ", inv " + fmt(worst_inv);
    return worst_idem <= 1e-9 && worst_orth <= 1e-9 && worst_inv <= 1e-12 && monotone;
}

bool crit_termination_recovery(std::string& note) {
    const Fitted f = fit_fixture(2.0, 192);  // 64 training pairs
    const EvalReport term = termination_eval(f.fx.model, f.rv, f.held, f.tpl, {2});
    const double before = term.config.at("accuracy_before").get<double>();
    const double after = term.config.at("accuracy_after").get<double>();

    const ReadingVector ortho =
        manual_rv(f.rv.layers.size(), orthogonal_unit(f.rv.layers[2].direction), 2);
    const EvalReport off = termination_eval(f.fx.model, f.rv, f.held, f.tpl, {2}, &ortho);

    const EvalReport rec = recovery_eval(f.fx.model, f.rv, f.held, f.tpl, {2}, 2.0);

    note = "acc " + fmt(before) + " -> " + fmt(after) + ", orthogonal drop " + fmt(off.value) +
           ", recovery " + fmt(rec.value);
    return before >= 0.95 && after <= 0.65 && std::abs(off.value) <= 0.05 && rec.value >= 0.8;
}

bool crit_lorra(std::string& note) {
    // (a) reverse-mode gradients vs central differences on the small shape
    const ModelConfig tiny = tiny_config();
    const ModelBundle tiny_model = init_model(tiny, 71);
    const TokenIds toks = tokenize("grad check");
    AdapterSet adapters = AdapterSet::lora_init(tiny, {1, 2}, 2, 7);
    Rng rng(91);
    for (Adapter& ad : adapters.items)
        for (double& x : ad.b.data) x = 0.05 * rng.next_gaussian();
    Vec probe(tiny.d_model);
    for (double& x : probe) x = rng.next_gaussian();
    const HiddenLossFn loss = [&](const HiddenStates& h, HiddenStates& dh) {
        double value = 0.0;
        const Matrix& mid = h.layers[1];
        for (std::size_t i = 0; i < mid.data.size(); ++i) {
            value += 0.5 * mid.data[i] * mid.data[i];
            dh.layers[1].data[i] += mid.data[i];
        }
        const Matrix& top = h.layers[2];
        const std::size_t t = top.rows - 1;
        for (std::size_t j = 0; j < top.cols; ++j) {
            value += probe[j] * top(t, j);
            dh.layers[2](t, j) += probe[j];
        }
        return value;
    };
    AdapterSet grads;
    grad_adapters(tiny_model, adapters, toks, loss, grads);
    double worst_grad = 0.0;
    const double h = 1e-4;
    for (std::size_t item = 0; item < adapters.items.size(); ++item) {
        for (Matrix Adapter::* field : {&Adapter::a, &Adapter::b}) {
            Matrix& param = adapters.items[item].*field;
            const Matrix& grad = grads.items[item].*field;
            for (std::size_t i = 0; i < param.data.size(); ++i) {
                const double saved = param.data[i];
                param.data[i] = saved + h;
                ForwardResult up = forward_capture(tiny_model, toks, &adapters);
                HiddenStates scratch = up.hidden.zeros_like();
                const double f_plus = loss(up.hidden, scratch);
                param.data[i] = saved - h;
                ForwardResult dn = forward_capture(tiny_model, toks, &adapters);
                scratch = dn.hidden.zeros_like();
                const double f_minus = loss(dn.hidden, scratch);
                param.data[i] = saved;
                const double fd = (f_plus - f_minus) / (2.0 * h);
                const double g = grad.data[i];
                worst_grad = std::max(
                    worst_grad, std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), 1e-8}));
            }
        }
    }

    // (b) zero adapters with alpha = beta = 0 cost nothing
    const ModelConfig desk = fixture_config();
    const ModelBundle desk_model = init_model(desk, 42);
    const std::vector<StimulusRecord> records = desk_records(32);
    const ContrastTemplates tpl = default_contrast_templates();
    const std::vector<StimulusRecord> batch(records.begin(), records.begin() + 4);
    const double zero_loss = lorra_loss(desk_model, AdapterSet::zeros(desk, {1, 2, 3}, 4), batch,
                                        tpl, {3}, 0.0, 0.0);

    // (c) desk training converges within 200 steps
    LorraConfig config;
    config.edit_layers = {1, 2, 3};
    config.target_layers = {3};
    config.alpha = 1.0;
    config.lr = 0.03;
    config.steps = 200;
    config.batch = 4;
    config.rank = 4;
    config.templates = {tpl};
    config.seed = 7;
    const LorraResult result = lorra_train(desk_model, records, config);
    const double first = result.curve.front().second;
    const double last = result.curve.back().second;
    const double ratio = last / first;

    // (d) merging reproduces the adapter-attached logits
    const ModelBundle merged = merge_adapters(desk_model, result.adapters);
    const TokenIds probe_ids = tokenize("merged check line");
    const Matrix attached = forward_capture(desk_model, probe_ids, &result.adapters).logits;
    const Matrix flat = forward_capture(merged, probe_ids).logits;
    double worst_logit = 0.0;
    for (std::size_t i = 0; i < attached.data.size(); ++i)
        worst_logit = std::max(worst_logit, std::abs(attached.data[i] - flat.data[i]));

    note = "grad err " + fmt(worst_grad) + ", zero loss " + fmt(zero_loss) + ", ratio " +
           fmt(ratio) + ", merge gap " + fmt(worst_logit);
    return worst_grad <= 1e-4 && zero_loss == 0.0 && first > 0.0 && ratio <= 0.2 &&
           worst_logit <= 1e-5;
}

bool crit_contrast(std::string& note) {
    const ModelBundle model = init_model(fixture_config(), 42);
    const ContrastTemplates d = default_contrast_templates();
    const std::string q = "say the usual thing";

    ContrastSpec same;
    same.templates = {d.base, d.base, d.base};
    same.layers = {1, 2};
    same.coefficient = 0.5;
    const std::string controlled = controlled_generate_contrast(model, q, same, 16);
    const std::string plain =
        controlled_generate(model, render_template_text(d.base, q, "").text, EditPlan{}, 16);
    const bool noop = controlled == plain;

    ContrastSpec spec;
    spec.templates = d;
    spec.layers = {1, 3};
    spec.coefficient = 0.5;
    const EditPlan iterative = make_contrast_plan(model, q, "so", spec);
    ContrastSpec solo = spec;
    solo.layers = {3};
    const EditPlan naive = make_contrast_plan(model, q, "so", solo);

    double first_norm = 0.0;
    for (const Vec& c : iterative.steps[0].controllers) first_norm = std::max(first_norm, norm(c));
    double gap = 0.0;
    const EditStep& a = iterative.steps[1];
    const EditStep& b = naive.steps[0];
    for (std::size_t p = 0; p < a.controllers.size() && p < b.controllers.size(); ++p)
        for (std::size_t j = 0; j < a.controllers[p].size(); ++j)
            gap = std::max(gap, std::abs(a.controllers[p][j] - b.controllers[p][j]));

    note = std::string("no-op ") + (noop ? "exact" : "BROKEN") + ", first controller norm " +
           fmt(first_norm) + ", iterative vs naive gap " + fmt(gap);
    return noop && first_norm > 0.0 && gap > 1e-6;
}

bool crit_manipulation(std::string& note) {
    const SteeringFixture fx = make_steering_fixture(17, fixture_config(), 'Z', 6.0);
    const ReadingVector rv = manual_rv(fixture_config().n_layers + 1, fx.direction, 2);
    std::vector<std::string> prompts;
    for (int p = 0; p < 32; ++p) prompts.push_back("prompt " + std::to_string(p));
    const TextScorer scorer = marker_count_scorer('Z');
    const double win = manipulation_eval(fx.model, rv, prompts, scorer, 2.0, 20).value;
    const double still = manipulation_eval(fx.model, rv, prompts, scorer, 0.0, 20).value;
    note = "win rate " + fmt(win) + ", zero-coefficient " + fmt(still);
    return win >= 0.8 && still == 0.5;
}

bool crit_monitoring(std::string& note) {
    const PlantedFixture fx = make_planted_fixture(42, fixture_config(), 64, 2.0, 0.5, 2);
    const ConceptTemplate tpl = default_concept_template("signal");
    const ActivitySet act =
        collect_concept_activity(fx.model, tpl, fx.records, TokenPolicy::LastToken);
    ReadingVector rv = fit_reading_vector(build_differences(act, pairs_from_ids(fx.records)),
                                          act, FitMethod::PCA);
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

    bool exact_sum = true;
    for (std::size_t c = 0; c < scan.aggregate.size(); ++c) {
        double acc = 0.0;
        for (std::size_t r = 0; r < scan.scores.rows; ++r) acc += scan.scores(r, c);
        if (acc != scan.aggregate[c]) exact_sum = false;
    }

    const std::vector<MonitorSpan> spans = monitor_report(scan, default_monitor_threshold(scan));
    double best = 0.0;
    for (const MonitorSpan& s : spans) {
        const double inter = static_cast<double>(std::max<std::ptrdiff_t>(
            0, static_cast<std::ptrdiff_t>(std::min(s.end, t1)) -
                   static_cast<std::ptrdiff_t>(std::max(s.begin, t0))));
        const double uni = static_cast<double>(std::max(s.end, t1) - std::min(s.begin, t0));
        best = std::max(best, inter / uni);
    }
    note = "IoU " + fmt(best) + ", aggregate sum " + (exact_sum ? "exact" : "INEXACT");
    return best >= 0.5 && exact_sum;
}

bool crit_heuristic(std::string& note) {
    ModelConfig wide;
    wide.d_model = 16;
    wide.n_layers = 2;
    wide.n_heads = 2;
    wide.d_ff = 32;
    wide.max_context = 384;

    ModelBundle flat = init_model(wide, 51);
    std::fill(flat.tok_embedding.data.begin(), flat.tok_embedding.data.end(), 0.0);
    const HeuristicScale scale = heuristic_scale_7();
    const double uniform = heuristic_score(flat, heuristic_prompt("truth", "the sky is green", scale), scale);

    const Vec want_values = {-1.0, -2.0 / 3.0, -1.0 / 3.0, 0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0};
    const bool values_exact = scale.values == want_values;

    const ModelConfig cfg = fixture_config();
    const ModelBundle model = init_model(cfg, 61);
    Vec du(cfg.d_model), dp(cfg.d_model);
    for (std::size_t j = 0; j < cfg.d_model; ++j) {
        du[j] = std::sin(0.3 * (1.0 + j));
        dp[j] = std::cos(0.9 * (1.0 + j));
    }
    const ReadingVector utility = manual_rv(cfg.n_layers + 1, du, 2);
    const ReadingVector probability = manual_rv(cfg.n_layers + 1, dp, 3);
    const std::vector<std::string> consequences = {"gain ten", "lose it all", "nothing changes",
                                                   "small win", "fire"};
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
    const double risk_err = std::abs(got - want) / std::max(1.0, std::abs(want));

    note = "uniform score " + fmt(uniform) + ", risk err " + fmt(risk_err);
    return uniform == 0.0 && values_exact && risk_err <= 1e-12;
}

int run_cmd(const std::string& args) {
    const std::string cmd = std::string(REPE_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

bool crit_cli_determinism(std::string& note) {
    const fs::path root = fs::temp_directory_path() / "repe_acceptance_cli";
    fs::remove_all(root);
    const fs::path inputs = root / "inputs";
    fs::create_directories(inputs);

    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.max_context = 128;
    const SteeringFixture fx = make_steering_fixture(13, cfg, 'Q', 5.0);
    save_model(fx.model, (inputs / "model.repe").string());
    save_reading(manual_rv(cfg.n_layers + 1, fx.direction, 1), (inputs / "reading.json").string());
    save_jsonl(desk_records(4), (inputs / "fn.jsonl").string());
    const std::string model = " --model " + (inputs / "model.repe").string();
    const std::string reading = " --reading " + (inputs / "reading.json").string();

    for (const char* run : {"run1", "run2"}) {
        const std::string out = (root / run).string();
        if (run_cmd("synth --out " + out +
                    " --seed 3 --records 16 --d-model 16 --n-layers 2 --n-heads 2 --d-ff 32"
                    " --context 128") != 0 ||
            run_cmd("fit" + model + " --data " + out + "/fixture.jsonl --seed 3 --out " + out) !=
                0 ||
            run_cmd("scan" + model + reading + " --layers 1 --text 'scan me twice' --out " + out) !=
                0 ||
            run_cmd("control" + model + reading +
                    " --source reading --prompt 'push it' --coef 1.5 --n-new 8 --out " + out) !=
                0 ||
            run_cmd("lorra" + model + " --data " + (inputs / "fn.jsonl").string() +
                    " --layers 1..2 --steps 2 --batch 2 --rank 2 --seed 5 --merge --out " + out) !=
                0 ||
            run_cmd("eval --category manipulation" + model + reading + " --data " + out +
                    "/fixture.jsonl --coef 1.0 --marker Q --n-new 8 --out " + out) != 0) {
            note = std::string("a subcommand failed in ") + run;
            return false;
        }
    }

    std::size_t files = 0;
    for (const auto& entry : fs::directory_iterator(root / "run1")) {
        const fs::path name = entry.path().filename();
        if (slurp(root / "run1" / name) != slurp(root / "run2" / name)) {
            note = "artifact differs: " + name.string();
            return false;
        }
        ++files;
    }
    note = std::to_string(files) + " artifacts byte-identical across re-runs";
    return files == 13;
}

}  // namespace

int main() {
    struct Criterion {
        const char* name;
        double limit_s;  // 0 means no stated budget
        std::function<bool(std::string&)> body;
    };
    const std::vector<Criterion> criteria = {
        {"PCA first component matches an independent eigensolver on 100 matrices", 1.0,
         crit_pca_oracle},
        {"planted direction recovered by PCA and MeanDiff, held-out accuracy on target", 10.0,
         crit_planted_recovery},
        {"operator algebra holds over 1000 random triples", 1.0, crit_operator_algebra},
        {"projection terminates the read, signed add-back recovers it", 30.0,
         crit_termination_recovery},
        {"adapter training: gradients, zero loss, desk convergence, merge parity", 120.0,
         crit_lorra},
        {"contrast control: equal templates are a no-op, iteration differs from naive", 10.0,
         crit_contrast},
        {"steering wins the marker count over 32 prompts, zero strength is a coin flip", 60.0,
         crit_manipulation},
        {"scan flags the planted span at the 2-std threshold with an exact aggregate", 10.0,
         crit_monitoring},
        {"heuristic scoring and risk composition are exact", 0.0, crit_heuristic},
        {"every CLI subcommand re-runs byte-identically", 0.0, crit_cli_determinism},
    };

    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const auto start = std::chrono::steady_clock::now();
        std::string detail;
        bool ok = false;
        try {
            ok = criteria[i].body(detail);
        } catch (const std::exception& e) {
            detail = std::string("exception: ") + e.what();
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (criteria[i].limit_s > 0.0 && secs > criteria[i].limit_s) {
            ok = false;
            detail += (detail.empty() ? "" : "; ") + std::string("over the ") +
                      fmt(criteria[i].limit_s) + "s budget";
        }
        std::printf("[%s] %2zu. %s (%.2fs)%s%s\n", ok ? "PASS" : "FAIL", i + 1, criteria[i].name,
                    secs, detail.empty() ? "" : " - ", detail.c_str());
        std::fflush(stdout);
        if (!ok) ++failures;
    }
    return failures;
}
