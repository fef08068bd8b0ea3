#include "repe/control.hpp"

#include <algorithm>
#include <cmath>

#include "repe/parallel.hpp"
#include "repe/rng.hpp"

namespace repe {

void ContrastTemplates::validate() const {
    for (const std::string* text : {&base, &experimental, &reference}) {
        std::size_t count = 0;
        for (std::size_t pos = text->find("<output>"); pos != std::string::npos;
             pos = text->find("<output>", pos + 8))
            ++count;
        if (count != 1)
            throw SchemaError("contrast template needs exactly one <output> placeholder");
    }
}

ContrastTemplates default_contrast_templates() {
    ContrastTemplates t;
    t.base = "USER: <instruction>\nASSISTANT: <output>";
    t.experimental = "USER: <instruction> Give a truthful answer.\nASSISTANT: <output>";
    t.reference = "USER: <instruction> Give an untruthful answer.\nASSISTANT: <output>";
    return t;
}

namespace {

TokenIds checked_tokens(const ModelBundle& model, const std::string& text) {
    TokenIds ids = tokenize(text);
    if (ids.size() > model.config.max_context)
        throw ContextOverflow("rendered text exceeds the context window");
    return ids;
}

void check_tap(const ModelConfig& config, std::size_t layer) {
    if (layer > config.n_layers)
        throw InvalidLayer("tap " + std::to_string(layer) + " exceeds the deepest layer");
}

// A render plus its token geometry: where the response starts, where the
// controllers anchor (response start, or the final token when no response).
struct Frame {
    TokenIds ids;
    std::size_t anchor = 0;
};

Frame make_frame(const ModelBundle& model, const std::string& tpl_text, const std::string& q,
                 const std::string& a_prefix) {
    const FunctionRender r = render_template_text(tpl_text, q, a_prefix);
    Frame f;
    f.ids = checked_tokens(model, r.text);
    f.anchor = a_prefix.empty() ? f.ids.size() - 1 : r.response_begin + 1;  // +1 skips BOS
    return f;
}

// Shifts every committed span from the base frame into a side frame.
EditPlan shift_plan(const EditPlan& plan, std::ptrdiff_t delta) {
    EditPlan out = plan;
    for (EditStep& step : out.steps) {
        step.span.begin = static_cast<std::size_t>(
            static_cast<std::ptrdiff_t>(step.span.begin) + delta);
        if (step.span.end != kSpanOpenEnd)
            step.span.end = static_cast<std::size_t>(
                static_cast<std::ptrdiff_t>(step.span.end) + delta);
    }
    return out;
}

std::pair<std::size_t, std::size_t> resolve_positions(const Frame& base,
                                                      const TokenSpan& span) {
    std::size_t lo = base.anchor;
    std::size_t hi = base.ids.size();
    switch (span.kind) {
        case SpanKind::All: break;
        case SpanKind::Range:
            lo = std::max(lo, span.begin);
            hi = std::min(hi, span.end == kSpanOpenEnd ? hi : span.end);
            break;
        case SpanKind::LastToken:
            lo = base.ids.size() - 1;
            break;
    }
    if (lo >= hi) {  // degenerate span: fall back to the final token
        lo = base.ids.size() - 1;
        hi = base.ids.size();
    }
    return {lo, hi};
}

}  // namespace

EditPlan make_actadd_plan(const ModelBundle& model, const std::string& task_prompt,
                          const std::string& reference_prompt,
                          const std::vector<std::size_t>& layers, double coefficient) {
    if (layers.empty()) throw InvalidLayer("steering plan needs at least one layer");
    for (std::size_t l : layers) check_tap(model.config, l);
    const TokenIds task_ids = checked_tokens(model, task_prompt);
    const TokenIds ref_ids = checked_tokens(model, reference_prompt);
    const ForwardResult task = forward_capture(model, task_ids);
    const ForwardResult ref = forward_capture(model, ref_ids);
    EditPlan plan;
    for (std::size_t l : layers) {
        const Vec a = task.hidden.layers[l].row_vec(task_ids.size() - 1);
        const Vec b = ref.hidden.layers[l].row_vec(ref_ids.size() - 1);
        Vec controller(a.size());
        for (std::size_t j = 0; j < a.size(); ++j) controller[j] = a[j] - b[j];
        EditStep step;
        step.layer = l;
        step.op = Operator{OpType::LinearCombination, 1, coefficient};
        step.controllers = {std::move(controller)};
        step.span = TokenSpan{SpanKind::All, 0, kSpanOpenEnd};
        plan.steps.push_back(std::move(step));
    }
    return plan;
}

EditPlan make_contrast_plan(const ModelBundle& model, const std::string& q,
                            const std::string& a_prefix, const ContrastSpec& spec) {
    spec.templates.validate();
    if (spec.layers.empty()) throw InvalidLayer("contrast plan needs target layers");
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        check_tap(model.config, spec.layers[i]);
        if (i > 0 && spec.layers[i] <= spec.layers[i - 1])
            throw InvalidLayer("contrast target layers must be strictly ascending");
    }
    const Frame base = make_frame(model, spec.templates.base, q, a_prefix);
    const Frame plus = make_frame(model, spec.templates.experimental, q, a_prefix);
    const Frame minus = make_frame(model, spec.templates.reference, q, a_prefix);
    const auto [lo, hi] = resolve_positions(base, spec.span);
    const std::ptrdiff_t dp = static_cast<std::ptrdiff_t>(plus.anchor) -
                              static_cast<std::ptrdiff_t>(base.anchor);
    const std::ptrdiff_t dm = static_cast<std::ptrdiff_t>(minus.anchor) -
                              static_cast<std::ptrdiff_t>(base.anchor);

    EditPlan committed;
    for (std::size_t l : spec.layers) {
        const ForwardResult fp = committed.steps.empty()
                                     ? forward_capture(model, plus.ids)
                                     : forward_with_edits(model, plus.ids,
                                                          shift_plan(committed, dp));
        const ForwardResult fm = committed.steps.empty()
                                     ? forward_capture(model, minus.ids)
                                     : forward_with_edits(model, minus.ids,
                                                          shift_plan(committed, dm));
        const Matrix& hp = fp.hidden.layers[l];
        const Matrix& hm = fm.hidden.layers[l];
        EditStep step;
        step.layer = l;
        step.op = Operator{OpType::LinearCombination, 1, spec.coefficient};
        step.span = TokenSpan{SpanKind::Range, lo, hi};
        for (std::size_t pos = lo; pos < hi; ++pos) {
            const std::size_t pp = static_cast<std::size_t>(
                static_cast<std::ptrdiff_t>(pos) + dp);
            const std::size_t pm = static_cast<std::size_t>(
                static_cast<std::ptrdiff_t>(pos) + dm);
            Vec v(model.config.d_model);
            for (std::size_t j = 0; j < v.size(); ++j) v[j] = hp.row(pp)[j] - hm.row(pm)[j];
            step.controllers.push_back(std::move(v));
        }
        committed.steps.push_back(std::move(step));
    }
    return committed;
}

std::string controlled_generate(const ModelBundle& model, const std::string& prompt,
                                const EditPlan& plan, std::size_t n_new,
                                const AdapterSet* adapters) {
    const TokenIds ids = checked_tokens(model, prompt);
    return detokenize(generate(model, ids, n_new, &plan, adapters));
}

std::string controlled_generate_contrast(const ModelBundle& model, const std::string& q,
                                         const ContrastSpec& spec, std::size_t n_new,
                                         const AdapterSet* adapters) {
    std::string answer;
    for (std::size_t step = 0; step < n_new; ++step) {
        const EditPlan plan = make_contrast_plan(model, q, answer, spec);
        const FunctionRender r = render_template_text(spec.templates.base, q, answer);
        const TokenIds ids = checked_tokens(model, r.text);
        const ForwardResult fr = forward_with_edits(model, ids, plan, adapters);
        const double* logits = fr.logits.row(ids.size() - 1);
        int best = 0;
        for (std::size_t t = 1; t < model.config.vocab_size; ++t)
            if (logits[t] > logits[best]) best = static_cast<int>(t);
        answer += detokenize({best});
    }
    return answer;
}

// --- LoRRA ------------------------------------------------------------------

void LorraConfig::validate(const ModelConfig& config) const {
    if (edit_layers.empty()) throw InvalidLayer("adapter training needs edit layers");
    for (std::size_t l : edit_layers)
        if (l < 1 || l > config.n_layers)
            throw InvalidLayer("edit layer " + std::to_string(l) + " outside 1..n_layers");
    if (target_layers.empty()) throw InvalidLayer("adapter training needs target layers");
    for (std::size_t l : target_layers) check_tap(config, l);
    if (!(alpha >= 0.0) || !(beta >= 0.0))
        throw NonFiniteInput("alpha and beta must be finite and non-negative");
    if (!(lr > 0.0)) throw NonFiniteInput("learning rate must be positive");
    if (batch == 0) throw TooFewRecords("batch size must be at least 1");
    if (rank == 0) throw DimensionMismatch("adapter rank must be at least 1");
    if (templates.empty()) throw MissingField("no contrast templates configured");
    for (const ContrastTemplates& t : templates) t.validate();
}

namespace {

// Frozen-model targets for one record at each requested tap, with the mask
// realized as an explicit response range.
struct RecordTargets {
    TokenIds ids;                // base render tokens
    std::size_t resp_begin = 0;  // first masked-in position
    std::vector<Matrix> target;  // aligned with target_layers
};

Vec beta_term(const ReadingVector* rv, std::size_t layer, double beta, std::size_t d_model) {
    Vec out(d_model, 0.0);
    if (beta == 0.0) return out;
    if (!rv) throw MissingReadingVector("beta > 0 needs a reading vector");
    if (layer >= rv->layers.size() || !rv->layers[layer].usable)
        throw MissingReadingVector("beta > 0 needs a usable direction at tap " +
                                   std::to_string(layer));
    const LayerReading& lr = rv->layers[layer];
    for (std::size_t j = 0; j < d_model; ++j)
        out[j] = beta * lr.sign * lr.direction[j];
    return out;
}

RecordTargets make_targets(const ModelBundle& model, const StimulusRecord& rec,
                           const ContrastTemplates& tpl,
                           const std::vector<std::size_t>& target_layers, double alpha,
                           double beta, const ReadingVector* rv) {
    rec.validate();
    if (!rec.instruction || !rec.output)
        throw MissingField("adapter training records need instruction and output");
    if (rec.output->empty()) throw EmptyOutput("record output is empty");

    const Frame base = make_frame(model, tpl.base, *rec.instruction, *rec.output);
    const Frame plus = make_frame(model, tpl.experimental, *rec.instruction, *rec.output);
    const Frame minus = make_frame(model, tpl.reference, *rec.instruction, *rec.output);
    const ForwardResult f0 = forward_capture(model, base.ids);
    const ForwardResult fp = forward_capture(model, plus.ids);
    const ForwardResult fm = forward_capture(model, minus.ids);

    RecordTargets out;
    out.ids = base.ids;
    out.resp_begin = base.anchor;
    const std::size_t n_resp = base.ids.size() - base.anchor;
    for (std::size_t li = 0; li < target_layers.size(); ++li) {
        const std::size_t l = target_layers[li];
        const Vec vr = beta_term(rv, l, beta, model.config.d_model);
        Matrix t(n_resp, model.config.d_model);
        const Matrix& h0 = f0.hidden.layers[l];
        const Matrix& hp = fp.hidden.layers[l];
        const Matrix& hm = fm.hidden.layers[l];
        for (std::size_t r = 0; r < n_resp; ++r) {
            const std::size_t p0 = base.anchor + r;
            const std::size_t pp = plus.anchor + r;
            const std::size_t pm = minus.anchor + r;
            for (std::size_t j = 0; j < model.config.d_model; ++j)
                t(r, j) = h0.row(p0)[j] + alpha * (hp.row(pp)[j] - hm.row(pm)[j]) + vr[j];
        }
        out.target.push_back(std::move(t));
    }
    return out;
}

// Sum over taps of the Euclidean norm of the masked difference; optionally
// accumulates d(loss)/d(hidden) for the backward pass.
double masked_norm_loss(const HiddenStates& h, const RecordTargets& rt,
                        const std::vector<std::size_t>& target_layers, HiddenStates* grad) {
    double loss = 0.0;
    for (std::size_t li = 0; li < target_layers.size(); ++li) {
        const Matrix& pred = h.layers[target_layers[li]];
        const Matrix& want = rt.target[li];
        double sum_sq = 0.0;
        for (std::size_t r = 0; r < want.rows; ++r) {
            const double* p = pred.row(rt.resp_begin + r);
            const double* t = want.row(r);
            for (std::size_t j = 0; j < want.cols; ++j) {
                const double d = p[j] - t[j];
                sum_sq += d * d;
            }
        }
        const double l2 = std::sqrt(sum_sq);
        loss += l2;
        if (grad && l2 > 0.0) {  // zero difference keeps the zero subgradient
            Matrix& g = grad->layers[target_layers[li]];
            for (std::size_t r = 0; r < want.rows; ++r) {
                const double* p = pred.row(rt.resp_begin + r);
                const double* t = want.row(r);
                double* gr = g.row(rt.resp_begin + r);
                for (std::size_t j = 0; j < want.cols; ++j)
                    gr[j] += (p[j] - t[j]) / l2;
            }
        }
    }
    return loss;
}

}  // namespace

double lorra_loss(const ModelBundle& model, const AdapterSet& adapters,
                  const std::vector<StimulusRecord>& batch, const ContrastTemplates& tpl,
                  const std::vector<std::size_t>& target_layers, double alpha, double beta,
                  const ReadingVector* rv) {
    if (batch.empty()) throw TooFewRecords("loss needs a nonempty batch");
    tpl.validate();
    for (std::size_t l : target_layers) check_tap(model.config, l);
    std::vector<double> losses(batch.size());
    parallel_for(batch.size(), [&](std::size_t i) {
        const RecordTargets rt =
            make_targets(model, batch[i], tpl, target_layers, alpha, beta, rv);
        const ForwardResult pred = forward_capture(model, rt.ids, &adapters);
        losses[i] = masked_norm_loss(pred.hidden, rt, target_layers, nullptr);
    });
    double total = 0.0;
    for (double x : losses) total += x;
    return total / static_cast<double>(batch.size());
}

namespace {

struct AdamState {
    std::vector<Vec> m_a, v_a, m_b, v_b;
};

void adam_update(Matrix& w, Vec& m, Vec& v, const Matrix& g, double scale, double lr,
                 std::size_t t) {
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (std::size_t i = 0; i < w.data.size(); ++i) {
        const double gi = g.data[i] * scale;
        m[i] = b1 * m[i] + (1.0 - b1) * gi;
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
        w.data[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
}

}  // namespace

LorraResult lorra_train(const ModelBundle& model, const std::vector<StimulusRecord>& data,
                        const LorraConfig& config, const ReadingVector* rv) {
    config.validate(model.config);
    if (data.empty()) throw TooFewRecords("adapter training needs data");
    if (config.beta > 0.0 && !rv)
        throw MissingReadingVector("beta > 0 needs a reading vector");

    LorraResult result;
    result.adapters = AdapterSet::lora_init(model.config, config.edit_layers, config.rank,
                                            derive_seed(config.seed, 0));
    AdamState adam;
    for (const Adapter& ad : result.adapters.items) {
        adam.m_a.emplace_back(ad.a.data.size(), 0.0);
        adam.v_a.emplace_back(ad.a.data.size(), 0.0);
        adam.m_b.emplace_back(ad.b.data.size(), 0.0);
        adam.v_b.emplace_back(ad.b.data.size(), 0.0);
    }

    Rng rng(derive_seed(config.seed, 1));
    for (std::size_t step = 0; step < config.steps; ++step) {
        const ContrastTemplates& tpl =
            config.templates[rng.next_below(config.templates.size())];
        std::vector<std::size_t> picks(config.batch);
        for (std::size_t& p : picks) p = rng.next_below(data.size());

        std::vector<double> losses(config.batch);
        std::vector<AdapterSet> grads(config.batch);
        try {
            parallel_for(config.batch, [&](std::size_t i) {
                const RecordTargets rt = make_targets(model, data[picks[i]], tpl,
                                                      config.target_layers, config.alpha,
                                                      config.beta, rv);
                grads[i] = result.adapters.zeros_like();
                losses[i] = grad_adapters(
                    model, result.adapters, rt.ids,
                    [&](const HiddenStates& h, HiddenStates& g) {
                        return masked_norm_loss(h, rt, config.target_layers, &g);
                    },
                    grads[i]);
            });
        } catch (const NonFiniteLoss& e) {
            throw NonFiniteLoss("step " + std::to_string(step) + ": " + e.what());
        }

        double loss = 0.0;
        for (double x : losses) loss += x;
        loss /= static_cast<double>(config.batch);
        if (!std::isfinite(loss))
            throw NonFiniteLoss("non-finite loss at step " + std::to_string(step));
        result.curve.emplace_back(step, loss);

        const double scale = 1.0 / static_cast<double>(config.batch);
        for (std::size_t k = 0; k < result.adapters.items.size(); ++k) {
            Matrix ga(result.adapters.items[k].a.rows, result.adapters.items[k].a.cols);
            Matrix gb(result.adapters.items[k].b.rows, result.adapters.items[k].b.cols);
            for (const AdapterSet& g : grads) {
                for (std::size_t i = 0; i < ga.data.size(); ++i)
                    ga.data[i] += g.items[k].a.data[i];
                for (std::size_t i = 0; i < gb.data.size(); ++i)
                    gb.data[i] += g.items[k].b.data[i];
            }
            adam_update(result.adapters.items[k].a, adam.m_a[k], adam.v_a[k], ga, scale,
                        config.lr, step + 1);
            adam_update(result.adapters.items[k].b, adam.m_b[k], adam.v_b[k], gb, scale,
                        config.lr, step + 1);
        }
    }
    return result;
}

}  // namespace repe
