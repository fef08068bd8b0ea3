#include "repe/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "repe/container.hpp"
#include "repe/rng.hpp"

namespace repe {

namespace {

// Weights are stored as f32; keep the in-memory doubles on the f32 grid so a
// save/load round trip is bit-exact.
double f32(double v) { return static_cast<double>(static_cast<float>(v)); }

void matvec(const Matrix& w, const double* x, double* y) {
    for (std::size_t i = 0; i < w.rows; ++i) {
        const double* wr = w.row(i);
        double s = 0.0;
        for (std::size_t j = 0; j < w.cols; ++j) s += wr[j] * x[j];
        y[i] = s;
    }
}

// y += W^T x  (used when backpropagating through y = W x)
void matvec_t_add(const Matrix& w, const double* x, double* y) {
    for (std::size_t i = 0; i < w.rows; ++i) {
        const double* wr = w.row(i);
        const double xi = x[i];
        for (std::size_t j = 0; j < w.cols; ++j) y[j] += wr[j] * xi;
    }
}

void rmsnorm(const double* x, const Vec& gain, double eps, std::size_t d, double* out) {
    double msq = 0.0;
    for (std::size_t j = 0; j < d; ++j) msq += x[j] * x[j];
    const double r = std::sqrt(msq / static_cast<double>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) out[j] = x[j] / r * gain[j];
}

// dx += backward of y = rmsnorm(x) * gain given dy
void rmsnorm_backward_add(const double* x, const Vec& gain, double eps, std::size_t d,
                          const double* dy, double* dx) {
    double msq = 0.0;
    for (std::size_t j = 0; j < d; ++j) msq += x[j] * x[j];
    const double r = std::sqrt(msq / static_cast<double>(d) + eps);
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += dy[j] * gain[j] * x[j];
    const double k = s / (static_cast<double>(d) * r * r * r);
    for (std::size_t j = 0; j < d; ++j) dx[j] += dy[j] * gain[j] / r - x[j] * k;
}

double silu(double z) { return z / (1.0 + std::exp(-z)); }

double silu_grad(double z) {
    const double sig = 1.0 / (1.0 + std::exp(-z));
    return sig * (1.0 + z * (1.0 - sig));
}

struct LayerCache {
    Matrix x_in;   // residual entering the block
    Matrix xn;     // after attention norm
    Matrix q, k, v;
    Matrix aq_x, av_x;          // A * xn for adapted projections (T x rank)
    std::vector<Matrix> probs;  // per head, T x T causal attention weights
    Matrix ctx;
    Matrix x_mid;  // residual after attention
    Matrix xn2;    // after mlp norm
    Matrix u;      // T x 2*d_ff
    Matrix gated;  // T x d_ff
};

struct ResolvedSpan {
    std::size_t begin = 0;
    std::size_t end = 0;
};

ResolvedSpan resolve_span(const TokenSpan& span, std::size_t t_total) {
    switch (span.kind) {
        case SpanKind::All:
            return {0, t_total};
        case SpanKind::Range:
            return {std::min(span.begin, t_total), std::min(span.end, t_total)};
        case SpanKind::LastToken:
            return {t_total == 0 ? 0 : t_total - 1, t_total};
    }
    return {0, 0};
}

void apply_step(Matrix& h, const EditStep& step) {
    const ResolvedSpan rs = resolve_span(step.span, h.rows);
    if (rs.begin >= rs.end) return;
    const std::size_t span_len = rs.end - rs.begin;
    if (step.controllers.size() != 1 && step.controllers.size() < span_len)
        throw InvalidPlan("per-position controllers do not cover the span");
    for (std::size_t t = rs.begin; t < rs.end; ++t) {
        const Vec& c =
            step.controllers.size() == 1 ? step.controllers[0] : step.controllers[t - rs.begin];
        Vec state(h.row(t), h.row(t) + h.cols);
        apply_operator(state, step.op, c);
        std::copy(state.begin(), state.end(), h.row(t));
    }
}

void check_tokens(const ModelConfig& config, const TokenIds& tokens) {
    if (tokens.empty()) throw ContextOverflow("empty token sequence");
    if (tokens.size() > config.max_context)
        throw ContextOverflow("sequence length " + std::to_string(tokens.size()) +
                              " exceeds max context " + std::to_string(config.max_context));
    for (int t : tokens)
        if (t < 0 || t >= static_cast<int>(config.vocab_size))
            throw TokenOutOfRange("token id " + std::to_string(t) + " out of range");
}

ForwardResult run_forward(const ModelBundle& model, const TokenIds& tokens,
                          const EditPlan* plan, const AdapterSet* adapters,
                          std::vector<LayerCache>* cache) {
    const ModelConfig& cfg = model.config;
    check_tokens(cfg, tokens);
    if (plan) validate_plan(cfg, *plan);
    const std::size_t t_total = tokens.size();
    const std::size_t d = cfg.d_model;
    const std::size_t n_heads = cfg.n_heads;
    const std::size_t d_head = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_head));

    ForwardResult out;
    out.hidden.layers.reserve(cfg.n_layers + 1);
    if (cache) cache->resize(cfg.n_layers);

    Matrix x(t_total, d);
    for (std::size_t t = 0; t < t_total; ++t)
        for (std::size_t j = 0; j < d; ++j)
            x(t, j) = model.tok_embedding(static_cast<std::size_t>(tokens[t]), j) +
                      model.pos_embedding(t, j);

    auto apply_layer_steps = [&](std::size_t layer) {
        if (!plan) return;
        for (const EditStep& step : plan->steps)
            if (step.layer == layer) apply_step(x, step);
    };

    apply_layer_steps(0);
    out.hidden.layers.push_back(x);

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& w = model.layers[l];
        const Adapter* ad_q = adapters ? adapters->find(l + 1, AdapterTarget::Query) : nullptr;
        const Adapter* ad_v = adapters ? adapters->find(l + 1, AdapterTarget::Value) : nullptr;
        LayerCache local;
        LayerCache& c = cache ? (*cache)[l] : local;

        c.x_in = x;
        c.xn = Matrix(t_total, d);
        for (std::size_t t = 0; t < t_total; ++t)
            rmsnorm(c.x_in.row(t), w.attn_norm_gain, cfg.norm_epsilon, d, c.xn.row(t));

        c.q = Matrix(t_total, d);
        c.k = Matrix(t_total, d);
        c.v = Matrix(t_total, d);
        if (ad_q) c.aq_x = Matrix(t_total, ad_q->a.rows);
        if (ad_v) c.av_x = Matrix(t_total, ad_v->a.rows);
        for (std::size_t t = 0; t < t_total; ++t) {
            matvec(w.wq, c.xn.row(t), c.q.row(t));
            matvec(w.wk, c.xn.row(t), c.k.row(t));
            matvec(w.wv, c.xn.row(t), c.v.row(t));
            if (ad_q) {
                matvec(ad_q->a, c.xn.row(t), c.aq_x.row(t));
                for (std::size_t i = 0; i < d; ++i) {
                    double s = 0.0;
                    for (std::size_t r = 0; r < ad_q->a.rows; ++r)
                        s += ad_q->b(i, r) * c.aq_x(t, r);
                    c.q(t, i) += s;
                }
            }
            if (ad_v) {
                matvec(ad_v->a, c.xn.row(t), c.av_x.row(t));
                for (std::size_t i = 0; i < d; ++i) {
                    double s = 0.0;
                    for (std::size_t r = 0; r < ad_v->a.rows; ++r)
                        s += ad_v->b(i, r) * c.av_x(t, r);
                    c.v(t, i) += s;
                }
            }
        }

        c.probs.assign(n_heads, Matrix(t_total, t_total));
        c.ctx = Matrix(t_total, d);
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t off = h * d_head;
            Matrix& p = c.probs[h];
            for (std::size_t t = 0; t < t_total; ++t) {
                double row_max = -std::numeric_limits<double>::infinity();
                for (std::size_t s = 0; s <= t; ++s) {
                    double score = 0.0;
                    for (std::size_t j = 0; j < d_head; ++j)
                        score += c.q(t, off + j) * c.k(s, off + j);
                    score *= scale;
                    p(t, s) = score;
                    row_max = std::max(row_max, score);
                }
                double denom = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    p(t, s) = std::exp(p(t, s) - row_max);
                    denom += p(t, s);
                }
                for (std::size_t s = 0; s <= t; ++s) {
                    p(t, s) /= denom;
                    for (std::size_t j = 0; j < d_head; ++j)
                        c.ctx(t, off + j) += p(t, s) * c.v(s, off + j);
                }
            }
        }

        c.x_mid = Matrix(t_total, d);
        Vec o(d);
        for (std::size_t t = 0; t < t_total; ++t) {
            matvec(w.wo, c.ctx.row(t), o.data());
            for (std::size_t j = 0; j < d; ++j) c.x_mid(t, j) = c.x_in(t, j) + o[j];
        }

        c.xn2 = Matrix(t_total, d);
        c.u = Matrix(t_total, 2 * cfg.d_ff);
        c.gated = Matrix(t_total, cfg.d_ff);
        Vec y(d);
        x = Matrix(t_total, d);
        for (std::size_t t = 0; t < t_total; ++t) {
            rmsnorm(c.x_mid.row(t), w.mlp_norm_gain, cfg.norm_epsilon, d, c.xn2.row(t));
            matvec(w.mlp_up, c.xn2.row(t), c.u.row(t));
            for (std::size_t i = 0; i < cfg.d_ff; ++i)
                c.gated(t, i) = silu(c.u(t, i)) * c.u(t, cfg.d_ff + i);
            matvec(w.mlp_down, c.gated.row(t), y.data());
            for (std::size_t j = 0; j < d; ++j) x(t, j) = c.x_mid(t, j) + y[j];
        }

        apply_layer_steps(l + 1);
        out.hidden.layers.push_back(x);
    }

    out.logits = Matrix(t_total, cfg.vocab_size);
    Vec fn(d);
    for (std::size_t t = 0; t < t_total; ++t) {
        rmsnorm(x.row(t), model.final_norm_gain, cfg.norm_epsilon, d, fn.data());
        for (std::size_t tok = 0; tok < cfg.vocab_size; ++tok) {
            double s = 0.0;
            const double* e = model.tok_embedding.row(tok);
            for (std::size_t j = 0; j < d; ++j) s += fn[j] * e[j];
            out.logits(t, tok) = s;
        }
    }
    return out;
}

}  // namespace

void ModelConfig::validate() const {
    if (vocab_size != 257) throw DimensionMismatch("vocab size must be 257 (256 bytes + BOS)");
    if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || max_context == 0)
        throw DimensionMismatch("model dimensions must be positive");
    if (d_model % n_heads != 0) throw DimensionMismatch("d_model must divide into heads");
    if (!(norm_epsilon > 0.0)) throw DimensionMismatch("norm epsilon must be positive");
}

HiddenStates HiddenStates::zeros_like() const {
    HiddenStates out;
    out.layers.reserve(layers.size());
    for (const Matrix& m : layers) out.layers.emplace_back(m.rows, m.cols);
    return out;
}

TokenIds tokenize(const std::string& text) {
    TokenIds out;
    out.reserve(text.size() + 1);
    out.push_back(kBosToken);
    for (unsigned char ch : text) out.push_back(static_cast<int>(ch));
    return out;
}

std::string detokenize(const TokenIds& tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (int t : tokens) {
        if (t == kBosToken) continue;
        if (t < 0 || t > 255) throw TokenOutOfRange("token id " + std::to_string(t));
        out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return out;
}

ModelBundle init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    constexpr double kStd = 0.02;
    // Residual contributions (attention out, mlp down) are shrunk so depth
    // does not blow up the stream scale.
    const double out_std = kStd / std::sqrt(2.0 * static_cast<double>(config.n_layers));

    auto fill = [&](Matrix& m, std::size_t rows, std::size_t cols, double std_dev) {
        m = Matrix(rows, cols);
        for (double& v : m.data) v = f32(std_dev * rng.next_gaussian());
    };

    ModelBundle model;
    model.config = config;
    fill(model.tok_embedding, config.vocab_size, config.d_model, kStd);
    fill(model.pos_embedding, config.max_context, config.d_model, kStd);
    model.layers.resize(config.n_layers);
    for (LayerWeights& w : model.layers) {
        w.attn_norm_gain.assign(config.d_model, 1.0);
        fill(w.wq, config.d_model, config.d_model, kStd);
        fill(w.wk, config.d_model, config.d_model, kStd);
        fill(w.wv, config.d_model, config.d_model, kStd);
        fill(w.wo, config.d_model, config.d_model, out_std);
        w.mlp_norm_gain.assign(config.d_model, 1.0);
        fill(w.mlp_up, 2 * config.d_ff, config.d_model, kStd);
        fill(w.mlp_down, config.d_model, config.d_ff, out_std);
    }
    model.final_norm_gain.assign(config.d_model, 1.0);
    return model;
}

namespace {

TensorEntry to_entry(const Matrix& m) {
    TensorEntry e;
    e.shape = {m.rows, m.cols};
    e.data.reserve(m.data.size());
    for (double v : m.data) e.data.push_back(static_cast<float>(v));
    return e;
}

TensorEntry to_entry(const Vec& v) {
    TensorEntry e;
    e.shape = {v.size()};
    e.data.reserve(v.size());
    for (double x : v) e.data.push_back(static_cast<float>(x));
    return e;
}

Matrix to_matrix(const TensorEntry& e, const std::string& name) {
    if (e.shape.size() != 2) throw ParseError("tensor '" + name + "' is not rank 2");
    Matrix m(e.shape[0], e.shape[1]);
    for (std::size_t i = 0; i < e.data.size(); ++i) m.data[i] = e.data[i];
    return m;
}

Vec to_vec(const TensorEntry& e, const std::string& name) {
    if (e.shape.size() != 1) throw ParseError("tensor '" + name + "' is not rank 1");
    return Vec(e.data.begin(), e.data.end());
}

const TensorEntry& need(const Container& c, const std::string& name) {
    auto it = c.tensors.find(name);
    if (it == c.tensors.end()) throw ParseError("missing tensor '" + name + "'");
    return it->second;
}

}  // namespace

void save_model(const ModelBundle& model, const std::string& path) {
    Container c;
    c.meta["kind"] = "model";
    c.meta["config"] = {
        {"vocab_size", model.config.vocab_size}, {"d_model", model.config.d_model},
        {"n_layers", model.config.n_layers},     {"n_heads", model.config.n_heads},
        {"d_ff", model.config.d_ff},             {"max_context", model.config.max_context},
        {"norm_epsilon", model.config.norm_epsilon},
    };
    c.tensors["embed.tokens"] = to_entry(model.tok_embedding);
    c.tensors["embed.positions"] = to_entry(model.pos_embedding);
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const LayerWeights& w = model.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        c.tensors[p + "attn_norm.gain"] = to_entry(w.attn_norm_gain);
        c.tensors[p + "attn.wq"] = to_entry(w.wq);
        c.tensors[p + "attn.wk"] = to_entry(w.wk);
        c.tensors[p + "attn.wv"] = to_entry(w.wv);
        c.tensors[p + "attn.wo"] = to_entry(w.wo);
        c.tensors[p + "mlp_norm.gain"] = to_entry(w.mlp_norm_gain);
        c.tensors[p + "mlp.up"] = to_entry(w.mlp_up);
        c.tensors[p + "mlp.down"] = to_entry(w.mlp_down);
    }
    c.tensors["final_norm.gain"] = to_entry(model.final_norm_gain);
    write_container(path, c);
}

ModelBundle load_model(const std::string& path) {
    const Container c = read_container(path);
    if (c.meta.value("kind", "") != "model") throw ParseError("not a model container: " + path);
    const auto& cfg = c.meta.at("config");
    ModelBundle model;
    model.config.vocab_size = cfg.at("vocab_size").get<std::size_t>();
    model.config.d_model = cfg.at("d_model").get<std::size_t>();
    model.config.n_layers = cfg.at("n_layers").get<std::size_t>();
    model.config.n_heads = cfg.at("n_heads").get<std::size_t>();
    model.config.d_ff = cfg.at("d_ff").get<std::size_t>();
    model.config.max_context = cfg.at("max_context").get<std::size_t>();
    model.config.norm_epsilon = cfg.at("norm_epsilon").get<double>();
    model.config.validate();

    model.tok_embedding = to_matrix(need(c, "embed.tokens"), "embed.tokens");
    model.pos_embedding = to_matrix(need(c, "embed.positions"), "embed.positions");
    model.layers.resize(model.config.n_layers);
    for (std::size_t l = 0; l < model.config.n_layers; ++l) {
        LayerWeights& w = model.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        w.attn_norm_gain = to_vec(need(c, p + "attn_norm.gain"), p + "attn_norm.gain");
        w.wq = to_matrix(need(c, p + "attn.wq"), p + "attn.wq");
        w.wk = to_matrix(need(c, p + "attn.wk"), p + "attn.wk");
        w.wv = to_matrix(need(c, p + "attn.wv"), p + "attn.wv");
        w.wo = to_matrix(need(c, p + "attn.wo"), p + "attn.wo");
        w.mlp_norm_gain = to_vec(need(c, p + "mlp_norm.gain"), p + "mlp_norm.gain");
        w.mlp_up = to_matrix(need(c, p + "mlp.up"), p + "mlp.up");
        w.mlp_down = to_matrix(need(c, p + "mlp.down"), p + "mlp.down");
    }
    model.final_norm_gain = to_vec(need(c, "final_norm.gain"), "final_norm.gain");
    return model;
}

void save_adapters(const AdapterSet& adapters, const std::string& path) {
    Container c;
    c.meta["kind"] = "adapters";
    nlohmann::json layers = nlohmann::json::array();
    for (const Adapter& ad : adapters.items)
        if (ad.target == AdapterTarget::Query) layers.push_back(ad.layer);
    c.meta["layers"] = layers;
    c.meta["rank"] = adapters.items.empty() ? 0 : adapters.items.front().a.rows;
    for (const Adapter& ad : adapters.items) {
        const std::string p = "lora." + std::to_string(ad.layer) +
                              (ad.target == AdapterTarget::Query ? ".q" : ".v");
        c.tensors[p + ".a"] = to_entry(ad.a);
        c.tensors[p + ".b"] = to_entry(ad.b);
    }
    write_container(path, c);
}

AdapterSet load_adapters(const std::string& path) {
    const Container c = read_container(path);
    if (c.meta.value("kind", "") != "adapters")
        throw ParseError("not an adapter container: " + path);
    AdapterSet set;
    for (std::size_t layer : c.meta.at("layers").get<std::vector<std::size_t>>()) {
        for (AdapterTarget target : {AdapterTarget::Query, AdapterTarget::Value}) {
            const std::string p = "lora." + std::to_string(layer) +
                                  (target == AdapterTarget::Query ? ".q" : ".v");
            Adapter ad;
            ad.layer = layer;
            ad.target = target;
            ad.a = to_matrix(need(c, p + ".a"), p + ".a");
            ad.b = to_matrix(need(c, p + ".b"), p + ".b");
            set.items.push_back(std::move(ad));
        }
    }
    return set;
}

AdapterSet AdapterSet::zeros(const ModelConfig& config, const std::vector<std::size_t>& layers,
                             std::size_t rank) {
    if (rank == 0) throw DimensionMismatch("adapter rank must be positive");
    AdapterSet set;
    for (std::size_t layer : layers) {
        if (layer < 1 || layer > config.n_layers)
            throw InvalidLayer("adapter layer " + std::to_string(layer) + " out of range");
        for (AdapterTarget target : {AdapterTarget::Query, AdapterTarget::Value}) {
            Adapter ad;
            ad.layer = layer;
            ad.target = target;
            ad.a = Matrix(rank, config.d_model);
            ad.b = Matrix(config.d_model, rank);
            set.items.push_back(std::move(ad));
        }
    }
    return set;
}

AdapterSet AdapterSet::lora_init(const ModelConfig& config,
                                 const std::vector<std::size_t>& layers, std::size_t rank,
                                 std::uint64_t seed) {
    AdapterSet set = zeros(config, layers, rank);
    Rng rng(derive_seed(seed, 0x10ad));
    for (Adapter& ad : set.items)
        for (double& v : ad.a.data) v = f32(0.02 * rng.next_gaussian());
    return set;
}

const Adapter* AdapterSet::find(std::size_t layer, AdapterTarget target) const {
    for (const Adapter& ad : items)
        if (ad.layer == layer && ad.target == target) return &ad;
    return nullptr;
}

Adapter* AdapterSet::find(std::size_t layer, AdapterTarget target) {
    for (Adapter& ad : items)
        if (ad.layer == layer && ad.target == target) return &ad;
    return nullptr;
}

AdapterSet AdapterSet::zeros_like() const {
    AdapterSet out;
    out.items.reserve(items.size());
    for (const Adapter& ad : items) {
        Adapter z;
        z.layer = ad.layer;
        z.target = ad.target;
        z.a = Matrix(ad.a.rows, ad.a.cols);
        z.b = Matrix(ad.b.rows, ad.b.cols);
        out.items.push_back(std::move(z));
    }
    return out;
}

void apply_operator(Vec& state, const Operator& op, const Vec& controller) {
    if (state.size() != controller.size())
        throw DimensionMismatch("operator controller dimension mismatch");
    switch (op.type) {
        case OpType::LinearCombination: {
            const double c = static_cast<double>(op.sign) * op.coefficient;
            for (std::size_t j = 0; j < state.size(); ++j) state[j] += c * controller[j];
            return;
        }
        case OpType::Piecewise: {
            double align = 0.0;
            for (std::size_t j = 0; j < state.size(); ++j) align += state[j] * controller[j];
            if (norm(controller) == 0.0) throw ZeroVector("piecewise: zero controller");
            const double c = (align >= 0.0 ? 1.0 : -1.0) * op.coefficient;
            for (std::size_t j = 0; j < state.size(); ++j) state[j] += c * controller[j];
            return;
        }
        case OpType::Projection: {
            double vv = 0.0;
            double xv = 0.0;
            for (std::size_t j = 0; j < state.size(); ++j) {
                vv += controller[j] * controller[j];
                xv += state[j] * controller[j];
            }
            if (vv == 0.0) throw ZeroVector("projection: zero controller");
            const double c = xv / vv;
            for (std::size_t j = 0; j < state.size(); ++j) state[j] -= c * controller[j];
            return;
        }
    }
}

void validate_plan(const ModelConfig& config, const EditPlan& plan) {
    for (const EditStep& step : plan.steps) {
        if (step.layer > config.n_layers)
            throw InvalidPlan("edit step layer " + std::to_string(step.layer) +
                              " beyond model depth");
        if (step.controllers.empty()) throw InvalidPlan("edit step with no controller");
        for (const Vec& c : step.controllers) {
            if (c.size() != config.d_model)
                throw InvalidPlan("controller dimension does not match the model");
            check_finite(c, "edit controller");
        }
        if (step.span.kind == SpanKind::Range && step.span.begin > step.span.end)
            throw InvalidPlan("edit span is inverted");
        if (step.op.type != OpType::LinearCombination)
            for (const Vec& c : step.controllers)
                if (norm(c) == 0.0)
                    throw ZeroVector("zero controller for a sign-dependent operator");
    }
}

ForwardResult forward_capture(const ModelBundle& model, const TokenIds& tokens,
                              const AdapterSet* adapters) {
    return run_forward(model, tokens, nullptr, adapters, nullptr);
}

ForwardResult forward_with_edits(const ModelBundle& model, const TokenIds& tokens,
                                 const EditPlan& plan, const AdapterSet* adapters) {
    return run_forward(model, tokens, &plan, adapters, nullptr);
}

TokenIds generate(const ModelBundle& model, const TokenIds& prompt, std::size_t n_new,
                  const EditPlan* plan, const AdapterSet* adapters) {
    check_tokens(model.config, prompt);
    if (prompt.size() + n_new > model.config.max_context)
        throw ContextOverflow("generation would exceed max context");

    TokenIds seq = prompt;
    TokenIds fresh;
    fresh.reserve(n_new);
    for (std::size_t i = 0; i < n_new; ++i) {
        const ForwardResult fwd = run_forward(model, seq, plan, adapters, nullptr);
        const double* row = fwd.logits.row(fwd.logits.rows - 1);
        int best = 0;
        for (std::size_t tok = 1; tok < model.config.vocab_size; ++tok)
            if (row[tok] > row[best]) best = static_cast<int>(tok);
        seq.push_back(best);
        fresh.push_back(best);
    }
    return fresh;
}

double logprob_continuation(const ModelBundle& model, const std::string& prompt,
                            const std::string& continuation, const AdapterSet* adapters) {
    const TokenIds prompt_ids = tokenize(prompt);
    TokenIds full = prompt_ids;
    for (unsigned char ch : continuation) full.push_back(static_cast<int>(ch));
    if (continuation.empty()) return 0.0;

    const ForwardResult fwd = forward_capture(model, full, adapters);
    double total = 0.0;
    for (std::size_t pos = prompt_ids.size(); pos < full.size(); ++pos) {
        const double* row = fwd.logits.row(pos - 1);
        const double m = *std::max_element(row, row + model.config.vocab_size);
        double denom = 0.0;
        for (std::size_t tok = 0; tok < model.config.vocab_size; ++tok)
            denom += std::exp(row[tok] - m);
        total += row[full[pos]] - m - std::log(denom);
    }
    return total;
}

double grad_adapters(const ModelBundle& model, const AdapterSet& adapters,
                     const TokenIds& tokens, const HiddenLossFn& loss, AdapterSet& grads) {
    const ModelConfig& cfg = model.config;
    std::vector<LayerCache> cache;
    const ForwardResult fwd = run_forward(model, tokens, nullptr, &adapters, &cache);

    HiddenStates seeds = fwd.hidden.zeros_like();
    const double value = loss(fwd.hidden, seeds);
    if (!std::isfinite(value)) throw NonFiniteLoss("loss closure returned a non-finite value");

    grads = adapters.zeros_like();

    const std::size_t t_total = tokens.size();
    const std::size_t d = cfg.d_model;
    const std::size_t n_heads = cfg.n_heads;
    const std::size_t d_head = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_head));

    // dx holds d(loss)/d(residual) at the current depth, walking top down.
    Matrix dx = seeds.layers[cfg.n_layers];
    for (std::size_t l = cfg.n_layers; l-- > 0;) {
        const LayerWeights& w = model.layers[l];
        const LayerCache& c = cache[l];
        const Adapter* ad_q = adapters.find(l + 1, AdapterTarget::Query);
        const Adapter* ad_v = adapters.find(l + 1, AdapterTarget::Value);
        Adapter* gr_q = ad_q ? grads.find(l + 1, AdapterTarget::Query) : nullptr;
        Adapter* gr_v = ad_v ? grads.find(l + 1, AdapterTarget::Value) : nullptr;

        // MLP: x_out = x_mid + down(silu(gate) * up)
        Matrix dx_mid = dx;
        Vec dgated(cfg.d_ff);
        Vec du(2 * cfg.d_ff);
        Vec dxn2(d);
        for (std::size_t t = 0; t < t_total; ++t) {
            for (std::size_t i = 0; i < cfg.d_ff; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < d; ++j) s += w.mlp_down(j, i) * dx(t, j);
                dgated[i] = s;
            }
            for (std::size_t i = 0; i < cfg.d_ff; ++i) {
                const double g = c.u(t, i);
                const double up = c.u(t, cfg.d_ff + i);
                du[i] = dgated[i] * up * silu_grad(g);
                du[cfg.d_ff + i] = dgated[i] * silu(g);
            }
            std::fill(dxn2.begin(), dxn2.end(), 0.0);
            matvec_t_add(w.mlp_up, du.data(), dxn2.data());
            rmsnorm_backward_add(c.x_mid.row(t), w.mlp_norm_gain, cfg.norm_epsilon, d,
                                 dxn2.data(), dx_mid.row(t));
        }

        // Attention: x_mid = x_in + Wo ctx
        Matrix dctx(t_total, d);
        for (std::size_t t = 0; t < t_total; ++t)
            matvec_t_add(w.wo, dx_mid.row(t), dctx.row(t));

        Matrix dq(t_total, d), dk(t_total, d), dv(t_total, d);
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t off = h * d_head;
            const Matrix& p = c.probs[h];
            for (std::size_t t = 0; t < t_total; ++t) {
                // dv and raw attention-weight grads
                Vec dp(t + 1, 0.0);
                for (std::size_t s = 0; s <= t; ++s) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < d_head; ++j) {
                        acc += dctx(t, off + j) * c.v(s, off + j);
                        dv(s, off + j) += p(t, s) * dctx(t, off + j);
                    }
                    dp[s] = acc;
                }
                // softmax jacobian
                double inner = 0.0;
                for (std::size_t s = 0; s <= t; ++s) inner += p(t, s) * dp[s];
                for (std::size_t s = 0; s <= t; ++s) {
                    const double dscore = p(t, s) * (dp[s] - inner) * scale;
                    for (std::size_t j = 0; j < d_head; ++j) {
                        dq(t, off + j) += dscore * c.k(s, off + j);
                        dk(s, off + j) += dscore * c.q(t, off + j);
                    }
                }
            }
        }

        Matrix dxn(t_total, d);
        for (std::size_t t = 0; t < t_total; ++t) {
            matvec_t_add(w.wq, dq.row(t), dxn.row(t));
            matvec_t_add(w.wk, dk.row(t), dxn.row(t));
            matvec_t_add(w.wv, dv.row(t), dxn.row(t));
            if (ad_q) {
                const std::size_t rank = ad_q->a.rows;
                Vec bt_dq(rank, 0.0);
                for (std::size_t r = 0; r < rank; ++r)
                    for (std::size_t i = 0; i < d; ++i) bt_dq[r] += ad_q->b(i, r) * dq(t, i);
                for (std::size_t r = 0; r < rank; ++r)
                    for (std::size_t j = 0; j < d; ++j) {
                        gr_q->a(r, j) += bt_dq[r] * c.xn(t, j);
                        dxn(t, j) += ad_q->a(r, j) * bt_dq[r];
                    }
                for (std::size_t i = 0; i < d; ++i)
                    for (std::size_t r = 0; r < rank; ++r)
                        gr_q->b(i, r) += dq(t, i) * c.aq_x(t, r);
            }
            if (ad_v) {
                const std::size_t rank = ad_v->a.rows;
                Vec bt_dv(rank, 0.0);
                for (std::size_t r = 0; r < rank; ++r)
                    for (std::size_t i = 0; i < d; ++i) bt_dv[r] += ad_v->b(i, r) * dv(t, i);
                for (std::size_t r = 0; r < rank; ++r)
                    for (std::size_t j = 0; j < d; ++j) {
                        gr_v->a(r, j) += bt_dv[r] * c.xn(t, j);
                        dxn(t, j) += ad_v->a(r, j) * bt_dv[r];
                    }
                for (std::size_t i = 0; i < d; ++i)
                    for (std::size_t r = 0; r < rank; ++r)
                        gr_v->b(i, r) += dv(t, i) * c.av_x(t, r);
            }
        }

        Matrix dx_in = dx_mid;
        for (std::size_t t = 0; t < t_total; ++t)
            rmsnorm_backward_add(c.x_in.row(t), w.attn_norm_gain, cfg.norm_epsilon, d,
                                 dxn.row(t), dx_in.row(t));

        dx = std::move(dx_in);
        for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += seeds.layers[l].data[i];
    }
    return value;
}

ModelBundle merge_adapters(const ModelBundle& model, const AdapterSet& adapters) {
    ModelBundle merged = model;
    for (const Adapter& ad : adapters.items) {
        if (ad.layer < 1 || ad.layer > model.config.n_layers)
            throw InvalidLayer("adapter layer out of range");
        if (ad.a.cols != model.config.d_model || ad.b.rows != model.config.d_model ||
            ad.a.rows != ad.b.cols)
            throw DimensionMismatch("adapter shapes do not match the model");
        Matrix& w = ad.target == AdapterTarget::Query ? merged.layers[ad.layer - 1].wq
                                                      : merged.layers[ad.layer - 1].wv;
        for (std::size_t i = 0; i < w.rows; ++i)
            for (std::size_t j = 0; j < w.cols; ++j) {
                double s = 0.0;
                for (std::size_t r = 0; r < ad.a.rows; ++r) s += ad.b(i, r) * ad.a(r, j);
                w(i, j) += s;
            }
    }
    return merged;
}

}  // namespace repe
