#include "repe/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>

#include "repe/rng.hpp"

namespace repe {

void Matrix::push_row(const Vec& v) {
    if (rows == 0 && cols == 0) cols = v.size();
    if (v.size() != cols) throw DimensionMismatch("row length does not match matrix width");
    data.insert(data.end(), v.begin(), v.end());
    ++rows;
}

Matrix Matrix::from_rows(const std::vector<Vec>& rows) {
    Matrix m;
    for (const auto& r : rows) m.push_row(r);
    check_finite(m, "matrix rows");
    return m;
}

void check_finite(const Vec& v, const char* what) {
    for (double x : v)
        if (!std::isfinite(x)) throw NonFiniteInput(std::string("non-finite value in ") + what);
}

void check_finite(const Matrix& m, const char* what) {
    for (double x : m.data)
        if (!std::isfinite(x)) throw NonFiniteInput(std::string("non-finite value in ") + what);
}

double dot(const Vec& a, const Vec& b) {
    if (a.size() != b.size()) throw DimensionMismatch("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(const Vec& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

Vec normalized(const Vec& v) {
    const double n = norm(v);
    if (n == 0.0) throw ZeroVector("cannot normalize a zero vector");
    Vec out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
    return out;
}

double cosine(const Vec& a, const Vec& b) {
    const double na = norm(a);
    const double nb = norm(b);
    if (na == 0.0 || nb == 0.0) throw ZeroVector("cosine of a zero vector");
    const double c = dot(a, b) / (na * nb);
    return std::clamp(c, -1.0, 1.0);
}

Vec softmax(const Vec& logits) {
    if (logits.empty()) throw DimensionMismatch("softmax of empty vector");
    check_finite(logits, "softmax input");
    const double m = *std::max_element(logits.begin(), logits.end());
    Vec out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - m);
        sum += out[i];
    }
    for (double& x : out) x /= sum;
    return out;
}

StandardizationStats standardize_fit(const Matrix& x) {
    if (x.rows == 0 || x.cols == 0) throw DimensionMismatch("standardize_fit: empty sample");
    check_finite(x, "standardize_fit input");
    StandardizationStats st;
    st.mean.assign(x.cols, 0.0);
    st.scale.assign(x.cols, 0.0);
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t j = 0; j < x.cols; ++j) st.mean[j] += x(i, j);
    for (double& m : st.mean) m /= static_cast<double>(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t j = 0; j < x.cols; ++j) {
            const double d = x(i, j) - st.mean[j];
            st.scale[j] += d * d;
        }
    for (double& s : st.scale) {
        s = std::sqrt(s / static_cast<double>(x.rows));
        if (s == 0.0) s = 1.0;
    }
    return st;
}

Vec standardize_apply(const StandardizationStats& stats, const Vec& v) {
    if (v.size() != stats.mean.size() || stats.mean.size() != stats.scale.size())
        throw DimensionMismatch("standardize_apply: size mismatch");
    Vec out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - stats.mean[i]) / stats.scale[i];
    return out;
}

namespace {

// Flip so the first nonzero component is positive. PCA and k-means directions
// have arbitrary sign; this pins one deterministically.
void canonical_orientation(Vec& v) {
    for (double x : v) {
        if (x == 0.0) continue;
        if (x < 0.0)
            for (double& y : v) y = -y;
        return;
    }
}

double frobenius(const Matrix& a) {
    double s = 0.0;
    for (double x : a.data) s += x * x;
    return std::sqrt(s);
}

Vec mean_row(const Matrix& x) {
    Vec m(x.cols, 0.0);
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t j = 0; j < x.cols; ++j) m[j] += x(i, j);
    for (double& v : m) v /= static_cast<double>(x.rows);
    return m;
}

// ZeroVariance guard for difference-based directions: treat the difference as
// zero when it is negligible against the operand scale, which covers means of
// identical samples that differ only by accumulation rounding.
Vec difference_direction(const Vec& a, const Vec& b, const char* what) {
    if (a.size() != b.size()) throw DimensionMismatch(std::string(what) + ": length mismatch");
    Vec diff(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) diff[i] = a[i] - b[i];
    const double scale = std::max(1.0, std::max(norm(a), norm(b)));
    if (norm(diff) <= 1e-12 * scale)
        throw ZeroVariance(std::string(what) + ": operands coincide");
    return normalized(diff);
}

}  // namespace

EigenResult jacobi_eigen_symmetric(const Matrix& a, double tol, int max_sweeps) {
    if (a.rows != a.cols) throw DimensionMismatch("jacobi: matrix not square");
    const std::size_t n = a.rows;
    Matrix m = a;
    Matrix v(n, n);
    for (std::size_t i = 0; i < n; ++i) v(i, i) = 1.0;

    const double stop = tol * std::max(1.0, frobenius(a));
    int sweep = 0;
    for (; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += 2.0 * m(p, q) * m(p, q);
        if (std::sqrt(off) <= stop) break;

        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = m(p, q);
                if (apq == 0.0) continue;
                const double app = m(p, p);
                const double aqq = m(q, q);
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;

                for (std::size_t k = 0; k < n; ++k) {
                    const double mkp = m(k, p);
                    const double mkq = m(k, q);
                    m(k, p) = c * mkp - s * mkq;
                    m(k, q) = s * mkp + c * mkq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double mpk = m(p, k);
                    const double mqk = m(q, k);
                    m(p, k) = c * mpk - s * mqk;
                    m(q, k) = s * mpk + c * mqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p);
                    const double vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return m(i, i) > m(j, j); });

    EigenResult res;
    res.sweeps = sweep;
    res.values.resize(n);
    res.vectors = Matrix(n, n);
    for (std::size_t r = 0; r < n; ++r) {
        res.values[r] = m(order[r], order[r]);
        for (std::size_t k = 0; k < n; ++k) res.vectors(r, k) = v(k, order[r]);
    }
    return res;
}

FitReport pca_first_component(const Matrix& x) {
    if (x.rows < 2 || x.cols == 0) throw DimensionMismatch("pca: need at least 2 rows");
    check_finite(x, "pca input");
    const std::size_t n = x.rows;
    const std::size_t d = x.cols;

    const Vec mu = mean_row(x);
    Matrix cov(d, d);
    double msq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            const double cj = x(i, j) - mu[j];
            msq += x(i, j) * x(i, j);
            for (std::size_t k = j; k < d; ++k) cov(j, k) += cj * (x(i, k) - mu[k]);
        }
    }
    for (std::size_t j = 0; j < d; ++j)
        for (std::size_t k = j; k < d; ++k) {
            cov(j, k) /= static_cast<double>(n);
            cov(k, j) = cov(j, k);
        }

    double trace = 0.0;
    for (std::size_t j = 0; j < d; ++j) trace += cov(j, j);
    msq /= static_cast<double>(n);
    if (trace <= 1e-18 * std::max(1.0, msq)) throw ZeroVariance("pca: all rows identical");

    const EigenResult eig = jacobi_eigen_symmetric(cov);

    FitReport rep;
    rep.iterations_used = eig.sweeps;
    rep.direction = normalized(eig.vectors.row_vec(0));
    canonical_orientation(rep.direction);
    const std::size_t n_components = std::min<std::size_t>({10, d, n - 1});
    rep.explained_variance_ratio.reserve(n_components);
    for (std::size_t i = 0; i < n_components; ++i)
        rep.explained_variance_ratio.push_back(std::max(0.0, eig.values[i]) / trace);
    return rep;
}

FitReport kmeans2_direction(const Matrix& x, std::uint64_t seed) {
    if (x.rows < 2 || x.cols == 0) throw DimensionMismatch("kmeans: need at least 2 rows");
    check_finite(x, "kmeans input");
    const std::size_t n = x.rows;
    const std::size_t d = x.cols;
    constexpr int kRestarts = 10;
    constexpr int kMaxIters = 100;

    auto sqdist = [&](const double* a, const double* b) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double diff = a[j] - b[j];
            s += diff * diff;
        }
        return s;
    };

    double best_inertia = std::numeric_limits<double>::infinity();
    Vec best_ca, best_cb;
    int best_iters = 0;

    for (int restart = 0; restart < kRestarts; ++restart) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(restart)));

        // k-means++ seeding: first center uniform, second proportional to
        // squared distance from the first.
        Vec ca = x.row_vec(rng.next_below(n));
        Vec weights(n);
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            weights[i] = sqdist(x.row(i), ca.data());
            total += weights[i];
        }
        Vec cb;
        if (total == 0.0) {
            cb = ca;
        } else {
            double pick = rng.next_double() * total;
            std::size_t chosen = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                pick -= weights[i];
                if (pick <= 0.0) {
                    chosen = i;
                    break;
                }
            }
            cb = x.row_vec(chosen);
        }

        std::vector<int> assign(n, -1);
        int iters = 0;
        for (; iters < kMaxIters; ++iters) {
            bool changed = false;
            for (std::size_t i = 0; i < n; ++i) {
                const int a = sqdist(x.row(i), ca.data()) <= sqdist(x.row(i), cb.data()) ? 0 : 1;
                if (a != assign[i]) {
                    assign[i] = a;
                    changed = true;
                }
            }
            if (!changed) break;

            Vec sum_a(d, 0.0), sum_b(d, 0.0);
            std::size_t na = 0, nb = 0;
            for (std::size_t i = 0; i < n; ++i) {
                const double* r = x.row(i);
                if (assign[i] == 0) {
                    ++na;
                    for (std::size_t j = 0; j < d; ++j) sum_a[j] += r[j];
                } else {
                    ++nb;
                    for (std::size_t j = 0; j < d; ++j) sum_b[j] += r[j];
                }
            }
            // Empty-cluster repair: hand the point farthest from the
            // surviving centroid to the empty cluster.
            if (na == 0 || nb == 0) {
                const Vec& full = na == 0 ? sum_b : sum_a;
                Vec centroid(d);
                for (std::size_t j = 0; j < d; ++j)
                    centroid[j] = full[j] / static_cast<double>(na == 0 ? nb : na);
                std::size_t far_i = 0;
                double far_d = -1.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double dist = sqdist(x.row(i), centroid.data());
                    if (dist > far_d) {
                        far_d = dist;
                        far_i = i;
                    }
                }
                assign[far_i] = na == 0 ? 0 : 1;
                sum_a.assign(d, 0.0);
                sum_b.assign(d, 0.0);
                na = nb = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double* r = x.row(i);
                    if (assign[i] == 0) {
                        ++na;
                        for (std::size_t j = 0; j < d; ++j) sum_a[j] += r[j];
                    } else {
                        ++nb;
                        for (std::size_t j = 0; j < d; ++j) sum_b[j] += r[j];
                    }
                }
            }
            for (std::size_t j = 0; j < d; ++j) {
                ca[j] = sum_a[j] / static_cast<double>(na);
                cb[j] = sum_b[j] / static_cast<double>(nb);
            }
        }

        double inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            inertia += sqdist(x.row(i), assign[i] == 0 ? ca.data() : cb.data());
        if (inertia < best_inertia) {
            best_inertia = inertia;
            best_ca = ca;
            best_cb = cb;
            best_iters = iters;
        }
    }

    FitReport rep;
    rep.iterations_used = best_iters;
    rep.direction = difference_direction(best_ca, best_cb, "kmeans");
    canonical_orientation(rep.direction);
    return rep;
}

FitReport mean_difference(const Matrix& x_high, const Matrix& x_low) {
    if (x_high.rows == 0 || x_low.rows == 0)
        throw DimensionMismatch("mean_difference: empty class");
    if (x_high.cols != x_low.cols) throw DimensionMismatch("mean_difference: width mismatch");
    check_finite(x_high, "mean_difference high");
    check_finite(x_low, "mean_difference low");
    FitReport rep;
    rep.direction = difference_direction(mean_row(x_high), mean_row(x_low), "mean_difference");
    return rep;
}

FitReport logistic_direction(const Matrix& x, const std::vector<int>& y) {
    if (x.rows == 0 || x.cols == 0) throw DimensionMismatch("logistic: empty sample");
    if (y.size() != x.rows) throw DimensionMismatch("logistic: label count mismatch");
    check_finite(x, "logistic input");
    bool has0 = false, has1 = false;
    for (int label : y) {
        if (label == 0) has0 = true;
        else if (label == 1) has1 = true;
        else throw DegenerateLabels("logistic: labels must be 0 or 1");
    }
    if (!has0 || !has1) throw DegenerateLabels("logistic: a single class present");

    constexpr double kLambda = 1e-2;
    constexpr double kLr = 0.1;
    constexpr int kIters = 500;
    const std::size_t n = x.rows;
    const std::size_t d = x.cols;
    const double inv_n = 1.0 / static_cast<double>(n);

    Vec w(d, 0.0);
    double bias = 0.0;
    for (int it = 0; it < kIters; ++it) {
        Vec gw(d, 0.0);
        double gb = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double* r = x.row(i);
            double z = bias;
            for (std::size_t j = 0; j < d; ++j) z += w[j] * r[j];
            const double p = 1.0 / (1.0 + std::exp(-z));
            const double err = p - static_cast<double>(y[i]);
            for (std::size_t j = 0; j < d; ++j) gw[j] += err * r[j];
            gb += err;
        }
        for (std::size_t j = 0; j < d; ++j) w[j] -= kLr * (gw[j] * inv_n + kLambda * w[j]);
        bias -= kLr * gb * inv_n;
    }

    const double wn = norm(w);
    if (wn == 0.0) throw ZeroVariance("logistic: zero weight vector after training");
    FitReport rep;
    rep.iterations_used = kIters;
    rep.direction.resize(d);
    for (std::size_t j = 0; j < d; ++j) rep.direction[j] = w[j] / wn;
    return rep;
}

FitReport prompt_difference(const Vec& a, const Vec& b) {
    check_finite(a, "prompt_difference a");
    check_finite(b, "prompt_difference b");
    FitReport rep;
    rep.direction = difference_direction(a, b, "prompt_difference");
    return rep;
}

}  // namespace repe
