#pragma once

#include "uniret/common.hpp"

#include <functional>
#include <utility>
#include <vector>

namespace uniret {

// Reverse-mode autodiff over Eigen matrices.
//
// Nodes are referenced by integer id — the node vector reallocates as it
// grows, so backward closures capture ids, never references. A node's
// backward closure reads its own accumulated gradient and scatters into its
// inputs' gradients; running the closures in reverse creation order is a
// valid topological sweep because inputs always precede outputs.
template <typename S>
class Tape {
public:
    using Id = int;

    struct Node {
        Mat<S> value;
        Mat<S> grad;  // empty until first accumulation
        std::function<void(Tape&)> back;
        bool needs_grad = false;
    };

    explicit Tape(size_t reserve_nodes = 256) { nodes_.reserve(reserve_nodes); }

    int size() const { return static_cast<int>(nodes_.size()); }

    const Mat<S>& value(Id id) const { return nodes_[static_cast<size_t>(id)].value; }

    bool needs_grad(Id id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

    // Gradient of a node; zero-sized if nothing has been accumulated.
    const Mat<S>& grad(Id id) const { return nodes_[static_cast<size_t>(id)].grad; }

    // Accumulates `g` into a node's gradient (used to seed backward).
    void seed(Id id, const Mat<S>& g) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (g.rows() != n.value.rows() || g.cols() != n.value.cols())
            throw std::invalid_argument("seed gradient shape mismatch");
        accumulate(id, g);
    }

    // Runs the reverse sweep over all nodes. Gradients must be seeded first.
    void backward() {
        for (int i = size() - 1; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.back && n.grad.size() != 0) n.back(*this);
        }
    }

    // Seeds a 1x1 scalar root with 1 and sweeps.
    void backward_scalar(Id root) {
        if (value(root).size() != 1) throw std::invalid_argument("backward root must be 1x1");
        seed(root, Mat<S>::Ones(1, 1));
        backward();
    }

    // ---- leaves ----

    Id constant(Mat<S> v) { return push(std::move(v), false, nullptr); }

    Id param(Mat<S> v) { return push(std::move(v), true, nullptr); }

    // ---- structural ops ----

    Id gather_rows(Id src, std::vector<int> rows) {
        const Mat<S>& x = value(src);
        Mat<S> out(static_cast<Eigen::Index>(rows.size()), x.cols());
        for (size_t r = 0; r < rows.size(); ++r) {
            if (rows[r] < 0 || rows[r] >= x.rows())
                throw std::out_of_range("gather_rows index out of range");
            out.row(static_cast<Eigen::Index>(r)) = x.row(rows[r]);
        }
        return unary(std::move(out), src, [src, rows = std::move(rows)](Tape& t, const Mat<S>& g) {
            Mat<S>& gx = t.grad_buffer(src);
            for (size_t r = 0; r < rows.size(); ++r)
                gx.row(rows[r]) += g.row(static_cast<Eigen::Index>(r));
        });
    }

    Id slice_cols(Id src, int c0, int n) {
        const Mat<S>& x = value(src);
        if (c0 < 0 || n < 1 || c0 + n > x.cols()) throw std::invalid_argument("bad column slice");
        return unary(x.middleCols(c0, n), src, [src, c0, n](Tape& t, const Mat<S>& g) {
            t.grad_buffer(src).middleCols(c0, n) += g;
        });
    }

    Id concat_cols(const std::vector<Id>& parts) {
        if (parts.empty()) throw std::invalid_argument("concat_cols needs inputs");
        Eigen::Index rows = value(parts[0]).rows(), cols = 0;
        for (Id p : parts) {
            if (value(p).rows() != rows) throw std::invalid_argument("concat_cols row mismatch");
            cols += value(p).cols();
        }
        Mat<S> out(rows, cols);
        Eigen::Index c = 0;
        bool ng = false;
        for (Id p : parts) {
            out.middleCols(c, value(p).cols()) = value(p);
            c += value(p).cols();
            ng = ng || needs_grad(p);
        }
        return push(std::move(out), ng, [parts](Tape& t, Id self) {
            const Mat<S>& g = t.grad(self);
            Eigen::Index c = 0;
            for (Id p : parts) {
                const Eigen::Index w = t.value(p).cols();
                if (t.needs_grad(p)) t.grad_buffer(p) += g.middleCols(c, w);
                c += w;
            }
        });
    }

    Id stack_rows(const std::vector<Id>& rows) {
        if (rows.empty()) throw std::invalid_argument("stack_rows needs inputs");
        const Eigen::Index d = value(rows[0]).cols();
        Mat<S> out(static_cast<Eigen::Index>(rows.size()), d);
        bool ng = false;
        for (size_t r = 0; r < rows.size(); ++r) {
            if (value(rows[r]).rows() != 1 || value(rows[r]).cols() != d)
                throw std::invalid_argument("stack_rows expects 1xd rows");
            out.row(static_cast<Eigen::Index>(r)) = value(rows[r]);
            ng = ng || needs_grad(rows[r]);
        }
        return push(std::move(out), ng, [rows](Tape& t, Id self) {
            const Mat<S>& g = t.grad(self);
            for (size_t r = 0; r < rows.size(); ++r)
                if (t.needs_grad(rows[r]))
                    t.grad_buffer(rows[r]) += g.row(static_cast<Eigen::Index>(r));
        });
    }

    Id transpose(Id a) {
        return unary(value(a).transpose(), a,
                     [a](Tape& t, const Mat<S>& g) { t.grad_buffer(a) += g.transpose(); });
    }

    // ---- arithmetic ----

    Id add(Id a, Id b) {
        check_same_shape(a, b, "add");
        return binary(value(a) + value(b), a, b,
                      [a](Tape& t, const Mat<S>& g) { t.grad_buffer(a) += g; },
                      [b](Tape& t, const Mat<S>& g) { t.grad_buffer(b) += g; });
    }

    Id sub(Id a, Id b) {
        check_same_shape(a, b, "sub");
        return binary(value(a) - value(b), a, b,
                      [a](Tape& t, const Mat<S>& g) { t.grad_buffer(a) += g; },
                      [b](Tape& t, const Mat<S>& g) { t.grad_buffer(b) -= g; });
    }

    Id scale(Id a, S c) {
        return unary(value(a) * c, a,
                     [a, c](Tape& t, const Mat<S>& g) { t.grad_buffer(a) += g * c; });
    }

    Id matmul(Id a, Id b) {
        if (value(a).cols() != value(b).rows()) throw std::invalid_argument("matmul shape mismatch");
        return binary(value(a) * value(b), a, b,
                      [a, b](Tape& t, const Mat<S>& g) {
                          t.grad_buffer(a).noalias() += g * t.value(b).transpose();
                      },
                      [a, b](Tape& t, const Mat<S>& g) {
                          t.grad_buffer(b).noalias() += t.value(a).transpose() * g;
                      });
    }

    // a * b^T
    Id matmul_nt(Id a, Id b) {
        if (value(a).cols() != value(b).cols())
            throw std::invalid_argument("matmul_nt shape mismatch");
        return binary(value(a) * value(b).transpose(), a, b,
                      [a, b](Tape& t, const Mat<S>& g) {
                          t.grad_buffer(a).noalias() += g * t.value(b);
                      },
                      [a, b](Tape& t, const Mat<S>& g) {
                          t.grad_buffer(b).noalias() += g.transpose() * t.value(a);
                      });
    }

    // x*W + broadcast bias (1 x out)
    Id linear(Id x, Id w, Id b) {
        if (value(x).cols() != value(w).rows() || value(b).rows() != 1 ||
            value(b).cols() != value(w).cols())
            throw std::invalid_argument("linear shape mismatch");
        Mat<S> out = value(x) * value(w);
        out.rowwise() += value(b).row(0);
        const bool ng = needs_grad(x) || needs_grad(w) || needs_grad(b);
        return push(std::move(out), ng, [x, w, b](Tape& t, Id self) {
            const Mat<S>& g = t.grad(self);
            if (t.needs_grad(x)) t.grad_buffer(x).noalias() += g * t.value(w).transpose();
            if (t.needs_grad(w)) t.grad_buffer(w).noalias() += t.value(x).transpose() * g;
            if (t.needs_grad(b)) t.grad_buffer(b) += g.colwise().sum();
        });
    }

    // ---- nonlinearities ----

    // Row-wise layer norm with scale (1 + gain) and bias; gain/bias are 1 x d.
    Id layer_norm(Id x, Id gain, Id bias) {
        const Mat<S>& xv = value(x);
        const Eigen::Index d = xv.cols();
        if (value(gain).rows() != 1 || value(gain).cols() != d || value(bias).rows() != 1 ||
            value(bias).cols() != d)
            throw std::invalid_argument("layer_norm shape mismatch");
        const S eps = static_cast<S>(1e-5);
        Mat<S> xhat(xv.rows(), d);
        Mat<S> inv_std(xv.rows(), 1);
        for (Eigen::Index r = 0; r < xv.rows(); ++r) {
            const S mu = xv.row(r).mean();
            const S var = (xv.row(r).array() - mu).square().mean();
            const S is = S(1) / std::sqrt(var + eps);
            inv_std(r, 0) = is;
            xhat.row(r) = (xv.row(r).array() - mu) * is;
        }
        Mat<S> scale_row = value(gain);
        scale_row.array() += S(1);
        Mat<S> out = xhat.array().rowwise() * scale_row.row(0).array();
        out.rowwise() += value(bias).row(0);
        const bool ng = needs_grad(x) || needs_grad(gain) || needs_grad(bias);
        return push(std::move(out), ng,
                    [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std),
                     scale_row = std::move(scale_row)](Tape& t, Id self) {
                        const Mat<S>& g = t.grad(self);
                        if (t.needs_grad(gain))
                            t.grad_buffer(gain) += (g.array() * xhat.array()).colwise().sum().matrix();
                        if (t.needs_grad(bias)) t.grad_buffer(bias) += g.colwise().sum();
                        if (!t.needs_grad(x)) return;
                        Mat<S>& gx = t.grad_buffer(x);
                        for (Eigen::Index r = 0; r < g.rows(); ++r) {
                            Eigen::Array<S, 1, Eigen::Dynamic> dxh =
                                g.row(r).array() * scale_row.row(0).array();
                            const S m1 = dxh.mean();
                            const S m2 = (dxh * xhat.row(r).array()).mean();
                            gx.row(r).array() +=
                                inv_std(r, 0) * (dxh - m1 - xhat.row(r).array() * m2);
                        }
                    });
    }

    // GELU, tanh approximation (smooth everywhere, so finite differences apply).
    Id gelu(Id x) {
        const Mat<S>& xv = value(x);
        const S k = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
        const S c = static_cast<S>(0.044715);
        Mat<S> out(xv.rows(), xv.cols());
        for (Eigen::Index i = 0; i < xv.size(); ++i) {
            const S v = xv(i);
            out(i) = S(0.5) * v * (S(1) + std::tanh(k * (v + c * v * v * v)));
        }
        return unary(std::move(out), x, [x, k, c](Tape& t, const Mat<S>& g) {
            const Mat<S>& xv = t.value(x);
            Mat<S>& gx = t.grad_buffer(x);
            for (Eigen::Index i = 0; i < xv.size(); ++i) {
                const S v = xv(i);
                const S u = k * (v + c * v * v * v);
                const S th = std::tanh(u);
                const S sech2 = S(1) - th * th;
                const S du = k * (S(1) + S(3) * c * v * v);
                gx(i) += g(i) * (S(0.5) * (S(1) + th) + S(0.5) * v * sech2 * du);
            }
        });
    }

    Id row_softmax(Id x) {
        const Mat<S>& xv = value(x);
        Mat<S> y(xv.rows(), xv.cols());
        for (Eigen::Index r = 0; r < xv.rows(); ++r) {
            const S mx = xv.row(r).maxCoeff();
            y.row(r) = (xv.row(r).array() - mx).exp();
            y.row(r) /= y.row(r).sum();
        }
        Id id = unary(y, x, nullptr);
        node(id).back = [x, id](Tape& t) {
            const Mat<S>& g = t.grad(id);
            const Mat<S>& y = t.value(id);
            Mat<S>& gx = t.grad_buffer(x);
            for (Eigen::Index r = 0; r < g.rows(); ++r) {
                const S dot = (g.row(r).array() * y.row(r).array()).sum();
                gx.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
            }
        };
        return id;
    }

    Id row_log_softmax(Id x) {
        const Mat<S>& xv = value(x);
        Mat<S> y(xv.rows(), xv.cols());
        for (Eigen::Index r = 0; r < xv.rows(); ++r) {
            const S mx = xv.row(r).maxCoeff();
            const S lse = std::log((xv.row(r).array() - mx).exp().sum()) + mx;
            y.row(r) = xv.row(r).array() - lse;
        }
        Id id = unary(std::move(y), x, nullptr);
        node(id).back = [x, id](Tape& t) {
            const Mat<S>& g = t.grad(id);
            const Mat<S>& y = t.value(id);
            Mat<S>& gx = t.grad_buffer(x);
            for (Eigen::Index r = 0; r < g.rows(); ++r) {
                const S gsum = g.row(r).sum();
                gx.row(r).array() += g.row(r).array() - y.row(r).array().exp() * gsum;
            }
        };
        return id;
    }

    Id mean_rows(Id x) {
        const Mat<S>& xv = value(x);
        Mat<S> out = xv.colwise().mean();
        const S inv_n = S(1) / static_cast<S>(xv.rows());
        return unary(std::move(out), x, [x, inv_n](Tape& t, const Mat<S>& g) {
            t.grad_buffer(x).rowwise() += (g * inv_n).row(0);
        });
    }

    Id l2_normalize_rows(Id x) {
        const Mat<S>& xv = value(x);
        Mat<S> y(xv.rows(), xv.cols());
        Mat<S> inv_norm(xv.rows(), 1);
        for (Eigen::Index r = 0; r < xv.rows(); ++r) {
            const S n = xv.row(r).norm();
            if (!(n > S(0))) throw std::runtime_error("l2_normalize_rows: zero-norm row");
            inv_norm(r, 0) = S(1) / n;
            y.row(r) = xv.row(r) * inv_norm(r, 0);
        }
        Id id = unary(std::move(y), x, nullptr);
        node(id).back = [x, id, inv_norm = std::move(inv_norm)](Tape& t) {
            const Mat<S>& g = t.grad(id);
            const Mat<S>& y = t.value(id);
            Mat<S>& gx = t.grad_buffer(x);
            for (Eigen::Index r = 0; r < g.rows(); ++r) {
                const S dot = (g.row(r).array() * y.row(r).array()).sum();
                gx.row(r).array() +=
                    inv_norm(r, 0) * (g.row(r).array() - y.row(r).array() * dot);
            }
        };
        return id;
    }

    // ---- scalar reductions / loss kernels ----

    Id sum_all(Id x) {
        Mat<S> out(1, 1);
        out(0, 0) = value(x).sum();
        return unary(std::move(out), x, [x](Tape& t, const Mat<S>& g) {
            t.grad_buffer(x).array() += g(0, 0);
        });
    }

    Id sum_diag(Id x) {
        const Mat<S>& xv = value(x);
        if (xv.rows() != xv.cols()) throw std::invalid_argument("sum_diag needs a square matrix");
        Mat<S> out(1, 1);
        out(0, 0) = xv.diagonal().sum();
        return unary(std::move(out), x, [x](Tape& t, const Mat<S>& g) {
            t.grad_buffer(x).diagonal().array() += g(0, 0);
        });
    }

    // Elementwise division by a positive 1x1 node.
    Id div_by_scalar(Id x, Id s) {
        if (value(s).size() != 1) throw std::invalid_argument("div_by_scalar: divisor must be 1x1");
        const S sv = value(s)(0, 0);
        return binary(value(x) / sv, x, s,
                      [x, s](Tape& t, const Mat<S>& g) {
                          t.grad_buffer(x) += g / t.value(s)(0, 0);
                      },
                      [x, s](Tape& t, const Mat<S>& g) {
                          const S sv = t.value(s)(0, 0);
                          t.grad_buffer(s)(0, 0) -=
                              (g.array() * t.value(x).array()).sum() / (sv * sv);
                      });
    }

    // tau = exp(log_tau) clamped to [lo, hi]; gradient is zero while clamped.
    Id temperature(Id log_tau, S lo, S hi) {
        if (value(log_tau).size() != 1)
            throw std::invalid_argument("temperature: log_tau must be 1x1");
        const S raw = std::exp(value(log_tau)(0, 0));
        const S tau = std::min(hi, std::max(lo, raw));
        Mat<S> out(1, 1);
        out(0, 0) = tau;
        const bool clamped = raw < lo || raw > hi;
        return unary(std::move(out), log_tau, [log_tau, tau, clamped](Tape& t, const Mat<S>& g) {
            if (!clamped) t.grad_buffer(log_tau)(0, 0) += g(0, 0) * tau;
        });
    }

    // Sum over rows of cross-entropy against integer labels; labels < 0 are
    // masked out. Returns 1x1.
    Id ce_rows(Id logits, std::vector<int> labels) {
        const Mat<S>& xv = value(logits);
        if (static_cast<Eigen::Index>(labels.size()) != xv.rows())
            throw std::invalid_argument("ce_rows label count mismatch");
        Mat<S> probs(xv.rows(), xv.cols());
        S total = S(0);
        for (Eigen::Index r = 0; r < xv.rows(); ++r) {
            const int lab = labels[static_cast<size_t>(r)];
            if (lab >= static_cast<int>(xv.cols()))
                throw std::out_of_range("ce_rows label out of range");
            const S mx = xv.row(r).maxCoeff();
            Eigen::Array<S, 1, Eigen::Dynamic> e = (xv.row(r).array() - mx).exp();
            const S z = e.sum();
            probs.row(r) = (e / z).matrix();
            if (lab >= 0) total += -(xv(r, lab) - mx - std::log(z));
        }
        Mat<S> out(1, 1);
        out(0, 0) = total;
        return unary(std::move(out), logits,
                     [logits, labels = std::move(labels), probs = std::move(probs)](
                         Tape& t, const Mat<S>& g) {
                         Mat<S>& gx = t.grad_buffer(logits);
                         for (Eigen::Index r = 0; r < probs.rows(); ++r) {
                             const int lab = labels[static_cast<size_t>(r)];
                             if (lab < 0) continue;
                             gx.row(r) += g(0, 0) * probs.row(r);
                             gx(r, lab) -= g(0, 0);
                         }
                     });
    }

    // Mean over all elements of (a - b)^2. Returns 1x1.
    Id mse(Id a, Id b) {
        check_same_shape(a, b, "mse");
        const Mat<S> diff = value(a) - value(b);
        Mat<S> out(1, 1);
        out(0, 0) = diff.array().square().mean();
        const S scale = S(2) / static_cast<S>(diff.size());
        return binary(std::move(out), a, b,
                      [a, b, scale](Tape& t, const Mat<S>& g) {
                          t.grad_buffer(a) += g(0, 0) * scale * (t.value(a) - t.value(b));
                      },
                      [a, b, scale](Tape& t, const Mat<S>& g) {
                          t.grad_buffer(b) -= g(0, 0) * scale * (t.value(a) - t.value(b));
                      });
    }

    // Mutable gradient accumulator, sized on first touch.
    Mat<S>& grad_buffer(Id id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.size() == 0) n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

private:
    Node& node(Id id) { return nodes_[static_cast<size_t>(id)]; }

    void accumulate(Id id, const Mat<S>& g) { grad_buffer(id) += g; }

    Id push(Mat<S> value, bool needs_grad, std::function<void(Tape&, Id)> back) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        const Id id = size();
        if (needs_grad && back) {
            n.back = [back = std::move(back), id](Tape& t) { back(t, id); };
        }
        nodes_.push_back(std::move(n));
        return id;
    }

    // Helper for ops with one differentiable input: the closure receives this
    // node's gradient directly.
    Id unary(Mat<S> value, Id input, std::function<void(Tape&, const Mat<S>&)> back) {
        if (!needs_grad(input) || !back) return push(std::move(value), needs_grad(input), nullptr);
        return push(std::move(value), true, [back = std::move(back)](Tape& t, Id self) {
            back(t, t.grad(self));
        });
    }

    Id binary(Mat<S> value, Id a, Id b, std::function<void(Tape&, const Mat<S>&)> back_a,
              std::function<void(Tape&, const Mat<S>&)> back_b) {
        const bool ga = needs_grad(a), gb = needs_grad(b);
        if (!ga && !gb) return push(std::move(value), false, nullptr);
        return push(std::move(value), true,
                    [ga, gb, back_a = std::move(back_a), back_b = std::move(back_b)](Tape& t,
                                                                                      Id self) {
                        const Mat<S> g = t.grad(self);  // copy: buffers below may realloc
                        if (ga) back_a(t, g);
                        if (gb) back_b(t, g);
                    });
    }

    void check_same_shape(Id a, Id b, const char* op) {
        if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
            throw std::invalid_argument(std::string(op) + " shape mismatch");
    }

    std::vector<Node> nodes_;
};

}  // namespace uniret
